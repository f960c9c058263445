//! Minibatch SGD with hand-derived gradients for all three model kinds.
//!
//! The objective is mean softmax cross-entropy. Weight decay applies to the
//! multiplicative weights only (adapter weights, `V`, probe and LaBo `W`),
//! never to biases, shifts, or masked entries of `V`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_io::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, log_sum_exp, softmax, Matrix};
use crate::model::{
    AdaCbmModel, ConceptBank, LaboHead, LinearProbe, ModelKind, ModelMetadata, TrainedModel,
};
use crate::selection::DenominatorMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub lr_final_fraction: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adapter_layers: usize,
    pub k: usize,
    pub denominator_mode: DenominatorMode,
    pub model_kind: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr0: 5e-4,
            lr_final_fraction: 0.01,
            weight_decay: 1e-4,
            batch_size: 256,
            seed: 0,
            adapter_layers: 1,
            k: 10,
            denominator_mode: DenominatorMode::Paper,
            model_kind: ModelKind::AdaCbm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return fail(format!(
                "lr_final_fraction must lie in (0, 1], got {}",
                self.lr_final_fraction
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.adapter_layers == 0 {
            return fail("adapter_layers must be at least 1".into());
        }
        Ok(())
    }
}

/// Linear decay from `lr0` at epoch 0 to `lr0 * lr_final_fraction` at the
/// last epoch. Written as an interpolation so both endpoints are exact.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if config.epochs <= 1 {
        return config.lr0;
    }
    let s = epoch as f64 / (config.epochs - 1) as f64;
    let lr_final = config.lr0 * config.lr_final_fraction;
    (1.0 - s) * config.lr0 + s * lr_final
}

/// `-log softmax(logits)[label]`
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradients shaped like the trainable parameters of one model kind.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientSet {
    AdaCbm {
        adapter: Vec<LayerGrad>,
        v: Matrix,
        alpha: Vec<f64>,
        beta: Vec<f64>,
    },
    LinearProbe {
        weight: Matrix,
        bias: Vec<f64>,
    },
    LaboHead {
        weight: Matrix,
        bias: Vec<f64>,
    },
}

impl GradientSet {
    fn zeros_like(model: &TrainedModel) -> Self {
        match model {
            TrainedModel::AdaCbm(m) => GradientSet::AdaCbm {
                adapter: m
                    .adapter
                    .layers
                    .iter()
                    .map(|l| LayerGrad {
                        weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                        bias: vec![0.0; l.bias.len()],
                    })
                    .collect(),
                v: Matrix::zeros(m.head.v.rows(), m.head.v.cols()),
                alpha: vec![0.0; m.head.alpha.len()],
                beta: vec![0.0; m.head.beta.len()],
            },
            TrainedModel::LinearProbe(m) => GradientSet::LinearProbe {
                weight: Matrix::zeros(m.weight.rows(), m.weight.cols()),
                bias: vec![0.0; m.bias.len()],
            },
            TrainedModel::LaboHead(m) => GradientSet::LaboHead {
                weight: Matrix::zeros(m.weight.rows(), m.weight.cols()),
                bias: vec![0.0; m.bias.len()],
            },
        }
    }

    fn scale(&mut self, factor: f64) {
        let f = |xs: &mut [f64]| xs.iter_mut().for_each(|x| *x *= factor);
        match self {
            GradientSet::AdaCbm {
                adapter,
                v,
                alpha,
                beta,
            } => {
                for l in adapter {
                    f(l.weight.as_mut_slice());
                    f(&mut l.bias);
                }
                f(v.as_mut_slice());
                f(alpha);
                f(beta);
            }
            GradientSet::LinearProbe { weight, bias } | GradientSet::LaboHead { weight, bias } => {
                f(weight.as_mut_slice());
                f(bias);
            }
        }
    }

    /// Same ordering as [`flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            GradientSet::AdaCbm {
                adapter,
                v,
                alpha,
                beta,
            } => {
                for l in adapter {
                    out.extend_from_slice(l.weight.as_slice());
                }
                for l in adapter {
                    out.extend_from_slice(&l.bias);
                }
                out.extend_from_slice(v.as_slice());
                out.extend_from_slice(alpha);
                out.extend_from_slice(beta);
            }
            GradientSet::LinearProbe { weight, bias } | GradientSet::LaboHead { weight, bias } => {
                out.extend_from_slice(weight.as_slice());
                out.extend_from_slice(bias);
            }
        }
        out
    }
}

/// All trainable parameters in a fixed order: adapter weights (layer by
/// layer), adapter biases, `V`, `alpha`, `beta`; or weight then bias for the
/// comparison heads.
pub fn flat_params(model: &TrainedModel) -> Vec<f64> {
    let mut out = Vec::new();
    match model {
        TrainedModel::AdaCbm(m) => {
            for l in &m.adapter.layers {
                out.extend_from_slice(l.weight.as_slice());
            }
            for l in &m.adapter.layers {
                out.extend_from_slice(&l.bias);
            }
            out.extend_from_slice(m.head.v.as_slice());
            out.extend_from_slice(&m.head.alpha);
            out.extend_from_slice(&m.head.beta);
        }
        TrainedModel::LinearProbe(m) => {
            out.extend_from_slice(m.weight.as_slice());
            out.extend_from_slice(&m.bias);
        }
        TrainedModel::LaboHead(m) => {
            out.extend_from_slice(m.weight.as_slice());
            out.extend_from_slice(&m.bias);
        }
    }
    out
}

/// Inverse of [`flat_params`]. Masked `V` entries are written as given, so
/// callers probing them directly can observe that they have no effect.
pub fn set_flat_params(model: &mut TrainedModel, params: &[f64]) -> Result<()> {
    let expected = flat_params(model).len();
    if params.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: params.len(),
        });
    }
    let mut rest = params;
    let mut take = |dst: &mut [f64]| {
        let (head, tail) = rest.split_at(dst.len());
        dst.copy_from_slice(head);
        rest = tail;
    };
    match model {
        TrainedModel::AdaCbm(m) => {
            for l in &mut m.adapter.layers {
                take(l.weight.as_mut_slice());
            }
            for l in &mut m.adapter.layers {
                take(&mut l.bias);
            }
            take(m.head.v.as_mut_slice());
            take(&mut m.head.alpha);
            take(&mut m.head.beta);
        }
        TrainedModel::LinearProbe(m) => {
            take(m.weight.as_mut_slice());
            take(&mut m.bias);
        }
        TrainedModel::LaboHead(m) => {
            take(m.weight.as_mut_slice());
            take(&mut m.bias);
        }
    }
    Ok(())
}

/// Softmax cross-entropy gradient w.r.t. the logits: `p - onehot(label)`.
fn logit_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

fn check_label(label: usize, n: usize) -> Result<()> {
    if label >= n {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: n,
            index: 0,
        });
    }
    Ok(())
}

/// Adds one sample's loss gradient into `grads`; returns `(loss, correct)`.
fn accumulate_sample(
    model: &TrainedModel,
    x: &[f64],
    label: usize,
    grads: &mut GradientSet,
) -> Result<(f64, bool)> {
    match (model, grads) {
        (
            TrainedModel::AdaCbm(m),
            GradientSet::AdaCbm {
                adapter,
                v,
                alpha,
                beta,
            },
        ) => adacbm_sample(m, x, label, adapter, v, alpha, beta),
        (TrainedModel::LinearProbe(m), GradientSet::LinearProbe { weight, bias }) => {
            let z = m.forward_logits(x)?;
            check_label(label, z.len())?;
            let gz = logit_grad(&z, label);
            for (i, &g) in gz.iter().enumerate() {
                bias[i] += g;
                for (c, &xc) in x.iter().enumerate() {
                    weight.set(i, c, weight.get(i, c) + g * xc);
                }
            }
            Ok((cross_entropy_loss(&z, label), argmax(&z) == label))
        }
        (TrainedModel::LaboHead(m), GradientSet::LaboHead { weight, bias }) => {
            let s = m.similarities(x)?;
            let mut z = m.weight.tr_mul_vec(&s);
            for (zi, b) in z.iter_mut().zip(&m.bias) {
                *zi += b;
            }
            check_label(label, z.len())?;
            let gz = logit_grad(&z, label);
            for (i, &g) in gz.iter().enumerate() {
                bias[i] += g;
                for (j, &sj) in s.iter().enumerate() {
                    weight.set(j, i, weight.get(j, i) + g * sj);
                }
            }
            Ok((cross_entropy_loss(&z, label), argmax(&z) == label))
        }
        _ => Err(Error::InvalidConfig("gradient set does not match model kind".into())),
    }
}

fn adacbm_sample(
    m: &AdaCbmModel,
    x: &[f64],
    label: usize,
    adapter: &mut [LayerGrad],
    gv: &mut Matrix,
    galpha: &mut [f64],
    gbeta: &mut [f64],
) -> Result<(f64, bool)> {
    let trace = m.adapter.forward_trace(x)?;
    let concepts = m.concepts();
    let mask = m.head.mask();
    let (k, n) = (m.n_concepts(), m.n_classes());
    check_label(label, n)?;

    let responses: Vec<f64> = (0..k)
        .map(|j| dot(&trace.output, concepts.embedding(j)) + m.head.alpha[j])
        .collect();
    let mut z = vec![0.0; n];
    for (i, zi) in z.iter_mut().enumerate() {
        let mut sum = 0.0;
        for (j, &r) in responses.iter().enumerate() {
            if mask.get(j, i) {
                sum += m.head.v.get(j, i) * r;
            }
        }
        *zi = sum + m.head.beta[i];
    }
    let gz = logit_grad(&z, label);

    for (gb, g) in gbeta.iter_mut().zip(&gz) {
        *gb += g;
    }
    // d loss / d response_j, shared by alpha_j and F(x) . t_j
    let mut gresp = vec![0.0; k];
    for j in 0..k {
        for i in 0..n {
            if mask.get(j, i) {
                gresp[j] += m.head.v.get(j, i) * gz[i];
                gv.set(j, i, gv.get(j, i) + gz[i] * responses[j]);
            }
        }
        galpha[j] += gresp[j];
    }
    let mut g = concepts.embeddings().tr_mul_vec(&gresp);

    let slope = m.adapter.negative_slope();
    let last = m.adapter.layers.len() - 1;
    for l in (0..=last).rev() {
        if l < last {
            for (gi, &a) in g.iter_mut().zip(&trace.preacts[l]) {
                if a < 0.0 {
                    *gi *= slope;
                }
            }
        }
        let input = &trace.inputs[l];
        let lg = &mut adapter[l];
        for (r, &gr) in g.iter().enumerate() {
            lg.bias[r] += gr;
            if gr != 0.0 {
                for (c, &ic) in input.iter().enumerate() {
                    lg.weight.set(r, c, lg.weight.get(r, c) + gr * ic);
                }
            }
        }
        if l > 0 {
            g = m.adapter.layers[l].weight.tr_mul_vec(&g);
        }
    }

    Ok((cross_entropy_loss(&z, label), argmax(&z) == label))
}

/// Mean loss over the batch and its gradient.
pub fn backward(model: &TrainedModel, batch: &[(&[f64], usize)]) -> Result<(f64, GradientSet)> {
    let (loss_sum, _, grads) = batch_gradients(model, batch)?;
    Ok((loss_sum / batch.len() as f64, grads))
}

fn batch_gradients(
    model: &TrainedModel,
    batch: &[(&[f64], usize)],
) -> Result<(f64, usize, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grads = GradientSet::zeros_like(model);
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for &(x, label) in batch {
        let (loss, hit) = accumulate_sample(model, x, label, &mut grads)?;
        loss_sum += loss;
        correct += usize::from(hit);
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((loss_sum, correct, grads))
}

fn decayed(p: &mut [f64], g: &[f64], lr: f64, wd: f64) {
    for (pi, &gi) in p.iter_mut().zip(g) {
        *pi -= lr * (gi + wd * *pi);
    }
}

fn plain(p: &mut [f64], g: &[f64], lr: f64) {
    for (pi, &gi) in p.iter_mut().zip(g) {
        *pi -= lr * gi;
    }
}

/// `p <- p - lr * (g + wd * p)` for weights, `p <- p - lr * g` otherwise.
/// Masked `V` entries are left untouched.
pub fn sgd_step(model: &mut TrainedModel, grads: &GradientSet, lr: f64, weight_decay: f64) -> Result<()> {
    match (model, grads) {
        (
            TrainedModel::AdaCbm(m),
            GradientSet::AdaCbm {
                adapter,
                v,
                alpha,
                beta,
            },
        ) => {
            if adapter.len() != m.adapter.layers.len() {
                return Err(Error::InvalidConfig("adapter depth mismatch".into()));
            }
            for (layer, g) in m.adapter.layers.iter_mut().zip(adapter) {
                decayed(layer.weight.as_mut_slice(), g.weight.as_slice(), lr, weight_decay);
                plain(&mut layer.bias, &g.bias, lr);
            }
            let mask = m.head.mask().clone();
            for j in 0..mask.rows() {
                for i in 0..mask.cols() {
                    if mask.get(j, i) {
                        let p = m.head.v.get(j, i);
                        m.head.v.set(j, i, p - lr * (v.get(j, i) + weight_decay * p));
                    }
                }
            }
            plain(&mut m.head.alpha, alpha, lr);
            plain(&mut m.head.beta, beta, lr);
        }
        (TrainedModel::LinearProbe(m), GradientSet::LinearProbe { weight, bias }) => {
            decayed(m.weight.as_mut_slice(), weight.as_slice(), lr, weight_decay);
            plain(&mut m.bias, bias, lr);
        }
        (TrainedModel::LaboHead(m), GradientSet::LaboHead { weight, bias }) => {
            decayed(m.weight.as_mut_slice(), weight.as_slice(), lr, weight_decay);
            plain(&mut m.bias, bias, lr);
        }
        _ => return Err(Error::InvalidConfig("gradient set does not match model kind".into())),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<EpochLog>,
}

/// Untrained model of the configured kind.
pub fn init_model(
    dataset: &Dataset,
    concepts: Option<&ConceptBank>,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let mut metadata = ModelMetadata::with_default_names(dataset.n_classes());
    metadata.train_config = Some(config.clone());
    let need_concepts = || {
        let bank = concepts.ok_or_else(|| {
            Error::InvalidConfig(format!("model kind {} requires a concept selection", config.model_kind))
        })?;
        if bank.dim() != dataset.dims() {
            return Err(Error::DimensionMismatch {
                expected: dataset.dims(),
                actual: bank.dim(),
            });
        }
        if bank.mask().cols() != dataset.n_classes() {
            return Err(Error::LengthMismatch {
                what: "selection classes vs dataset classes",
                left: bank.mask().cols(),
                right: dataset.n_classes(),
            });
        }
        Ok(bank.clone())
    };
    Ok(match config.model_kind {
        ModelKind::AdaCbm => {
            TrainedModel::AdaCbm(AdaCbmModel::new(need_concepts()?, metadata, config.adapter_layers)?)
        }
        ModelKind::LaboHead => TrainedModel::LaboHead(LaboHead::new(need_concepts()?, metadata)?),
        ModelKind::LinearProbe => TrainedModel::LinearProbe(LinearProbe::new(dataset.dims(), metadata)),
    })
}

/// Trains from scratch and returns the last-epoch model with its log.
pub fn train(
    dataset: &Dataset,
    concepts: Option<&ConceptBank>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset.require_all_classes()?;
    let model = init_model(dataset, concepts, config)?;
    train_model(model, dataset, config)
}

/// Continues training an existing model with the given recipe.
pub fn train_model(
    mut model: TrainedModel,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.dim() != dataset.dims() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: dataset.dims(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], usize)> =
                chunk.iter().map(|&i| (dataset.x(i), dataset.label(i))).collect();
            let (l, c, grads) = batch_gradients(&model, &batch)?;
            loss_sum += l;
            correct += c;
            sgd_step(&mut model, &grads, lr, config.weight_decay)?;
        }
        log.push(EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / dataset.len() as f64,
            train_acc: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(TrainOutcome { model, log })
}
