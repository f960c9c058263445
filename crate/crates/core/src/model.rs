//! The adaptive concept bottleneck classifier and the two comparison heads.
//!
//! For an image embedding `x`, concept embeddings `t_j`, frozen mask `M` and
//! learned `V`, `alpha`, `beta`, the class logits are
//!
//! ```text
//! z_i = sum_j (M . V)_ji * (F(x) . t_j + alpha_j) + beta_i
//! ```
//!
//! where `F` is a stack of square linear layers with leaky ReLU between them.
//! Every summand can be split into `|F(x)| * |t_j| * cos(F(x), t_j)`, which is
//! what [`AdaCbmModel::decompose`] reports and what inhibition replaces.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding_io::{ConceptRecord, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, softmax, Matrix};
use crate::selection::{DenominatorMode, Mask, SelectionResult};
use crate::trainer::TrainConfig;

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

#[inline]
pub fn leaky_relu(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearProbe,
    LaboHead,
    #[serde(rename = "adacbm")]
    AdaCbm,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::LinearProbe => "linear_probe",
            ModelKind::LaboHead => "labo_head",
            ModelKind::AdaCbm => "adacbm",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adacbm" => Ok(ModelKind::AdaCbm),
            "linear" | "linear_probe" => Ok(ModelKind::LinearProbe),
            "labo" | "labo_head" => Ok(ModelKind::LaboHead),
            other => Err(Error::InvalidConfig(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Geometric factor replaced by 1 during inhibited inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    ImageNorm,
    TextNorm,
    Cosine,
}

impl Quantity {
    pub const ALL: [Quantity; 3] = [Quantity::ImageNorm, Quantity::TextNorm, Quantity::Cosine];
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quantity::ImageNorm => "image_norm",
            Quantity::TextNorm => "text_norm",
            Quantity::Cosine => "cosine",
        })
    }
}

impl FromStr for Quantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_norm" | "image-norm" => Ok(Quantity::ImageNorm),
            "text_norm" | "text-norm" => Ok(Quantity::TextNorm),
            "cosine" => Ok(Quantity::Cosine),
            other => Err(Error::InvalidConfig(format!("unknown quantity {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub(crate) weight: Matrix,
    pub(crate) bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != weight.cols() {
            return Err(Error::InvalidConfig(format!(
                "adapter layers must be square, got {}x{}",
                weight.rows(),
                weight.cols()
            )));
        }
        if bias.len() != weight.rows() {
            return Err(Error::DimensionMismatch {
                expected: weight.rows(),
                actual: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn apply(&self, h: &[f64]) -> Vec<f64> {
        let mut out = self.weight.mul_vec(h);
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        out
    }
}

/// The learnable map `x -> F(x)`; dimension-preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub(crate) layers: Vec<LinearLayer>,
    negative_slope: f64,
}

/// Intermediate values kept for backpropagation.
pub(crate) struct AdapterTrace {
    /// Input to each layer.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pub preacts: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Adapter {
    /// Identity weights and zero biases in every layer.
    pub fn identity(dim: usize, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|_| LinearLayer::new(Matrix::identity(dim), vec![0.0; dim]))
            .collect::<Result<_>>()?;
        Self::new(layers, DEFAULT_NEGATIVE_SLOPE)
    }

    pub fn new(layers: Vec<LinearLayer>, negative_slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("adapter needs at least one layer".into()));
        }
        if !(negative_slope > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "negative slope must be positive, got {negative_slope}"
            )));
        }
        let d = layers[0].weight.rows();
        if let Some(l) = layers.iter().find(|l| l.weight.rows() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: l.weight.rows(),
            });
        }
        Ok(Self {
            layers,
            negative_slope,
        })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn negative_slope(&self) -> f64 {
        self.negative_slope
    }

    /// Leaky ReLU after every layer but the last.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if l < last {
                h.iter_mut()
                    .for_each(|v| *v = leaky_relu(*v, self.negative_slope));
            }
        }
        Ok(h)
    }

    pub(crate) fn forward_trace(&self, x: &[f64]) -> Result<AdapterTrace> {
        self.check_dim(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer.apply(&h);
            inputs.push(h);
            h = if l < last {
                a.iter().map(|&v| leaky_relu(v, self.negative_slope)).collect()
            } else {
                a.clone()
            };
            preacts.push(a);
        }
        Ok(AdapterTrace {
            inputs,
            preacts,
            output: h,
        })
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }
}

/// Masked class-concept weights, per-concept shift and class bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CbmHead {
    pub(crate) v: Matrix,
    mask: Mask,
    pub(crate) alpha: Vec<f64>,
    pub(crate) beta: Vec<f64>,
}

impl CbmHead {
    /// `V = M`, `alpha = 0`, `beta = 0`.
    pub fn init(mask: Mask) -> Self {
        let (k, n) = (mask.rows(), mask.cols());
        let mut v = Matrix::zeros(k, n);
        for j in 0..k {
            for i in 0..n {
                if mask.get(j, i) {
                    v.set(j, i, 1.0);
                }
            }
        }
        Self {
            v,
            mask,
            alpha: vec![0.0; k],
            beta: vec![0.0; n],
        }
    }

    pub fn from_parts(v: Matrix, mask: Mask, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if v.rows() != mask.rows() || v.cols() != mask.cols() {
            return Err(Error::InvalidConfig(format!(
                "V is {}x{} but mask is {}x{}",
                v.rows(),
                v.cols(),
                mask.rows(),
                mask.cols()
            )));
        }
        if alpha.len() != mask.rows() {
            return Err(Error::DimensionMismatch {
                expected: mask.rows(),
                actual: alpha.len(),
            });
        }
        if beta.len() != mask.cols() {
            return Err(Error::DimensionMismatch {
                expected: mask.cols(),
                actual: beta.len(),
            });
        }
        for j in 0..mask.rows() {
            for i in 0..mask.cols() {
                if !mask.get(j, i) && v.get(j, i) != 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "V[{j},{i}] = {} under a zero mask entry",
                        v.get(j, i)
                    )));
                }
            }
        }
        Ok(Self {
            v,
            mask,
            alpha,
            beta,
        })
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `(M . V)_ji`
    #[inline]
    pub fn weight(&self, concept: usize, class: usize) -> f64 {
        if self.mask.get(concept, class) {
            self.v.get(concept, class)
        } else {
            0.0
        }
    }
}

/// The frozen concept embeddings the bottleneck is built on, plus the mask
/// assigning them to classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    ids: Vec<String>,
    texts: Vec<String>,
    embeddings: Matrix,
    norms: Vec<f64>,
    mask: Mask,
}

impl ConceptBank {
    pub fn new(ids: Vec<String>, texts: Vec<String>, embeddings: Matrix, mask: Mask) -> Result<Self> {
        let k = embeddings.rows();
        if ids.len() != k || texts.len() != k || mask.rows() != k {
            return Err(Error::LengthMismatch {
                what: "concept ids/texts/mask rows vs concept embeddings",
                left: ids.len(),
                right: k,
            });
        }
        if let Some(j) = (0..k).find(|&j| (0..mask.cols()).all(|i| !mask.get(j, i))) {
            return Err(Error::InvalidConfig(format!(
                "concept {:?} is not assigned to any class",
                ids[j]
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidConfig(format!("duplicate concept id {dup:?}")));
        }
        let norms = (0..k).map(|j| norm(embeddings.row(j))).collect();
        Ok(Self {
            ids,
            texts,
            embeddings,
            norms,
            mask,
        })
    }

    /// Resolves a selection against the candidate pool it was computed from.
    pub fn from_selection(
        selection: &SelectionResult,
        pool: &EmbeddingMatrix,
        records: &[ConceptRecord],
    ) -> Result<Self> {
        if pool.rows() != records.len() {
            return Err(Error::LengthMismatch {
                what: "concept embeddings vs concept records",
                left: pool.rows(),
                right: records.len(),
            });
        }
        let mut rows = Vec::with_capacity(selection.concept_order.len());
        let mut texts = Vec::with_capacity(selection.concept_order.len());
        for id in &selection.concept_order {
            let j = records
                .iter()
                .position(|r| &r.id == id)
                .ok_or_else(|| Error::UnknownConcept(id.clone()))?;
            rows.push(j);
            texts.push(records[j].text.clone());
        }
        let embeddings = pool.select_rows(&rows)?.to_f64();
        Self::new(
            selection.concept_order.clone(),
            texts,
            embeddings,
            selection.mask(),
        )
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embedding(&self, j: usize) -> &[f64] {
        self.embeddings.row(j)
    }

    pub fn norm(&self, j: usize) -> f64 {
        self.norms[j]
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|c| c == id)
    }
}

/// How the bottleneck concepts were chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub k: usize,
    pub gamma: f64,
    pub mode: DenominatorMode,
}

impl From<&SelectionResult> for SelectionSummary {
    fn from(s: &SelectionResult) -> Self {
        Self {
            k: s.k,
            gamma: s.gamma,
            mode: s.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub selection: Option<SelectionSummary>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
}

impl ModelMetadata {
    pub fn with_default_names(n_classes: usize) -> Self {
        Self {
            class_names: (0..n_classes).map(|i| format!("class_{i}")).collect(),
            ..Default::default()
        }
    }
}

/// One `(concept, class)` summand of a logit and its geometric factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub concept_index: usize,
    pub concept_id: String,
    pub class_index: usize,
    /// `(M . V)_ji`
    pub weight: f64,
    /// `F(x) . t_j`
    pub dot: f64,
    pub cosine: f64,
    pub image_norm: f64,
    pub text_norm: f64,
    /// `alpha_j`
    pub shift: f64,
    /// `weight * (dot + shift)`
    pub contribution: f64,
    /// `F(x)` or `t_j` had zero norm; `cosine` is reported as 0.
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    /// Unmasked terms, grouped by class then ascending concept index.
    pub terms: Vec<TermRecord>,
    pub beta: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Interpretation {
    pub fn class_terms(&self, class: usize) -> impl Iterator<Item = &TermRecord> {
        self.terms.iter().filter(move |t| t.class_index == class)
    }

    pub fn top_contributors(&self, class: usize, top_k: usize) -> Vec<&TermRecord> {
        top_contributors(self, class, top_k)
    }
}

/// Highest contributions to `class`, ties broken by lower concept index.
pub fn top_contributors(interp: &Interpretation, class: usize, top_k: usize) -> Vec<&TermRecord> {
    let mut terms: Vec<&TermRecord> = interp.class_terms(class).collect();
    terms.sort_by(|a, b| {
        b.contribution
            .total_cmp(&a.contribution)
            .then(a.concept_index.cmp(&b.concept_index))
    });
    terms.truncate(top_k);
    terms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaCbmModel {
    pub(crate) adapter: Adapter,
    pub(crate) head: CbmHead,
    concepts: ConceptBank,
    metadata: ModelMetadata,
}

impl AdaCbmModel {
    /// Fresh model: identity adapter with `adapter_layers` layers, `V = M`,
    /// zero shifts and biases.
    pub fn new(concepts: ConceptBank, metadata: ModelMetadata, adapter_layers: usize) -> Result<Self> {
        let adapter = Adapter::identity(concepts.dim(), adapter_layers)?;
        let head = CbmHead::init(concepts.mask().clone());
        Self::from_parts(adapter, head, concepts, metadata)
    }

    pub fn from_parts(
        adapter: Adapter,
        head: CbmHead,
        concepts: ConceptBank,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        if adapter.dim() != concepts.dim() {
            return Err(Error::DimensionMismatch {
                expected: concepts.dim(),
                actual: adapter.dim(),
            });
        }
        if head.mask() != concepts.mask() {
            return Err(Error::InvalidConfig("head mask differs from concept mask".into()));
        }
        if metadata.class_names.len() != head.mask().cols() {
            return Err(Error::LengthMismatch {
                what: "class names vs mask columns",
                left: metadata.class_names.len(),
                right: head.mask().cols(),
            });
        }
        Ok(Self {
            adapter,
            head,
            concepts,
            metadata,
        })
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn head(&self) -> &CbmHead {
        &self.head
    }

    pub fn concepts(&self) -> &ConceptBank {
        &self.concepts
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn set_metadata(&mut self, metadata: ModelMetadata) {
        assert_eq!(metadata.class_names.len(), self.n_classes());
        self.metadata = metadata;
    }

    pub fn dim(&self) -> usize {
        self.adapter.dim()
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn n_classes(&self) -> usize {
        self.head.mask().cols()
    }

    /// `F(x)`
    pub fn adapt(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.adapter.forward(x)
    }

    /// `F(x) . t_j` for every concept.
    fn concept_dots(&self, f: &[f64]) -> Vec<f64> {
        (0..self.n_concepts())
            .map(|j| dot(f, self.concepts.embedding(j)))
            .collect()
    }

    /// Sums the unmasked, non-excluded terms in ascending concept order, then
    /// adds the class bias.
    fn accumulate(&self, responses: &[f64], excluded: Option<&[bool]>) -> Vec<f64> {
        let mask = self.head.mask();
        (0..self.n_classes())
            .map(|i| {
                let mut sum = 0.0;
                for (j, &r) in responses.iter().enumerate() {
                    if !mask.get(j, i) || excluded.is_some_and(|e| e[j]) {
                        continue;
                    }
                    sum += self.head.v.get(j, i) * (r + self.head.alpha[j]);
                }
                sum + self.head.beta[i]
            })
            .collect()
    }

    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.adapt(x)?;
        Ok(self.accumulate(&self.concept_dots(&f), None))
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward_logits(x)?))
    }

    pub fn decompose(&self, x: &[f64]) -> Result<Interpretation> {
        let f = self.adapt(x)?;
        let image_norm = norm(&f);
        let dots = self.concept_dots(&f);
        let mut terms = Vec::new();
        for i in 0..self.n_classes() {
            for (j, &d) in dots.iter().enumerate() {
                if !self.head.mask().get(j, i) {
                    continue;
                }
                let text_norm = self.concepts.norm(j);
                let denom = image_norm * text_norm;
                let degenerate = !(denom > 0.0);
                let weight = self.head.v.get(j, i);
                let shift = self.head.alpha[j];
                terms.push(TermRecord {
                    concept_index: j,
                    concept_id: self.concepts.ids()[j].clone(),
                    class_index: i,
                    weight,
                    dot: d,
                    cosine: if degenerate { 0.0 } else { d / denom },
                    image_norm,
                    text_norm,
                    shift,
                    contribution: weight * (d + shift),
                    degenerate,
                });
            }
        }
        let logits = self.accumulate(&dots, None);
        Ok(Interpretation {
            terms,
            beta: self.head.beta.clone(),
            probabilities: softmax(&logits),
            logits,
        })
    }

    /// Logits with every term of the excluded concepts dropped.
    pub fn intervene<S: AsRef<str>>(&self, x: &[f64], excluded_ids: &[S]) -> Result<Prediction> {
        let mut excluded = vec![false; self.n_concepts()];
        for id in excluded_ids {
            let j = self
                .concepts
                .index_of(id.as_ref())
                .ok_or_else(|| Error::UnknownConcept(id.as_ref().to_owned()))?;
            excluded[j] = true;
        }
        let f = self.adapt(x)?;
        let logits = self.accumulate(&self.concept_dots(&f), Some(&excluded));
        Ok(Prediction {
            probabilities: softmax(&logits),
            logits,
        })
    }

    /// Logits with one factor of `F(x) . t_j = |F(x)| |t_j| cos` replaced by 1.
    pub fn inhibit(&self, x: &[f64], quantity: Quantity) -> Result<Vec<f64>> {
        let f = self.adapt(x)?;
        let image_norm = norm(&f);
        let responses: Vec<f64> = self
            .concept_dots(&f)
            .into_iter()
            .enumerate()
            .map(|(j, d)| {
                let text_norm = self.concepts.norm(j);
                let denom = image_norm * text_norm;
                let cosine = if denom > 0.0 { d / denom } else { 0.0 };
                match quantity {
                    Quantity::ImageNorm => text_norm * cosine,
                    Quantity::TextNorm => image_norm * cosine,
                    Quantity::Cosine => image_norm * text_norm,
                }
            })
            .collect();
        Ok(self.accumulate(&responses, None))
    }
}

/// Plain linear classifier on the frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `n x d`
    pub(crate) weight: Matrix,
    pub(crate) bias: Vec<f64>,
    metadata: ModelMetadata,
}

impl LinearProbe {
    /// Zero-initialized.
    pub fn new(dim: usize, metadata: ModelMetadata) -> Self {
        let n = metadata.class_names.len();
        Self {
            weight: Matrix::zeros(n, dim),
            bias: vec![0.0; n],
            metadata,
        }
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>, metadata: ModelMetadata) -> Result<Self> {
        if weight.rows() != bias.len() || bias.len() != metadata.class_names.len() {
            return Err(Error::LengthMismatch {
                what: "linear probe rows vs bias vs class names",
                left: weight.rows(),
                right: bias.len(),
            });
        }
        Ok(Self {
            weight,
            bias,
            metadata,
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let mut z = self.weight.mul_vec(x);
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        Ok(z)
    }
}

/// Bottleneck head over frozen cosine similarities: `z = W^T s + b`, with
/// `W` initialized from the mask but trained without it.
#[derive(Debug, Clone, PartialEq)]
pub struct LaboHead {
    /// `K x n`
    pub(crate) weight: Matrix,
    pub(crate) bias: Vec<f64>,
    concepts: ConceptBank,
    metadata: ModelMetadata,
}

impl LaboHead {
    pub fn new(concepts: ConceptBank, metadata: ModelMetadata) -> Result<Self> {
        let mask = concepts.mask();
        let mut weight = Matrix::zeros(mask.rows(), mask.cols());
        for j in 0..mask.rows() {
            for i in 0..mask.cols() {
                if mask.get(j, i) {
                    weight.set(j, i, 1.0);
                }
            }
        }
        let bias = vec![0.0; mask.cols()];
        Self::from_parts(weight, bias, concepts, metadata)
    }

    pub fn from_parts(
        weight: Matrix,
        bias: Vec<f64>,
        concepts: ConceptBank,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        if weight.rows() != concepts.len()
            || weight.cols() != bias.len()
            || bias.len() != metadata.class_names.len()
        {
            return Err(Error::InvalidConfig(format!(
                "labo head shapes disagree: W {}x{}, {} biases, {} concepts, {} classes",
                weight.rows(),
                weight.cols(),
                bias.len(),
                concepts.len(),
                metadata.class_names.len()
            )));
        }
        Ok(Self {
            weight,
            bias,
            concepts,
            metadata,
        })
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn concepts(&self) -> &ConceptBank {
        &self.concepts
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn dim(&self) -> usize {
        self.concepts.dim()
    }

    /// Cosine similarity of `x` with every concept (0 for zero-norm inputs).
    pub fn similarities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let xn = norm(x);
        Ok((0..self.concepts.len())
            .map(|j| {
                let denom = xn * self.concepts.norm(j);
                if denom > 0.0 {
                    dot(x, self.concepts.embedding(j)) / denom
                } else {
                    0.0
                }
            })
            .collect())
    }

    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let s = self.similarities(x)?;
        let mut z = self.weight.tr_mul_vec(&s);
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        Ok(z)
    }
}

/// Any of the trainable classifiers.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    AdaCbm(AdaCbmModel),
    LinearProbe(LinearProbe),
    LaboHead(LaboHead),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::AdaCbm(_) => ModelKind::AdaCbm,
            TrainedModel::LinearProbe(_) => ModelKind::LinearProbe,
            TrainedModel::LaboHead(_) => ModelKind::LaboHead,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TrainedModel::AdaCbm(m) => m.dim(),
            TrainedModel::LinearProbe(m) => m.dim(),
            TrainedModel::LaboHead(m) => m.dim(),
        }
    }

    pub fn metadata(&self) -> &ModelMetadata {
        match self {
            TrainedModel::AdaCbm(m) => m.metadata(),
            TrainedModel::LinearProbe(m) => m.metadata(),
            TrainedModel::LaboHead(m) => m.metadata(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.metadata().class_names.len()
    }

    pub fn forward_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            TrainedModel::AdaCbm(m) => m.forward_logits(x),
            TrainedModel::LinearProbe(m) => m.forward_logits(x),
            TrainedModel::LaboHead(m) => m.forward_logits(x),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward_logits(x)?))
    }

    pub fn as_adacbm(&self) -> Option<&AdaCbmModel> {
        match self {
            TrainedModel::AdaCbm(m) => Some(m),
            _ => None,
        }
    }

    pub(crate) fn metadata_mut(&mut self) -> &mut ModelMetadata {
        match self {
            TrainedModel::AdaCbm(m) => &mut m.metadata,
            TrainedModel::LinearProbe(m) => &mut m.metadata,
            TrainedModel::LaboHead(m) => &mut m.metadata,
        }
    }
}
