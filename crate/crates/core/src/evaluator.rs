//! Accuracy, confusion matrices, inhibition ablations and model comparisons.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding_io::Dataset;
use crate::error::{Error, Result};
use crate::linalg::argmax;
use crate::model::{AdaCbmModel, ModelKind, Quantity, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    /// 0 for classes without samples.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub n_samples: usize,
}

impl EvalReport {
    /// Builds the report from `(label, predicted)` pairs.
    pub fn from_predictions(n_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        let mut n_samples = 0;
        for (label, pred) in pairs {
            confusion[label][pred] += 1;
            n_samples += 1;
        }
        let trace: usize = (0..n_classes).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[i] as f64 / total as f64
                }
            })
            .collect();
        Self {
            overall_accuracy: if n_samples == 0 {
                0.0
            } else {
                trace as f64 / n_samples as f64
            },
            per_class_accuracy,
            confusion,
            n_samples,
        }
    }

    /// Confusion matrix as CSV with a `true\predicted` header row.
    pub fn confusion_csv(&self) -> String {
        let n = self.confusion.len();
        let mut out = String::from("true\\predicted");
        for i in 0..n {
            out.push_str(&format!(",{i}"));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&i.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

fn check_compat(dim: usize, n_classes: usize, dataset: &Dataset) -> Result<()> {
    if dataset.dims() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: dataset.dims(),
        });
    }
    if dataset.n_classes() > n_classes {
        return Err(Error::LengthMismatch {
            what: "dataset classes vs model classes",
            left: dataset.n_classes(),
            right: n_classes,
        });
    }
    Ok(())
}

fn evaluate_with(
    n_classes: usize,
    dataset: &Dataset,
    logits: impl Fn(&[f64]) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let pairs = (0..dataset.len())
        .map(|i| Ok((dataset.label(i), argmax(&logits(dataset.x(i))?))))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_predictions(n_classes, pairs))
}

/// Argmax accuracy; ties go to the lowest class index.
pub fn evaluate(model: &TrainedModel, dataset: &Dataset) -> Result<EvalReport> {
    check_compat(model.dim(), model.n_classes(), dataset)?;
    evaluate_with(model.n_classes(), dataset, |x| model.forward_logits(x))
}

pub fn evaluate_inhibited(
    model: &AdaCbmModel,
    dataset: &Dataset,
    quantity: Quantity,
) -> Result<EvalReport> {
    check_compat(model.dim(), model.n_classes(), dataset)?;
    evaluate_with(model.n_classes(), dataset, |x| model.inhibit(x, quantity))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InhibitionReport {
    pub baseline: f64,
    pub image_norm: f64,
    pub text_norm: f64,
    pub cosine: f64,
}

impl InhibitionReport {
    pub fn accuracy(&self, quantity: Quantity) -> f64 {
        match quantity {
            Quantity::ImageNorm => self.image_norm,
            Quantity::TextNorm => self.text_norm,
            Quantity::Cosine => self.cosine,
        }
    }

    /// Accuracy lost relative to the baseline.
    pub fn drop(&self, quantity: Quantity) -> f64 {
        self.baseline - self.accuracy(quantity)
    }
}

pub fn inhibition_report(model: &AdaCbmModel, dataset: &Dataset) -> Result<InhibitionReport> {
    let baseline = evaluate(&TrainedModel::AdaCbm(model.clone()), dataset)?.overall_accuracy;
    let acc = |q| evaluate_inhibited(model, dataset, q).map(|r| r.overall_accuracy);
    Ok(InhibitionReport {
        baseline,
        image_norm: acc(Quantity::ImageNorm)?,
        text_norm: acc(Quantity::TextNorm)?,
        cosine: acc(Quantity::Cosine)?,
    })
}

/// Evaluates every model; rows are ordered by model kind, keeping input order
/// within a kind.
pub fn compare(models: &[&TrainedModel], dataset: &Dataset) -> Result<Vec<(ModelKind, EvalReport)>> {
    let mut rows = models
        .iter()
        .map(|m| Ok((m.kind(), evaluate(m, dataset)?)))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|(k, _)| *k);
    Ok(rows)
}

/// Overall accuracy keyed by model kind name; later duplicates overwrite.
pub fn comparison_table(rows: &[(ModelKind, EvalReport)]) -> BTreeMap<String, f64> {
    rows.iter()
        .map(|(k, r)| (k.to_string(), r.overall_accuracy))
        .collect()
}
