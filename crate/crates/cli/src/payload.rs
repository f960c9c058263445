//! JSON shapes shared by `explain` and the HTTP service.

use adacbm_core::linalg::argmax;
use adacbm_core::{AdaCbmModel, Interpretation, TermRecord};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One `(concept, class)` summand as sent over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermPayload {
    pub concept_id: String,
    pub concept_index: usize,
    pub text: String,
    pub class: usize,
    pub weight: f64,
    pub dot: f64,
    pub cosine: f64,
    pub image_norm: f64,
    pub text_norm: f64,
    pub shift: f64,
    pub contribution: f64,
}

impl TermPayload {
    fn new(model: &AdaCbmModel, t: &TermRecord) -> Self {
        Self {
            concept_id: t.concept_id.clone(),
            concept_index: t.concept_index,
            text: model.concepts().texts()[t.concept_index].clone(),
            class: t.class_index,
            weight: t.weight,
            dot: t.dot,
            cosine: t.cosine,
            image_norm: t.image_norm,
            text_norm: t.text_norm,
            shift: t.shift,
            contribution: t.contribution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPayload {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub predicted_class: usize,
    /// Per-class bias; a logit is its class's contributions plus this.
    pub beta: Vec<f64>,
    /// Unmasked terms grouped by class, then by concept index.
    pub interpretation: Vec<TermPayload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_logits: Option<Vec<f64>>,
}

impl PredictionPayload {
    /// Terms of `class` ordered the way `top_contributors` orders them.
    pub fn top(&self, class: usize, top_k: usize) -> Vec<&TermPayload> {
        let mut terms: Vec<&TermPayload> = self.interpretation.iter().filter(|t| t.class == class).collect();
        terms.sort_by(|a, b| {
            b.contribution
                .total_cmp(&a.contribution)
                .then(a.concept_index.cmp(&b.concept_index))
        });
        terms.truncate(top_k);
        terms
    }
}

fn terms(model: &AdaCbmModel, interp: &Interpretation, keep: impl Fn(&TermRecord) -> bool) -> Vec<TermPayload> {
    interp
        .terms
        .iter()
        .filter(|t| keep(t))
        .map(|t| TermPayload::new(model, t))
        .collect()
}

pub fn predict(model: &AdaCbmModel, x: &[f64]) -> adacbm_core::Result<PredictionPayload> {
    let interp = model.decompose(x)?;
    Ok(PredictionPayload {
        predicted_class: argmax(&interp.logits),
        beta: interp.beta.clone(),
        interpretation: terms(model, &interp, |_| true),
        logits: interp.logits,
        probs: interp.probabilities,
        delta_logits: None,
    })
}

/// Prediction with the excluded concepts' terms dropped from every class.
pub fn intervene<S: AsRef<str>>(
    model: &AdaCbmModel,
    x: &[f64],
    excluded: &[S],
) -> adacbm_core::Result<PredictionPayload> {
    let interp = model.decompose(x)?;
    let after = model.intervene(x, excluded)?;
    let dropped = |t: &TermRecord| excluded.iter().any(|e| e.as_ref() == t.concept_id);
    let delta = after.logits.iter().zip(&interp.logits).map(|(a, b)| a - b).collect();
    Ok(PredictionPayload {
        predicted_class: argmax(&after.logits),
        beta: interp.beta.clone(),
        interpretation: terms(model, &interp, |t| !dropped(t)),
        logits: after.logits,
        probs: after.probabilities,
        delta_logits: Some(delta),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptRef {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassConcepts {
    pub class: usize,
    pub name: String,
    pub concepts: Vec<ConceptRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub classes: Vec<String>,
    pub d: usize,
    /// Concepts in the bottleneck.
    #[serde(rename = "K")]
    pub n_concepts: usize,
    /// Concepts per class.
    pub k: usize,
    pub adapter_layers: usize,
    pub per_class: Vec<ClassConcepts>,
    pub config: Value,
}

pub fn model_summary(model: &AdaCbmModel) -> ModelSummary {
    let bank = model.concepts();
    let meta = model.metadata();
    let per_class: Vec<ClassConcepts> = meta
        .class_names
        .iter()
        .enumerate()
        .map(|(i, name)| ClassConcepts {
            class: i,
            name: name.clone(),
            concepts: (0..bank.len())
                .filter(|&j| bank.mask().get(j, i))
                .map(|j| ConceptRef {
                    id: bank.ids()[j].clone(),
                    text: bank.texts()[j].clone(),
                })
                .collect(),
        })
        .collect();
    let k = match &meta.selection {
        Some(s) => s.k,
        None => per_class.iter().map(|c| c.concepts.len()).max().unwrap_or(0),
    };
    ModelSummary {
        classes: meta.class_names.clone(),
        d: model.dim(),
        n_concepts: bank.len(),
        k,
        adapter_layers: model.adapter().layers().len(),
        per_class,
        config: serde_json::json!({
            "selection": meta.selection,
            "train": meta.train_config,
        }),
    }
}
