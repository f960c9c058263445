//! Concept utility selection.
//!
//! Each candidate concept is scored per class by a two-sample t-statistic over
//! its raw dot-product responses on the training images (target class against
//! everything else). Concepts are then taken greedily in utility order, skipping
//! any whose response pattern correlates with an already accepted concept at
//! `|r| >= gamma`.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding_io::{ConceptRecord, Dataset, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::linalg::dot;

/// Denominator of the utility t-statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorMode {
    /// `sqrt(var_c / n_c) + sqrt(var_o / n_o)`
    #[default]
    Paper,
    /// `sqrt(var_c / n_c + var_o / n_o)`
    Welch,
}

impl fmt::Display for DenominatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DenominatorMode::Paper => "paper",
            DenominatorMode::Welch => "welch",
        })
    }
}

impl FromStr for DenominatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(DenominatorMode::Paper),
            "welch" => Ok(DenominatorMode::Welch),
            other => Err(Error::InvalidConfig(format!(
                "unknown t-statistic mode {other:?} (expected paper or welch)"
            ))),
        }
    }
}

/// Group statistics and t-value of one concept against one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityScore {
    pub class_index: usize,
    pub t_value: f64,
    pub mu_c: f64,
    pub mu_not_c: f64,
    pub n_c: usize,
    pub n_not_c: usize,
    pub var_c: f64,
    pub var_not_c: f64,
    /// Set when the denominator was zero and `t_value` was forced to 0.
    #[serde(default)]
    pub degenerate: bool,
}

/// Raw dot product of every image embedding with `concept`.
pub fn concept_responses(dataset: &Dataset, concept: &[f64]) -> Result<Vec<f64>> {
    if concept.len() != dataset.dims() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dims(),
            actual: concept.len(),
        });
    }
    Ok((0..dataset.len()).map(|i| dot(dataset.x(i), concept)).collect())
}

fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

pub fn utility_tstat(
    responses: &[f64],
    labels: &[usize],
    target_class: usize,
    mode: DenominatorMode,
) -> Result<UtilityScore> {
    if responses.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "responses vs labels",
            left: responses.len(),
            right: labels.len(),
        });
    }
    let group = |inside: bool| -> Vec<f64> {
        responses
            .iter()
            .zip(labels)
            .filter(|&(_, &l)| (l == target_class) == inside)
            .map(|(&r, _)| r)
            .collect()
    };
    let (inside, outside) = (group(true), group(false));
    if inside.len() < 2 {
        return Err(Error::GroupTooSmall {
            group: "in-class",
            count: inside.len(),
        });
    }
    if outside.len() < 2 {
        return Err(Error::GroupTooSmall {
            group: "out-of-class",
            count: outside.len(),
        });
    }
    let (mu_c, var_c) = mean_and_variance(&inside);
    let (mu_not_c, var_not_c) = mean_and_variance(&outside);
    let se_c = var_c / inside.len() as f64;
    let se_o = var_not_c / outside.len() as f64;
    let denom = match mode {
        DenominatorMode::Paper => se_c.sqrt() + se_o.sqrt(),
        DenominatorMode::Welch => (se_c + se_o).sqrt(),
    };
    let degenerate = !(denom > 0.0);
    let t_value = if degenerate {
        0.0
    } else {
        (mu_c - mu_not_c) / denom
    };
    Ok(UtilityScore {
        class_index: target_class,
        t_value,
        mu_c,
        mu_not_c,
        n_c: inside.len(),
        n_not_c: outside.len(),
        var_c,
        var_not_c,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    /// One of the inputs had zero variance; `r` is reported as 0.
    pub degenerate: bool,
}

/// Sample Pearson correlation, clamped to `[-1, 1]`.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "pearson inputs",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::GroupTooSmall {
            group: "pearson input",
            count: a.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(Correlation {
            r: 0.0,
            degenerate: true,
        });
    }
    let r = sab / (saa * sbb).sqrt();
    Ok(Correlation {
        r: r.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k: usize,
    pub gamma: f64,
    pub mode: DenominatorMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k: 10,
            gamma: 0.9,
            mode: DenominatorMode::Paper,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedConcept {
    pub concept_id: String,
    /// Row of the candidate pool this concept came from.
    pub concept_index: usize,
    /// 1-based position within the class's selection.
    pub rank: usize,
    #[serde(flatten)]
    pub score: UtilityScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class: usize,
    pub selected: Vec<SelectedConcept>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub k: usize,
    pub gamma: f64,
    pub mode: DenominatorMode,
    pub classes: Vec<ClassSelection>,
    /// Concept id for each mask row, ordered by ascending pool index.
    pub concept_order: Vec<String>,
    pub warnings: Vec<String>,
}

impl SelectionResult {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Binary class-concept mask over `concept_order`.
    pub fn mask(&self) -> Mask {
        let mut mask = Mask::zeros(self.concept_order.len(), self.classes.len());
        for cls in &self.classes {
            for sel in &cls.selected {
                let j = self
                    .concept_order
                    .iter()
                    .position(|id| *id == sel.concept_id)
                    .expect("selected concept missing from concept_order");
                mask.set(j, cls.class, true);
            }
        }
        mask
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sel: SelectionResult = serde_json::from_str(text)?;
        for (i, cls) in sel.classes.iter().enumerate() {
            if cls.class != i {
                return Err(Error::InvalidConfig(format!(
                    "selection classes out of order: entry {i} is class {}",
                    cls.class
                )));
            }
            for s in &cls.selected {
                if !sel.concept_order.contains(&s.concept_id) {
                    return Err(Error::UnknownConcept(s.concept_id.clone()));
                }
            }
        }
        Ok(sel)
    }
}

/// Frozen binary `K x n` class-concept mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows.len(), cols);
        for (j, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), cols, "ragged mask");
            for (i, &b) in r.iter().enumerate() {
                m.set(j, i, b);
            }
        }
        m
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    /// Number of concepts `K`.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of classes `n`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, concept: usize, class: usize) -> bool {
        self.bits[concept * self.cols + class]
    }

    fn set(&mut self, concept: usize, class: usize, on: bool) {
        self.bits[concept * self.cols + class] = on;
    }

    pub fn column_count(&self, class: usize) -> usize {
        (0..self.rows).filter(|&j| self.get(j, class)).count()
    }

    pub fn concepts_for(&self, class: usize) -> Vec<usize> {
        (0..self.rows).filter(|&j| self.get(j, class)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.rows)
            .map(|j| (0..self.cols).map(|i| u8::from(self.get(j, i))).collect())
            .collect()
    }

    pub fn from_u8_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let bools: Vec<Vec<bool>> = rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(Error::InvalidCheckpoint(format!(
                            "mask entry {other} is not binary"
                        ))),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        if bools.iter().any(|r| r.len() != bools[0].len()) {
            return Err(Error::InvalidCheckpoint("ragged mask".into()));
        }
        Ok(Self::from_rows(&bools))
    }
}

fn by_utility_desc(a: &(usize, UtilityScore), b: &(usize, UtilityScore)) -> Ordering {
    b.1.t_value.total_cmp(&a.1.t_value).then(a.0.cmp(&b.0))
}

/// Picks `k` concepts per class from the candidate pool.
///
/// A concept carrying a `class_tag` is a candidate only for that class;
/// untagged concepts are candidates for every class. The same concept may be
/// picked by several classes.
pub fn select_concepts(
    dataset: &Dataset,
    concepts: &EmbeddingMatrix,
    records: &[ConceptRecord],
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    config.validate()?;
    if concepts.rows() != records.len() {
        return Err(Error::LengthMismatch {
            what: "concept embeddings vs concept records",
            left: concepts.rows(),
            right: records.len(),
        });
    }
    if concepts.dims() != dataset.dims() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dims(),
            actual: concepts.dims(),
        });
    }
    let n_classes = dataset.n_classes();
    if let Some(r) = records
        .iter()
        .find(|r| r.class_tag.is_some_and(|t| t >= n_classes))
    {
        return Err(Error::LabelOutOfRange {
            label: r.class_tag.unwrap_or_default(),
            n_classes,
            index: records.iter().position(|x| x.id == r.id).unwrap_or(0),
        });
    }

    let labels = dataset.labels();
    let responses: Vec<Vec<f64>> = (0..concepts.rows())
        .map(|j| concept_responses(dataset, &concepts.row_f64(j)))
        .collect::<Result<_>>()?;

    let mut classes = Vec::with_capacity(n_classes);
    let mut warnings = Vec::new();
    for class in 0..n_classes {
        let pool: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.class_tag.is_none_or(|t| t == class))
            .map(|(j, _)| j)
            .collect();
        if pool.len() < config.k {
            return Err(Error::NotEnoughCandidates {
                class,
                available: pool.len(),
                k: config.k,
            });
        }
        let mut ranked: Vec<(usize, UtilityScore)> = pool
            .iter()
            .map(|&j| Ok((j, utility_tstat(&responses[j], &labels, class, config.mode)?)))
            .collect::<Result<_>>()?;
        ranked.sort_by(by_utility_desc);

        let mut accepted: Vec<(usize, UtilityScore)> = Vec::with_capacity(config.k);
        let mut rejected = Vec::new();
        for cand in &ranked {
            if accepted.len() == config.k {
                break;
            }
            let mut max_r: f64 = 0.0;
            for (a, _) in &accepted {
                max_r = max_r.max(pearson_r(&responses[cand.0], &responses[*a])?.r.abs());
            }
            if max_r < config.gamma {
                accepted.push(*cand);
            } else {
                rejected.push(*cand);
            }
        }
        if accepted.len() < config.k {
            let missing = config.k - accepted.len();
            warnings.push(format!(
                "class {class}: only {} concepts pass gamma = {}; filled {missing} by utility",
                accepted.len(),
                config.gamma
            ));
            accepted.extend(rejected.iter().take(missing));
        }
        let selected = accepted
            .into_iter()
            .enumerate()
            .map(|(pos, (j, score))| SelectedConcept {
                concept_id: records[j].id.clone(),
                concept_index: j,
                rank: pos + 1,
                score,
            })
            .collect();
        classes.push(ClassSelection { class, selected });
    }

    let mut used: Vec<usize> = classes
        .iter()
        .flat_map(|c| c.selected.iter().map(|s| s.concept_index))
        .collect();
    used.sort_unstable();
    used.dedup();
    let concept_order = used.into_iter().map(|j| records[j].id.clone()).collect();

    Ok(SelectionResult {
        k: config.k,
        gamma: config.gamma,
        mode: config.mode,
        classes,
        concept_order,
        warnings,
    })
}
