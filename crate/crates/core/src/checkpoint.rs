//! Checkpoint files: `ACBM` magic, `u32` version, `u64` header length, a JSON
//! header, then a little-endian `f32` parameter blob.
//!
//! Blob order for `adacbm`: adapter weights (layer by layer, row-major),
//! adapter biases, `V` (`K x n`, row-major), `alpha`, `beta`, then the frozen
//! concept embeddings (`K x d`). `linear_probe` stores `W` (`n x d`) and the
//! bias; `labo_head` stores `W` (`K x n`), the bias, and the concept embeddings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    AdaCbmModel, Adapter, CbmHead, ConceptBank, LaboHead, LinearLayer, LinearProbe, ModelKind,
    ModelMetadata, TrainedModel,
};
use crate::selection::{Mask, SelectionResult};
use crate::trainer::{flat_params, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ACBM";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub d: usize,
    #[serde(rename = "K")]
    pub n_concepts: usize,
    pub n: usize,
    pub layer_count: usize,
    pub negative_slope: f64,
    pub concept_ids: Vec<String>,
    pub concept_texts: Vec<String>,
    pub class_names: Vec<String>,
    /// `K x n` binary mask, empty for the linear probe.
    pub mask: Vec<Vec<u8>>,
    pub selection: Option<crate::model::SelectionSummary>,
    pub train_config: Option<TrainConfig>,
    /// Number of `f32` values that follow the header.
    pub blob_len: usize,
}

impl CheckpointHeader {
    fn expected_blob_len(&self) -> usize {
        let (d, k, n, l) = (self.d, self.n_concepts, self.n, self.layer_count);
        match self.model_kind {
            ModelKind::AdaCbm => l * d * d + l * d + k * n + k + n + k * d,
            ModelKind::LinearProbe => n * d + n,
            ModelKind::LaboHead => k * n + n + k * d,
        }
    }
}

fn bank_of(model: &TrainedModel) -> Option<&ConceptBank> {
    match model {
        TrainedModel::AdaCbm(m) => Some(m.concepts()),
        TrainedModel::LaboHead(m) => Some(m.concepts()),
        TrainedModel::LinearProbe(_) => None,
    }
}

pub fn header_for(model: &TrainedModel) -> CheckpointHeader {
    let meta = model.metadata();
    let bank = bank_of(model);
    let (layer_count, negative_slope) = match model {
        TrainedModel::AdaCbm(m) => (m.adapter().layers().len(), m.adapter().negative_slope()),
        _ => (0, crate::model::DEFAULT_NEGATIVE_SLOPE),
    };
    let mut header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        model_kind: model.kind(),
        d: model.dim(),
        n_concepts: bank.map_or(0, ConceptBank::len),
        n: model.n_classes(),
        layer_count,
        negative_slope,
        concept_ids: bank.map(|b| b.ids().to_vec()).unwrap_or_default(),
        concept_texts: bank.map(|b| b.texts().to_vec()).unwrap_or_default(),
        class_names: meta.class_names.clone(),
        mask: bank.map(|b| b.mask().to_rows()).unwrap_or_default(),
        selection: meta.selection.clone(),
        train_config: meta.train_config.clone(),
        blob_len: 0,
    };
    header.blob_len = header.expected_blob_len();
    header
}

fn blob_values(model: &TrainedModel) -> Vec<f64> {
    let mut values = flat_params(model);
    if let Some(bank) = bank_of(model) {
        values.extend_from_slice(bank.embeddings().as_slice());
    }
    values
}

pub fn checkpoint_to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = header_for(model);
    let values = blob_values(model);
    debug_assert_eq!(values.len(), header.blob_len);
    if let Some(i) = values.iter().position(|v| !(*v as f32).is_finite()) {
        return Err(Error::InvalidCheckpoint(format!(
            "parameter {i} is not representable as a finite f32"
        )));
    }
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + 4 * values.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

struct BlobReader<'a> {
    values: &'a [f64],
}

impl BlobReader<'_> {
    fn take(&mut self, n: usize) -> Vec<f64> {
        let (head, tail) = self.values.split_at(n);
        self.values = tail;
        head.to_vec()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, self.take(rows * cols))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile {
            expected: PREAMBLE_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: CHECKPOINT_MAGIC,
        });
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::TruncatedFile {
            expected: PREAMBLE_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion { version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = PREAMBLE_LEN
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::TruncatedFile {
            expected: (PREAMBLE_LEN + header_len) as u64,
            actual: bytes.len() as u64,
        })?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])?;
    if header.blob_len != header.expected_blob_len() {
        return Err(Error::InvalidCheckpoint(format!(
            "blob_len {} does not match shapes (expected {})",
            header.blob_len,
            header.expected_blob_len()
        )));
    }
    let expected = (header_end + 4 * header.blob_len) as u64;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::TruncatedFile { expected, actual });
    }
    if actual > expected {
        return Err(Error::TrailingData { expected, actual });
    }
    let values: Vec<f64> = bytes[header_end..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            index,
            offset: (header_end + 4 * index) as u64,
        });
    }
    build_model(&header, &values)
}

fn build_model(h: &CheckpointHeader, values: &[f64]) -> Result<TrainedModel> {
    if h.class_names.len() != h.n {
        return Err(Error::InvalidCheckpoint("class_names length differs from n".into()));
    }
    let metadata = ModelMetadata {
        class_names: h.class_names.clone(),
        selection: h.selection.clone(),
        train_config: h.train_config.clone(),
    };
    let (d, k, n) = (h.d, h.n_concepts, h.n);
    let mut r = BlobReader { values };
    let bank = |r: &mut BlobReader| -> Result<ConceptBank> {
        let mask = Mask::from_u8_rows(&h.mask)?;
        if mask.rows() != k || (k > 0 && mask.cols() != n) {
            return Err(Error::InvalidCheckpoint("mask shape disagrees with K x n".into()));
        }
        ConceptBank::new(h.concept_ids.clone(), h.concept_texts.clone(), r.matrix(k, d), mask)
    };
    Ok(match h.model_kind {
        ModelKind::AdaCbm => {
            let weights: Vec<Matrix> = (0..h.layer_count).map(|_| r.matrix(d, d)).collect();
            let biases: Vec<Vec<f64>> = (0..h.layer_count).map(|_| r.take(d)).collect();
            let layers = weights
                .into_iter()
                .zip(biases)
                .map(|(w, b)| LinearLayer::new(w, b))
                .collect::<Result<_>>()?;
            let adapter = Adapter::new(layers, h.negative_slope)?;
            let v = r.matrix(k, n);
            let alpha = r.take(k);
            let beta = r.take(n);
            let bank = bank(&mut r)?;
            let head = CbmHead::from_parts(v, bank.mask().clone(), alpha, beta)?;
            TrainedModel::AdaCbm(AdaCbmModel::from_parts(adapter, head, bank, metadata)?)
        }
        ModelKind::LinearProbe => {
            let w = r.matrix(n, d);
            let b = r.take(n);
            TrainedModel::LinearProbe(LinearProbe::from_parts(w, b, metadata)?)
        }
        ModelKind::LaboHead => {
            let w = r.matrix(k, n);
            let b = r.take(n);
            let bank = bank(&mut r)?;
            TrainedModel::LaboHead(LaboHead::from_parts(w, b, bank, metadata)?)
        }
    })
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

impl TrainedModel {
    pub fn set_class_names(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.n_classes() {
            return Err(Error::LengthMismatch {
                what: "class names vs model classes",
                left: names.len(),
                right: self.n_classes(),
            });
        }
        self.metadata_mut().class_names = names;
        Ok(())
    }

    pub fn set_selection_summary(&mut self, selection: &SelectionResult) {
        self.metadata_mut().selection = Some(selection.into());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_adacbm() -> TrainedModel {
        let bank = ConceptBank::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["red blotch".into(), "round border".into(), "coarse grain".into()],
            Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.25, 2.0], vec![0.0, 1.0]]),
            Mask::from_rows(&[vec![true, false], vec![false, true], vec![true, true]]),
        )
        .unwrap();
        let mut m = AdaCbmModel::new(bank, ModelMetadata::with_default_names(2), 2).unwrap();
        m.adapter.layers[1].bias = vec![0.125, -0.5];
        m.head.alpha = vec![0.5, -1.0, 0.25];
        m.head.beta = vec![1.5, -2.0];
        TrainedModel::AdaCbm(m)
    }

    #[test]
    fn round_trip_exact_for_f32_values() {
        let model = sample_adacbm();
        let bytes = checkpoint_to_bytes(&model).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(checkpoint_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn header_lists_shapes() {
        let h = header_for(&sample_adacbm());
        assert_eq!((h.d, h.n_concepts, h.n, h.layer_count), (2, 3, 2, 2));
        assert_eq!(h.blob_len, 2 * 4 + 2 * 2 + 6 + 3 + 2 + 6);
        let json = serde_json::to_value(&h).unwrap();
        assert_eq!(json["K"], 3);
        assert_eq!(json["model_kind"], "adacbm");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = checkpoint_to_bytes(&sample_adacbm()).unwrap();
        let cut = bytes[..bytes.len() - 3].to_vec();
        assert!(matches!(checkpoint_from_bytes(&cut), Err(Error::TruncatedFile { .. })));
        bytes[0] = b'Z';
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn linear_probe_round_trip() {
        let m = TrainedModel::LinearProbe(
            LinearProbe::from_parts(
                Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
                vec![0.5, -0.5],
                ModelMetadata::with_default_names(2),
            )
            .unwrap(),
        );
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
