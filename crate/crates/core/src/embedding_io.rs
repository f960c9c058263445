//! Embedding matrices on disk and the JSON-lines metadata that labels them.
//!
//! Binary layout (all little-endian, no padding):
//!
//! | offset | size           | field                         |
//! |--------|----------------|-------------------------------|
//! | 0      | 4              | magic `AEMB`                  |
//! | 4      | 4              | format version, `u32` (= 1)   |
//! | 8      | 8              | rows, `u64`                   |
//! | 16     | 8              | dims, `u64`                   |
//! | 24     | 4 * rows * dims| `f32` payload, row-major      |
//!
//! Values are stored as given; nothing is normalized on the way in or out.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: [u8; 4] = *b"AEMB";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Row-major `f32` matrix of image or concept-text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Builds a matrix, checking the length and that every value is finite.
    /// Empty matrices are representable but cannot be written.
    pub fn new(rows: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(dims) != Some(data.len()) {
            return Err(Error::ShapeMismatch {
                rows,
                dims,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                index,
                offset: (HEADER_LEN + 4 * index) as u64,
            });
        }
        Ok(Self { rows, dims, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dims);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    actual: rows[i].len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dims, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Widened copy used for all internal arithmetic.
    pub fn to_f64(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.dims,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::new(indices.len(), self.dims, data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.rows == 0 || self.dims == 0 {
            return Err(Error::EmptyMatrix {
                rows: self.rows,
                dims: self.dims,
            });
        }
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dims as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(Error::TruncatedFile {
                expected: HEADER_LEN as u64,
                actual,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: MAGIC,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedFile {
                expected: HEADER_LEN as u64,
                actual,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { version });
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let dims = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
        if rows == 0 || dims == 0 {
            return Err(Error::EmptyMatrix {
                rows: rows as usize,
                dims: dims as usize,
            });
        }
        let expected = rows
            .checked_mul(dims)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN as u64))
            .ok_or(Error::TruncatedFile {
                expected: u64::MAX,
                actual,
            })?;
        if actual < expected {
            return Err(Error::TruncatedFile { expected, actual });
        }
        if actual > expected {
            return Err(Error::TrailingData { expected, actual });
        }
        let data: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(rows as usize, dims as usize, data)
    }
}

pub fn write_embedding_matrix(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = matrix.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub label: usize,
}

/// Visual attribute family a concept was generated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptCategory {
    Color,
    Shape,
    Size,
    Texture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_tag: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<ConceptCategory>,
}

#[derive(Deserialize)]
struct RawImageRecord {
    id: String,
    label: i64,
}

#[derive(Deserialize)]
struct RawConceptRecord {
    id: String,
    text: String,
    #[serde(default)]
    class_tag: Option<i64>,
    #[serde(default)]
    category: Option<ConceptCategory>,
}

fn parse_lines<R, T>(
    text: &str,
    mut convert: impl FnMut(R, usize) -> Result<T>,
    id_of: impl Fn(&T) -> &str,
) -> Result<Vec<T>>
where
    R: for<'de> Deserialize<'de>,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: R = serde_json::from_str(line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let rec = convert(raw, line_no)?;
        if !seen.insert(id_of(&rec).to_owned()) {
            return Err(Error::DuplicateId {
                id: id_of(&rec).to_owned(),
                line: line_no,
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn parse_image_metadata(text: &str) -> Result<Vec<ImageRecord>> {
    parse_lines(
        text,
        |raw: RawImageRecord, line| {
            if raw.label < 0 {
                return Err(Error::NegativeLabel {
                    label: raw.label,
                    line,
                });
            }
            Ok(ImageRecord {
                id: raw.id,
                label: raw.label as usize,
            })
        },
        |r| &r.id,
    )
}

pub fn parse_concept_metadata(text: &str) -> Result<Vec<ConceptRecord>> {
    parse_lines(
        text,
        |raw: RawConceptRecord, line| {
            let class_tag = match raw.class_tag {
                Some(t) if t < 0 => return Err(Error::NegativeLabel { label: t, line }),
                Some(t) => Some(t as usize),
                None => None,
            };
            Ok(ConceptRecord {
                id: raw.id,
                text: raw.text,
                class_tag,
                category: raw.category,
            })
        },
        |r| &r.id,
    )
}

pub fn read_image_metadata(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_image_metadata(&text)
}

pub fn read_concept_metadata(path: impl AsRef<Path>) -> Result<Vec<ConceptRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_concept_metadata(&text)
}

fn to_json_lines<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_image_metadata(records: &[ImageRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json_lines(records)?).map_err(|e| Error::io(path, e))
}

pub fn write_concept_metadata(records: &[ConceptRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json_lines(records)?).map_err(|e| Error::io(path, e))
}

/// Image embeddings paired with their labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    embeddings: EmbeddingMatrix,
    records: Vec<ImageRecord>,
    n_classes: usize,
    features: Matrix,
}

impl Dataset {
    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.embeddings.dims()
    }

    /// Embedding of sample `i`, widened to `f64`.
    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> usize {
        self.records[i].label
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Errors with `MissingClass` if some class has no samples.
    pub fn require_all_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(class) => Err(Error::MissingClass { class }),
            None => Ok(()),
        }
    }

    pub fn position_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }
}

pub fn pair_dataset(
    matrix: EmbeddingMatrix,
    records: Vec<ImageRecord>,
    n_classes: usize,
) -> Result<Dataset> {
    if matrix.rows() != records.len() {
        return Err(Error::LengthMismatch {
            what: "embedding rows vs metadata records",
            left: matrix.rows(),
            right: records.len(),
        });
    }
    if let Some((index, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.label >= n_classes)
    {
        return Err(Error::LabelOutOfRange {
            label: r.label,
            n_classes,
            index,
        });
    }
    let features = matrix.to_f64();
    Ok(Dataset {
        embeddings: matrix,
        records,
        n_classes,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row_layout() {
        let m = EmbeddingMatrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        let bytes = m.to_bytes().unwrap();
        assert_eq!(bytes.len(), 32);
        assert_eq!(&bytes[0..4], b"AEMB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..28], &0.0f32.to_le_bytes());
        assert_eq!(&bytes[28..32], &1.0f32.to_le_bytes());
    }

    #[test]
    fn empty_matrix_rejected() {
        let m = EmbeddingMatrix::new(0, 4, vec![]).unwrap();
        assert!(matches!(m.to_bytes(), Err(Error::EmptyMatrix { .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.aemb");
        assert!(write_embedding_matrix(&m, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn non_finite_rejected_before_writing() {
        let err = EmbeddingMatrix::new(1, 3, vec![0.0, f32::NAN, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { index: 1, offset: 28 }));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = EmbeddingMatrix::new(1, 1, vec![2.0]).unwrap().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes),
            Err(Error::BadMagic { found, .. }) if &found == b"XEMB"
        ));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = EmbeddingMatrix::new(1, 1, vec![2.0]).unwrap().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes),
            Err(Error::UnsupportedVersion { version: 7 })
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = EmbeddingMatrix::new(2, 3, vec![1.0; 6]).unwrap().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 5];
        match EmbeddingMatrix::from_bytes(cut) {
            Err(Error::TruncatedFile { expected, actual }) => {
                assert_eq!(expected, 48);
                assert_eq!(actual, 43);
            }
            other => panic!("expected TruncatedFile, got {other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&long),
            Err(Error::TrailingData { .. })
        ));
    }

    #[test]
    fn nan_in_payload_names_cell() {
        let mut bytes = EmbeddingMatrix::new(2, 2, vec![1.0; 4]).unwrap().to_bytes().unwrap();
        bytes[24 + 8..24 + 12].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            EmbeddingMatrix::from_bytes(&bytes),
            Err(Error::NonFiniteValue { index: 2, offset: 32 })
        ));
    }

    #[test]
    fn concept_line_parses() {
        let line = r#"{"id":"c1","text":"round regular border","class_tag":0,"category":"shape"}"#;
        let recs = parse_concept_metadata(line).unwrap();
        assert_eq!(
            recs,
            vec![ConceptRecord {
                id: "c1".into(),
                text: "round regular border".into(),
                class_tag: Some(0),
                category: Some(ConceptCategory::Shape),
            }]
        );
    }

    #[test]
    fn duplicate_id_named() {
        let text = "{\"id\":\"a\",\"label\":0}\n{\"id\":\"a\",\"label\":1}\n";
        match parse_image_metadata(text) {
            Err(Error::DuplicateId { id, line }) => {
                assert_eq!(id, "a");
                assert_eq!(line, 2);
            }
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn malformed_and_negative_lines() {
        let text = "{\"id\":\"a\",\"label\":0}\n{not json}\n";
        assert!(matches!(
            parse_image_metadata(text),
            Err(Error::MalformedLine { line: 2, .. })
        ));
        let text = "{\"id\":\"a\",\"label\":-1}\n";
        assert!(matches!(
            parse_image_metadata(text),
            Err(Error::NegativeLabel { label: -1, line: 1 })
        ));
        let text = "{\"id\":\"a\",\"label\":0,\"extra\":[1,2]}\n";
        assert_eq!(parse_image_metadata(text).unwrap().len(), 1);
    }

    fn recs(labels: &[usize]) -> Vec<ImageRecord> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| ImageRecord {
                id: format!("img{i}"),
                label,
            })
            .collect()
    }

    #[test]
    fn pairing_rules() {
        let m3 = EmbeddingMatrix::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            pair_dataset(m3.clone(), recs(&[0, 1]), 3),
            Err(Error::LengthMismatch { .. })
        ));
        let ds = pair_dataset(m3, recs(&[0, 1, 2]), 3).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.class_counts(), vec![1, 1, 1]);
        let m2 = EmbeddingMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            pair_dataset(m2, recs(&[0, 3]), 3),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }
}
