//! Adaptive concept bottleneck models over precomputed embeddings.
//!
//! The pipeline is: read embeddings ([`embedding_io`]), pick concepts per class
//! by utility ([`selection`]), train the masked bottleneck with its input
//! adapter ([`trainer`]), then evaluate ([`evaluator`]) and explain or
//! intervene on individual predictions ([`model`]).

pub mod checkpoint;
pub mod embedding_io;
pub mod error;
pub mod evaluator;
pub mod linalg;
pub mod model;
pub mod selection;
pub mod synthetic;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use embedding_io::{
    pair_dataset, read_concept_metadata, read_embedding_matrix, read_image_metadata,
    write_embedding_matrix, ConceptCategory, ConceptRecord, Dataset, EmbeddingMatrix, ImageRecord,
};
pub use error::{Error, Result};
pub use evaluator::{compare, evaluate, inhibition_report, EvalReport, InhibitionReport};
pub use linalg::Matrix;
pub use model::{
    leaky_relu, top_contributors, AdaCbmModel, Adapter, CbmHead, ConceptBank, Interpretation,
    LaboHead, LinearProbe, ModelKind, ModelMetadata, Prediction, Quantity, TermRecord,
    TrainedModel,
};
pub use selection::{
    concept_responses, pearson_r, select_concepts, utility_tstat, DenominatorMode, Mask,
    SelectionConfig, SelectionResult, UtilityScore,
};
pub use trainer::{
    backward, cross_entropy_loss, lr_at, sgd_step, train, EpochLog, GradientSet, TrainConfig,
    TrainOutcome,
};
