//! Sketch captioning: graph encoder, learned query attention, and a small
//! causal decoder over a closed vocabulary.

mod model;
mod train;
mod vocab;

pub use model::{
    caption_loss, decode_caption, encode_queries, CaptionModel, CaptionerConfig, CaptionerParams, DecoderParams, QueryModule, SketchEncoder,
};
pub use train::{load_annotations, token_accuracy, train_captioner, CaptionExample, CaptionTrainConfig, CaptionTrainReport, Stage};
pub use vocab::{tokenize, Caption, Vocabulary, BOS, EOS, MAX_WORDS, PAD};

use crate::graph::GraphError;
use crate::sketch::SketchError;

#[derive(Debug, thiserror::Error)]
pub enum CaptionError {
    #[error("word {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}
