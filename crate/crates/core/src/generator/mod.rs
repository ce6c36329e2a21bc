//! Image-to-sketch generator and its multi-condition training objective.

mod adversarial;
mod losses;
mod network;
mod train;

pub use adversarial::Discriminator;
pub use losses::{
    loss_mop, loss_sfp, loss_socp, total_loss, LossBreakdown, LossWeights, PairTargets, TrainingPair, DEFAULT_SOCP_RESOLUTION, PCA_COMPONENTS,
    SOCP_STROKE_WIDTH,
};
pub use network::{generate, GeneratorConfig, GeneratorParams, MAX_BLOCKS};
pub use train::{loss_gradients, train_generator, EpochLog, GeneratorTrainConfig, GeneratorTrainReport};

use crate::backends::BackendError;
use crate::layout::LayoutError;
use crate::sketch::SketchError;

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error("generator needs a square input with a side divisible by 4 (at least 8), got {width}×{height}")]
    ResolutionMismatch { width: usize, height: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("could not write {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}
