//! End-to-end triplet generation: object caption, scene text, layout,
//! scene image and scene sketch for every sketch × corpus caption pair,
//! persisted with a JSONL manifest.

mod config;
mod eval;
mod manifest;
mod run;

use std::path::Path;

pub use config::{AblationFlags, BackendSection, CaptionSource, CaptionerSection, GeneratorSection, PipelineConfig};
pub use eval::{evaluate_manifest, DEFAULT_SPLITS};
pub use manifest::{
    record_id, validate_manifest, BackendNames, Manifest, ManifestHeader, PairFailure, TripletRecord, ValidationReport, Violation, ViolationKind,
    IMAGE_DIR, MANIFEST_FILE, SCENE_SKETCH_DIR, SKETCH_DIR,
};
pub use run::{
    captioner_checkpoint_path, generator_checkpoint_path, run_pipeline, run_pipeline_with, train_captioner_from_config, train_generator_from_config,
    CaptionerRun, GeneratorRun, PipelineBackends, PipelineOutcome, CHECKPOINT_DIR, GENERATOR_LOG,
};

use crate::backends::BackendError;
use crate::captioner::CaptionError;
use crate::checkpoint::CheckpointError;
use crate::expansion::ExpansionError;
use crate::generator::GeneratorError;
use crate::metrics::MetricsError;
use crate::sketch::SketchError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Sketch(#[from] SketchError),
    #[error(transparent)]
    Expansion(#[from] ExpansionError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), message: e.to_string() }
    }

    /// Configuration problems are the caller's to fix; everything else is a
    /// runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}
