//! Contracts for the pretrained capabilities the pipeline relies on, with
//! seeded offline stand-ins and JSON-over-HTTP adapters.

mod pca;
mod remote;
mod stub;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

pub use pca::{pca_fit, pca_project, PcaProjector};
pub use remote::{RemoteEmbedder, RemoteImageGenerator, RemotePatchExtractor};
pub use stub::{stub_embedder, stub_image_generator, stub_patch_extractor, StubEmbedder, StubImageGenerator, StubPatchExtractor};

use crate::autodiff::{Tape, Var};
use crate::linalg::Matrix;
use crate::remote::RemoteError;
use crate::sketch::{RasterImage, SketchError};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("resolution {found} does not fit: {expected}")]
    ResolutionMismatch { expected: String, found: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("backend {0} has no differentiable path")]
    NotDifferentiable(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown backend {0:?}")]
    Unknown(String),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

/// Maps images and text into one space of unit vectors.
pub trait SemanticEmbedder<T: Scalar>: Send + Sync {
    fn name(&self) -> String;

    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<Vec<T>, BackendError>;

    fn embed_image(&self, image: &RasterImage<T>) -> Result<Vec<T>, BackendError>;

    /// Embedding of a planar `[c, h, w]` image on the tape, shape `[1, d]`.
    fn embed_image_on_tape(&self, _tape: &Tape<T>, _image: Var) -> Result<Var, BackendError> {
        Err(BackendError::NotDifferentiable(self.name()))
    }
}

/// Per-patch feature grid of an image, `g² × d`, patches in row-major
/// order.
pub trait PatchFeatureExtractor<T: Scalar>: Send + Sync {
    fn name(&self) -> String;

    fn grid(&self) -> usize;

    fn dim(&self) -> usize;

    fn extract(&self, image: &RasterImage<T>) -> Result<Matrix<T>, BackendError>;

    /// Features of a planar `[c, h, w]` image on the tape, shape `[g², d]`.
    fn extract_on_tape(&self, _tape: &Tape<T>, _image: Var) -> Result<Var, BackendError> {
        Err(BackendError::NotDifferentiable(self.name()))
    }
}

/// Sketch-and-text conditioned image synthesis.
pub trait ImageGeneratorBackend<T: Scalar>: Send + Sync {
    fn name(&self) -> String;

    /// A 3-channel image at the resolution of `object`.
    fn generate(&self, object: &RasterImage<T>, text: &str, seed: u64) -> Result<RasterImage<T>, BackendError>;
}

/// Wraps a backend and counts how often any of its methods is called.
#[derive(Debug, Default)]
pub struct Counted<B> {
    pub inner: B,
    calls: AtomicUsize,
}

impl<B> Counted<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
    }
}

impl<T: Scalar, B: SemanticEmbedder<T>> SemanticEmbedder<T> for Counted<B> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<T>, BackendError> {
        self.tick();
        self.inner.embed_text(text)
    }

    fn embed_image(&self, image: &RasterImage<T>) -> Result<Vec<T>, BackendError> {
        self.tick();
        self.inner.embed_image(image)
    }

    fn embed_image_on_tape(&self, tape: &Tape<T>, image: Var) -> Result<Var, BackendError> {
        self.tick();
        self.inner.embed_image_on_tape(tape, image)
    }
}

impl<T: Scalar, B: PatchFeatureExtractor<T>> PatchFeatureExtractor<T> for Counted<B> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn grid(&self) -> usize {
        self.inner.grid()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn extract(&self, image: &RasterImage<T>) -> Result<Matrix<T>, BackendError> {
        self.tick();
        self.inner.extract(image)
    }

    fn extract_on_tape(&self, tape: &Tape<T>, image: Var) -> Result<Var, BackendError> {
        self.tick();
        self.inner.extract_on_tape(tape, image)
    }
}

impl<T: Scalar, B: ImageGeneratorBackend<T>> ImageGeneratorBackend<T> for Counted<B> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn generate(&self, object: &RasterImage<T>, text: &str, seed: u64) -> Result<RasterImage<T>, BackendError> {
        self.tick();
        self.inner.generate(object, text, seed)
    }
}

/// The three external capabilities used by training and the pipeline.
#[derive(Clone)]
pub struct Backends<T: Scalar> {
    pub embedder: Arc<dyn SemanticEmbedder<T>>,
    pub patches: Arc<dyn PatchFeatureExtractor<T>>,
    pub images: Arc<dyn ImageGeneratorBackend<T>>,
}

impl<T: Scalar> Backends<T> {
    /// Seeded stubs: embedding width 64, an 8 × 8 patch grid of width 16.
    pub fn stubs(seed: u64) -> Self {
        Self {
            embedder: Arc::new(stub_embedder(seed, 64).expect("valid stub width")),
            patches: Arc::new(stub_patch_extractor(seed, 8, 16).expect("valid stub grid")),
            images: Arc::new(stub_image_generator()),
        }
    }
}

/// Luminance `[h, w]` of a planar `[c, h, w]` tape image.
pub(crate) fn luminance_on_tape<T: Scalar>(tape: &Tape<T>, image: Var) -> Result<(Var, usize, usize), BackendError> {
    let shape = tape.shape(image);
    let (c, h, w) = match shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        [h, w] => (1, *h, *w),
        other => return Err(BackendError::DimensionMismatch(format!("expected a [c, h, w] image, got {other:?}"))),
    };
    if c == 1 {
        return Ok((tape.reshape(image, &[h, w]), h, w));
    }
    let avg = tape.constant(vec![T::one() / T::of_usize(c); c], &[1, c]);
    let lum = tape.matmul(avg, tape.reshape(image, &[c, h * w]));
    Ok((tape.reshape(lum, &[h, w]), h, w))
}

/// Planar tape constant for a raster.
pub(crate) fn image_constant<T: Scalar>(tape: &Tape<T>, image: &RasterImage<T>) -> Var {
    tape.constant(image.to_planar(), &[image.channels(), image.height(), image.width()])
}
