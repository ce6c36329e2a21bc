//! Scene-level sketch, text and image triplets from object sketches.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the single-precision types the pipeline runs on.

pub mod autodiff;
pub mod backends;
pub mod captioner;
pub mod checkpoint;
pub mod expansion;
pub mod generator;
pub mod graph;
pub mod layout;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod remote;
mod scalar;
pub mod seed;
pub mod sketch;
pub mod tensor;

pub use scalar::Scalar;

/// Pipeline precision.
pub type Real = f32;
pub type Sketch = sketch::VectorSketch<Real>;
pub type Raster = sketch::RasterImage<Real>;
pub type SketchGraph = graph::SketchGraph<Real>;
pub type CaptionModel = captioner::CaptionModel<Real>;
pub type Generator = generator::GeneratorParams<Real>;
pub type ModelBackends = backends::Backends<Real>;
