//! Stroke-3 vector sketches: parsing, geometry, and rasterisation.
//!
//! Coordinates follow raster order: `x` grows to the right, `y` grows
//! downward, and pixel `(0, 0)` is the top-left corner.

mod geometry;
pub mod io;
mod raster;
mod stroke3;

pub use geometry::{AffineTransform, BoundingBox};
pub use raster::{rasterize, rasterize_in, RasterImage, NORMALIZED_LONG_SIDE};
pub use stroke3::{parse_stroke3, parse_stroke3_with, AbsPoint, ParseOptions, ParseReport, PenMove, VectorSketch};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SketchError {
    #[error("sketch has no moves")]
    EmptySketch,
    #[error("pen flag {value} at move {index} is not 0 or 1")]
    InvalidPenFlag { index: usize, value: f64 },
    #[error("all sketch points coincide; cannot normalise")]
    DegenerateExtent,
    #[error("affine transform is singular (determinant {determinant})")]
    SingularTransform { determinant: f64 },
    #[error("raster resolution {resolution} is below the minimum of {minimum}")]
    ResolutionTooSmall { resolution: usize, minimum: usize },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("malformed sketch record: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T, E = SketchError> = std::result::Result<T, E>;
