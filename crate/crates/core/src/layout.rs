//! Text-driven placement of the object sketch on the scene canvas, and the
//! inverse crop that recovers the object region from a scene raster.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::expansion::SceneDescription;
use crate::remote::{cache_key, cached_call, DiskCache, JsonTransport};
use crate::seed::derive_seed;
use crate::sketch::{AffineTransform, RasterImage, SketchError, VectorSketch};
use crate::Scalar;

pub const DEFAULT_MIN_SIZE: f64 = 0.05;
pub const DEFAULT_SIZE_RANGE: (f64, f64) = (0.15, 0.4);

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    #[error("invalid layout box {0:?}: {1}")]
    InvalidBox(LayoutBox, String),
    #[error("layout box covers less than one pixel at resolution {resolution}")]
    DegenerateCrop { resolution: usize },
    #[error("expected a 1-channel raster, found {0} channels")]
    NotGrayscale(usize),
    #[error("layout backend {backend} failed: {message}")]
    BackendFailure { backend: String, message: String },
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

/// Normalised `(x, y, w, h)` with `(x, y)` the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl LayoutBox {
    pub fn full_canvas() -> Self {
        Self { x: 0.0, y: 0.0, w: 1.0, h: 1.0 }
    }

    pub fn validate(&self, min_size: f64) -> Result<(), LayoutError> {
        let tol = 1e-9;
        let bad = |why: &str| Err(LayoutError::InvalidBox(*self, why.to_owned()));
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return bad("non-finite coordinate");
        }
        if self.x < -tol || self.y < -tol {
            return bad("starts outside the canvas");
        }
        if self.x + self.w > 1.0 + tol || self.y + self.h > 1.0 + tol {
            return bad("extends past the canvas");
        }
        if self.w < min_size - tol || self.h < min_size - tol {
            return bad("smaller than the minimum size");
        }
        Ok(())
    }

    /// Side and top-left corner of the largest square centred in the box.
    pub fn placement_square(&self) -> (f64, f64, f64) {
        let s = self.w.min(self.h);
        (self.x + (self.w - s) / 2.0, self.y + (self.h - s) / 2.0, s)
    }

    /// Maps the unit frame into the box, preserving aspect (letterboxed and
    /// centred).
    pub fn placement_transform<T: Scalar>(&self) -> AffineTransform<T> {
        let (x, y, s) = self.placement_square();
        AffineTransform::from_matrix([[T::of(s), T::zero(), T::of(x)], [T::zero(), T::of(s), T::of(y)]])
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` covered by the placement square
    /// at `resolution`, rounded outward.
    pub fn placement_pixels(&self, resolution: usize) -> Result<PixelRect, LayoutError> {
        let (x, y, s) = self.placement_square();
        let r = resolution as f64;
        if s * r < 1.0 {
            return Err(LayoutError::DegenerateCrop { resolution });
        }
        let lo = |v: f64| ((v * r + 1e-9).floor().max(0.0) as usize).min(resolution - 1);
        let hi = |v: f64, start: usize| ((v * r - 1e-9).ceil().min(r) as usize).max(start + 1);
        let (x0, y0) = (lo(x), lo(y));
        Ok(PixelRect { x0, y0, x1: hi(x + s, x0), y1: hi(y + s, y0) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub bbox: LayoutBox,
    pub object_phrase: String,
    pub backend: String,
    pub seed: u64,
}

impl LayoutSpec {
    pub fn full_canvas(object_phrase: impl Into<String>, seed: u64) -> Self {
        Self { bbox: LayoutBox::full_canvas(), object_phrase: object_phrase.into(), backend: "full-canvas".into(), seed }
    }
}

pub trait LayoutBackend: Send + Sync {
    fn name(&self) -> String;

    fn propose(&self, description: &str, object_phrase: &str, seed: u64) -> Result<LayoutSpec, LayoutError>;
}

/// Seeded sampler: side lengths uniform in `size_range`, position uniform
/// subject to containment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicLayout {
    pub size_range: (f64, f64),
    pub min_size: f64,
}

impl Default for HeuristicLayout {
    fn default() -> Self {
        Self { size_range: DEFAULT_SIZE_RANGE, min_size: DEFAULT_MIN_SIZE }
    }
}

impl LayoutBackend for HeuristicLayout {
    fn name(&self) -> String {
        "heuristic".into()
    }

    fn propose(&self, description: &str, object_phrase: &str, seed: u64) -> Result<LayoutSpec, LayoutError> {
        let (lo, hi) = self.size_range;
        let lo = lo.max(self.min_size);
        if !(lo <= hi && hi <= 1.0) {
            return Err(LayoutError::InvalidBox(LayoutBox { x: 0.0, y: 0.0, w: lo, h: hi }, "bad size range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, description));
        let w = rng.random_range(lo..=hi);
        let h = rng.random_range(lo..=hi);
        let x = rng.random_range(0.0..=1.0 - w);
        let y = rng.random_range(0.0..=1.0 - h);
        let bbox = LayoutBox { x, y, w, h };
        bbox.validate(self.min_size)?;
        Ok(LayoutSpec { bbox, object_phrase: object_phrase.to_owned(), backend: self.name(), seed })
    }
}

pub const LAYOUT_REQUEST_VERSION: &str = "layout-v1";

/// HTTP layout service: `{description, object, seed}` → `{x, y, w, h}`.
/// Unreachable services and invalid boxes fall back to the heuristic.
pub struct RemoteLayout {
    transport: Box<dyn JsonTransport>,
    cache: Option<DiskCache>,
    pub fallback: HeuristicLayout,
}

impl RemoteLayout {
    pub fn new(transport: Box<dyn JsonTransport>, cache: Option<DiskCache>, fallback: HeuristicLayout) -> Self {
        Self { transport, cache, fallback }
    }

    fn request(&self, description: &str, object_phrase: &str, seed: u64) -> Result<LayoutBox, LayoutError> {
        let fail = |m: String| LayoutError::BackendFailure { backend: self.name(), message: m };
        let body = json!({"description": description, "object": object_phrase, "seed": seed});
        let key = cache_key(&[description, object_phrase, &seed.to_string(), LAYOUT_REQUEST_VERSION]);
        let reply = cached_call(self.cache.as_ref(), &key, self.transport.as_ref(), &body).map_err(|e| fail(e.to_string()))?;
        let bbox: LayoutBox = serde_json::from_value(reply.clone()).map_err(|e| fail(format!("{e} in {reply}")))?;
        bbox.validate(self.fallback.min_size).map_err(|e| fail(e.to_string()))?;
        Ok(bbox)
    }
}

impl LayoutBackend for RemoteLayout {
    fn name(&self) -> String {
        "remote".into()
    }

    fn propose(&self, description: &str, object_phrase: &str, seed: u64) -> Result<LayoutSpec, LayoutError> {
        match self.request(description, object_phrase, seed) {
            Ok(bbox) => Ok(LayoutSpec { bbox, object_phrase: object_phrase.to_owned(), backend: self.name(), seed }),
            Err(e) => {
                log::warn!("{e}; using the heuristic layout");
                self.fallback.propose(description, object_phrase, seed)
            }
        }
    }
}

/// Layout for a scene description; the object phrase is carried along.
pub fn propose_layout(scene: &SceneDescription, object_phrase: &str, backend: &dyn LayoutBackend, seed: u64) -> Result<LayoutSpec, LayoutError> {
    backend.propose(&scene.text, object_phrase, seed)
}

/// Normalises the sketch and maps it into the layout box.
pub fn adapt<T: Scalar>(sketch: &VectorSketch<T>, layout: &LayoutSpec) -> Result<VectorSketch<T>, LayoutError> {
    let normalized = sketch.normalize()?;
    Ok(normalized.apply_affine(&layout.bbox.placement_transform())?)
}

fn grayscale<T: Scalar>(img: &RasterImage<T>) -> Result<(), LayoutError> {
    match img.channels() {
        1 => Ok(()),
        c => Err(LayoutError::NotGrayscale(c)),
    }
}

/// Nearest-neighbour source index for output pixel `k` of `out` pixels over
/// `src` source pixels (centre sampling).
fn nearest(k: usize, out: usize, src: usize) -> usize {
    (((2 * k + 1) * src) / (2 * out)).min(src - 1)
}

/// Places a square object raster on a blank `resolution²` canvas, filling
/// the layout's placement pixels by nearest-neighbour resampling.
pub fn paste<T: Scalar>(object: &RasterImage<T>, layout: &LayoutSpec, resolution: usize) -> Result<RasterImage<T>, LayoutError> {
    grayscale(object)?;
    let rect = layout.bbox.placement_pixels(resolution)?;
    let mut canvas = RasterImage::blank(resolution, resolution, 1);
    for py in 0..rect.height() {
        let sy = nearest(py, rect.height(), object.height());
        for px in 0..rect.width() {
            let sx = nearest(px, rect.width(), object.width());
            canvas.set(rect.x0 + px, rect.y0 + py, 0, object.get(sx, sy, 0));
        }
    }
    Ok(canvas)
}

/// Crops the placement pixels of `layout` from a scene raster and resizes
/// the crop to `target_res²` by nearest neighbour.
pub fn inverse_adapt<T: Scalar>(scene: &RasterImage<T>, layout: &LayoutSpec, target_res: usize) -> Result<RasterImage<T>, LayoutError> {
    grayscale(scene)?;
    if target_res == 0 {
        return Err(LayoutError::DegenerateCrop { resolution: 0 });
    }
    let rect = layout.bbox.placement_pixels(scene.width().min(scene.height()))?;
    let mut out = RasterImage::blank(target_res, target_res, 1);
    for ty in 0..target_res {
        let sy = rect.y0 + nearest(ty, target_res, rect.height());
        for tx in 0..target_res {
            let sx = rect.x0 + nearest(tx, target_res, rect.width());
            out.set(tx, ty, 0, scene.get(sx, sy, 0));
        }
    }
    Ok(out)
}

/// Indices into a row-major `resolution²` grid of the crop that
/// [`inverse_adapt`] reads, so differentiable code can gather the same
/// pixels.
pub fn crop_indices(layout: &LayoutSpec, resolution: usize, target_res: usize) -> Result<Vec<usize>, LayoutError> {
    let rect = layout.bbox.placement_pixels(resolution)?;
    let mut idx = Vec::with_capacity(target_res * target_res);
    for ty in 0..target_res {
        let sy = rect.y0 + nearest(ty, target_res, rect.height());
        for tx in 0..target_res {
            idx.push(sy * resolution + rect.x0 + nearest(tx, target_res, rect.width()));
        }
    }
    Ok(idx)
}
