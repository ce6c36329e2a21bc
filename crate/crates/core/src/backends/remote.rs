use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};

use super::{BackendError, ImageGeneratorBackend, PatchFeatureExtractor, SemanticEmbedder};
use crate::linalg::Matrix;
use crate::remote::{cache_key, cached_call, DiskCache, JsonTransport, RemoteError};
use crate::sketch::RasterImage;
use crate::Scalar;

fn bad(msg: impl Into<String>) -> BackendError {
    BackendError::Remote(RemoteError::BadResponse(msg.into()))
}

fn call(transport: &dyn JsonTransport, cache: Option<&DiskCache>, kind: &str, body: &Value) -> Result<Value, BackendError> {
    let key = cache_key(&[kind, &body.to_string()]);
    Ok(cached_call(cache, &key, transport, body)?)
}

fn png_field<T: Scalar>(image: &RasterImage<T>) -> String {
    STANDARD.encode(image.to_png_bytes())
}

fn numbers<T: Scalar>(v: &Value, what: &str) -> Result<Vec<T>, BackendError> {
    let items = v.as_array().ok_or_else(|| bad(format!("{what} is not an array")))?;
    items.iter().map(|x| x.as_f64().filter(|f| f.is_finite()).map(T::of).ok_or_else(|| bad(format!("{what} holds a non-number")))).collect()
}

/// `{text}` or `{image_png_base64}` → `{vector}`; vectors are re-normalised.
pub struct RemoteEmbedder {
    dim: usize,
    transport: Box<dyn JsonTransport>,
    cache: Option<DiskCache>,
}

impl RemoteEmbedder {
    pub fn new(dim: usize, transport: Box<dyn JsonTransport>, cache: Option<DiskCache>) -> Self {
        Self { dim, transport, cache }
    }

    fn vector<T: Scalar>(&self, body: Value) -> Result<Vec<T>, BackendError> {
        let reply = call(self.transport.as_ref(), self.cache.as_ref(), "embed", &body)?;
        let v: Vec<T> = numbers(reply.get("vector").ok_or_else(|| bad("reply lacks a vector"))?, "vector")?;
        if v.len() != self.dim {
            return Err(BackendError::DimensionMismatch(format!("remote vector of width {}, expected {}", v.len(), self.dim)));
        }
        let norm = v.iter().map(|&a| a * a).sum::<T>().sqrt();
        if !(norm > T::zero()) {
            return Err(bad("zero vector"));
        }
        Ok(v.into_iter().map(|a| a / norm).collect())
    }
}

impl<T: Scalar> SemanticEmbedder<T> for RemoteEmbedder {
    fn name(&self) -> String {
        "remote".into()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<T>, BackendError> {
        self.vector(json!({ "text": text }))
    }

    fn embed_image(&self, image: &RasterImage<T>) -> Result<Vec<T>, BackendError> {
        self.vector(json!({ "image_png_base64": png_field(image) }))
    }
}

/// `{image_png_base64, grid}` → `{grid: [[f; d]; g²]}`.
pub struct RemotePatchExtractor {
    grid: usize,
    dim: usize,
    transport: Box<dyn JsonTransport>,
    cache: Option<DiskCache>,
}

impl RemotePatchExtractor {
    pub fn new(grid: usize, dim: usize, transport: Box<dyn JsonTransport>, cache: Option<DiskCache>) -> Self {
        Self { grid, dim, transport, cache }
    }
}

impl<T: Scalar> PatchFeatureExtractor<T> for RemotePatchExtractor {
    fn name(&self) -> String {
        "remote".into()
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &RasterImage<T>) -> Result<Matrix<T>, BackendError> {
        let body = json!({ "image_png_base64": png_field(image), "grid": self.grid });
        let reply = call(self.transport.as_ref(), self.cache.as_ref(), "patches", &body)?;
        let rows = reply.get("grid").and_then(Value::as_array).ok_or_else(|| bad("reply lacks a grid"))?;
        if rows.len() != self.grid * self.grid {
            return Err(BackendError::DimensionMismatch(format!("{} patches returned, expected {}", rows.len(), self.grid * self.grid)));
        }
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for r in rows {
            let v: Vec<T> = numbers(r, "patch feature")?;
            if v.len() != self.dim {
                return Err(BackendError::DimensionMismatch(format!("patch feature of width {}, expected {}", v.len(), self.dim)));
            }
            data.extend(v);
        }
        Ok(Matrix::from_vec(rows.len(), self.dim, data))
    }
}

/// `{image_png_base64, text, seed}` → `{image_png_base64}`.
pub struct RemoteImageGenerator {
    transport: Box<dyn JsonTransport>,
    cache: Option<DiskCache>,
}

impl RemoteImageGenerator {
    pub fn new(transport: Box<dyn JsonTransport>, cache: Option<DiskCache>) -> Self {
        Self { transport, cache }
    }
}

impl<T: Scalar> ImageGeneratorBackend<T> for RemoteImageGenerator {
    fn name(&self) -> String {
        "remote".into()
    }

    fn generate(&self, object: &RasterImage<T>, text: &str, seed: u64) -> Result<RasterImage<T>, BackendError> {
        let body = json!({ "image_png_base64": png_field(object), "text": text, "seed": seed });
        let reply = call(self.transport.as_ref(), self.cache.as_ref(), "generate", &body)?;
        let encoded = reply.get("image_png_base64").and_then(Value::as_str).ok_or_else(|| bad("reply lacks image_png_base64"))?;
        let bytes = STANDARD.decode(encoded).map_err(|e| bad(e.to_string()))?;
        let img = RasterImage::<T>::from_png_bytes(&bytes)?;
        if (img.width(), img.height()) != (object.width(), object.height()) {
            return Err(BackendError::ResolutionMismatch { expected: format!("{}×{}", object.width(), object.height()), found: img.width() });
        }
        if img.channels() == 3 {
            return Ok(img);
        }
        // grayscale replies come back as ink maps; turn them into intensities
        let data = img.data().iter().flat_map(|&v| [T::one() - v; 3]).collect();
        Ok(RasterImage::from_data(img.width(), img.height(), 3, data)?)
    }
}
