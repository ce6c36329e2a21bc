use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::geometry::BoundingBox;
use super::stroke3::VectorSketch;
use super::{Result, SketchError};
use crate::Scalar;

/// Longest side of a normalised sketch inside the unit canvas.
pub const NORMALIZED_LONG_SIDE: f64 = 0.9;

const MIN_RESOLUTION: usize = 8;

/// Row-major image with values in `[0, 1]`. One channel holds sketches (ink
/// = 1, background = 0); three channels hold RGB photos. Channels are
/// interleaved per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> RasterImage<T> {
    pub fn blank(width: usize, height: usize, channels: usize) -> Self {
        assert!(width >= 1 && height >= 1, "raster dimensions must be positive");
        assert!(channels == 1 || channels == 3, "rasters have 1 or 3 channels");
        Self { width, height, channels, data: vec![T::zero(); width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        let mut r = Self::blank(width, height, channels);
        r.data.iter_mut().for_each(|v| *v = value);
        r
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(SketchError::InvalidRaster(format!("dimensions {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(SketchError::InvalidRaster(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(SketchError::InvalidRaster(format!("buffer of {} values for {width}x{height}x{channels}", data.len())));
        }
        if let Some(bad) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(SketchError::InvalidRaster(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Per-pixel channel mean, `[height * width]`.
    pub fn luminance(&self) -> Vec<T> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let inv = T::one() / T::of_usize(self.channels);
        self.data.chunks(self.channels).map(|px| px.iter().copied().sum::<T>() * inv).collect()
    }

    /// Planar `[channels, height, width]` layout for convolution inputs.
    pub fn to_planar(&self) -> Vec<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); plane * self.channels];
        for (k, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + k] = v;
            }
        }
        out
    }

    /// Pixels with a non-zero value in any channel.
    pub fn ink_count(&self) -> usize {
        self.data.chunks(self.channels).filter(|px| px.iter().any(|&v| v > T::zero())).count()
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::of_usize(self.data.len())
    }

    pub fn mean_abs_diff(&self, other: &Self) -> T {
        assert_eq!(
            (self.width, self.height, self.channels),
            (other.width, other.height, other.channels),
            "mean_abs_diff on rasters of different shape"
        );
        let total: T = self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).sum();
        total / T::of_usize(self.data.len())
    }

    pub fn cast<U: Scalar>(&self) -> RasterImage<U> {
        RasterImage { width: self.width, height: self.height, channels: self.channels, data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }

    fn to_dynamic(&self) -> DynamicImage {
        let to_byte = |v: T| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        if self.channels == 1 {
            let img: GrayImage =
                ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| Luma([255 - to_byte(self.get(x as usize, y as usize, 0))]));
            DynamicImage::ImageLuma8(img)
        } else {
            let img: RgbImage = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([to_byte(self.get(x, y, 0)), to_byte(self.get(x, y, 1)), to_byte(self.get(x, y, 2))])
            });
            DynamicImage::ImageRgb8(img)
        }
    }

    fn from_dynamic(img: DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let data = rgb.pixels().flat_map(|p| p.0).map(|b| T::of(b as f64 / 255.0)).collect();
            Self::from_data(w, h, 3, data)
        } else {
            let gray = img.to_luma8();
            let data = gray.pixels().map(|p| T::of((255 - p.0[0]) as f64 / 255.0)).collect();
            Self::from_data(w, h, 1, data)
        }
    }

    /// Writes an 8-bit PNG. Single-channel rasters are drawn black ink on
    /// white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic().save(path).map_err(|e| SketchError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    /// Reads a PNG written by [`save_png`](Self::save_png). Grayscale files
    /// come back as ink maps, colour files as RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| SketchError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_dynamic(img)
    }

    /// In-memory PNG encoding, same conventions as [`save_png`](Self::save_png).
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut buf, ImageFormat::Png).expect("PNG encoding into memory does not fail");
        buf.into_inner()
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| SketchError::InvalidRaster(e.to_string()))?;
        Self::from_dynamic(img)
    }
}

/// Rasterises a normalised sketch on the unit canvas.
pub fn rasterize<T: Scalar>(sketch: &VectorSketch<T>, resolution: usize, stroke_width: usize) -> Result<RasterImage<T>> {
    rasterize_in(sketch, &BoundingBox::unit(), resolution, stroke_width)
}

/// Rasterises `sketch` with `canvas` mapped onto a `resolution²` pixel grid.
/// Segments are traced with integer Bresenham steps and every visited pixel
/// is stamped with a `stroke_width` square; no anti-aliasing.
pub fn rasterize_in<T: Scalar>(sketch: &VectorSketch<T>, canvas: &BoundingBox<T>, resolution: usize, stroke_width: usize) -> Result<RasterImage<T>> {
    if resolution < MIN_RESOLUTION {
        return Err(SketchError::ResolutionTooSmall { resolution, minimum: MIN_RESOLUTION });
    }
    let width = stroke_width.max(1) as i64;
    let mut img = RasterImage::blank(resolution, resolution, 1);
    let res = T::of_usize(resolution);
    let (cw, ch) = (canvas.width(), canvas.height());
    let to_px = |v: T, lo: T, extent: T| -> i64 {
        let u = if extent > T::zero() { (v - lo) / extent } else { T::zero() };
        let p = (u * res).floor().to_i64().unwrap_or(0);
        p.clamp(0, resolution as i64 - 1)
    };
    let lo_off = -((width - 1) / 2);
    let hi_off = width / 2;
    let stamp = |img: &mut RasterImage<T>, px: i64, py: i64| {
        for oy in lo_off..=hi_off {
            for ox in lo_off..=hi_off {
                let (x, y) = (px + ox, py + oy);
                if x >= 0 && y >= 0 && (x as usize) < resolution && (y as usize) < resolution {
                    img.set(x as usize, y as usize, 0, T::one());
                }
            }
        }
    };
    for stroke in sketch.stroke_points() {
        let pixels: Vec<(i64, i64)> = stroke.iter().map(|&(x, y)| (to_px(x, canvas.x_min, cw), to_px(y, canvas.y_min, ch))).collect();
        stamp(&mut img, pixels[0].0, pixels[0].1);
        for seg in pixels.windows(2) {
            trace_line(seg[0], seg[1], |x, y| stamp(&mut img, x, y));
        }
    }
    Ok(img)
}

fn trace_line((x0, y0): (i64, i64), (x1, y1): (i64, i64), mut visit: impl FnMut(i64, i64)) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        visit(x, y);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
