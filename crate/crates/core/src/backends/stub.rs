use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{image_constant, luminance_on_tape, BackendError, ImageGeneratorBackend, PatchFeatureExtractor, SemanticEmbedder};
use crate::autodiff::{Tape, Var};
use crate::captioner::tokenize;
use crate::linalg::Matrix;
use crate::seed::derive_seed;
use crate::sketch::RasterImage;
use crate::Scalar;

/// Side of the pooled pixel grid and number of hash buckets for text.
const POOL: usize = 16;
const BUCKETS: usize = POOL * POOL;
const TEXT_CANVAS: f64 = 0.5;
const WORD_WEIGHT: f64 = 2.0;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Text: signed feature hashing of words into 256 buckets over a neutral
/// gray canvas, so text reads like a pooled image. Images: channel mean
/// pooled onto a 16 × 16 grid. Both go through the same seeded projection
/// and bias, then onto the unit sphere.
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    seed: u64,
    dim: usize,
    projection: Vec<f64>,
    bias: Vec<f64>,
}

pub fn stub_embedder(seed: u64, dim: usize) -> Result<StubEmbedder, BackendError> {
    if dim < 8 {
        return Err(BackendError::InvalidConfig(format!("embedding width {dim} is below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stub-embedder"));
    let projection = gaussian(&mut rng, BUCKETS * dim, 1.0 / (BUCKETS as f64).sqrt());
    let bias = gaussian(&mut rng, dim, 0.1);
    Ok(StubEmbedder { seed, dim, projection, bias })
}

impl StubEmbedder {
    fn project<T: Scalar>(&self, x: &[f64]) -> Vec<T> {
        let mut v = self.bias.clone();
        for (b, &xb) in x.iter().enumerate() {
            let row = &self.projection[b * self.dim..(b + 1) * self.dim];
            v.iter_mut().zip(row).for_each(|(o, &p)| *o += xb * p);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter().map(|a| T::of(a / norm)).collect()
    }

    fn bucket(&self, word: &str) -> (usize, f64) {
        let h = derive_seed(self.seed, word);
        ((h % BUCKETS as u64) as usize, if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 })
    }
}

impl<T: Scalar> SemanticEmbedder<T> for StubEmbedder {
    fn name(&self) -> String {
        "stub".into()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<T>, BackendError> {
        let mut x = vec![TEXT_CANVAS; BUCKETS];
        for w in tokenize(text) {
            let (b, sign) = self.bucket(&w);
            x[b] += sign * WORD_WEIGHT;
        }
        Ok(self.project(&x))
    }

    fn embed_image(&self, image: &RasterImage<T>) -> Result<Vec<T>, BackendError> {
        let tape = Tape::new();
        let x = image_constant(&tape, image);
        let e = self.embed_image_on_tape(&tape, x)?;
        Ok(tape.value(e).to_vec())
    }

    fn embed_image_on_tape(&self, tape: &Tape<T>, image: Var) -> Result<Var, BackendError> {
        let (lum, h, w) = luminance_on_tape(tape, image)?;
        if h < POOL || w < POOL {
            return Err(BackendError::ResolutionMismatch { expected: format!("at least {POOL} pixels per side"), found: h.min(w) });
        }
        let pooled = tape.reshape(tape.block_mean(lum, POOL, POOL), &[1, BUCKETS]);
        let p = tape.constant(self.projection.iter().map(|&v| T::of(v)).collect(), &[BUCKETS, self.dim]);
        let b = tape.constant(self.bias.iter().map(|&v| T::of(v)).collect(), &[self.dim]);
        let v = tape.add_row_bias(tape.matmul(pooled, p), b);
        let norm = tape.sqrt(tape.sum(tape.square(v)));
        Ok(tape.div_by(v, norm))
    }
}

const STATS: usize = 7;

/// Per-patch statistics of the luminance (four quadrant means, variance,
/// mean absolute horizontal and vertical differences) through a seeded
/// linear map to `dim` features.
#[derive(Debug, Clone)]
pub struct StubPatchExtractor {
    grid: usize,
    dim: usize,
    projection: Vec<f64>,
    bias: Vec<f64>,
}

pub fn stub_patch_extractor(seed: u64, grid: usize, dim: usize) -> Result<StubPatchExtractor, BackendError> {
    if grid == 0 || dim == 0 {
        return Err(BackendError::InvalidConfig("patch grid and width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stub-patches"));
    let projection = gaussian(&mut rng, STATS * dim, 1.0);
    let bias = gaussian(&mut rng, dim, 0.1);
    Ok(StubPatchExtractor { grid, dim, projection, bias })
}

/// Forward statistics and the matching backward pass for a `[h, w]` map cut
/// into `g × g` square patches of side `p`.
struct PatchStats {
    g: usize,
    p: usize,
    w: usize,
}

impl PatchStats {
    fn forward<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (g, p, w) = (self.g, self.p, self.w);
        let half = p / 2;
        let q_inv = T::one() / T::of_usize(half * half);
        let n_inv = T::one() / T::of_usize(p * p);
        let d_inv = T::one() / T::of_usize(p * (p - 1));
        let mut out = vec![T::zero(); g * g * STATS];
        for pr in 0..g {
            for pc in 0..g {
                let at = |r: usize, c: usize| x[(pr * p + r) * w + pc * p + c];
                let o = &mut out[(pr * g + pc) * STATS..(pr * g + pc + 1) * STATS];
                let mut mean = T::zero();
                for r in 0..p {
                    for c in 0..p {
                        let v = at(r, c);
                        o[(r / half) * 2 + c / half] += v * q_inv;
                        mean += v;
                        if c + 1 < p {
                            o[5] += (at(r, c + 1) - v).abs() * d_inv;
                        }
                        if r + 1 < p {
                            o[6] += (at(r + 1, c) - v).abs() * d_inv;
                        }
                    }
                }
                mean *= n_inv;
                o[4] = (0..p).flat_map(|r| (0..p).map(move |c| (r, c))).map(|(r, c)| (at(r, c) - mean).powi(2)).sum::<T>() * n_inv;
            }
        }
        out
    }

    fn backward<T: Scalar>(&self, x: &[T], g_out: &[T]) -> Vec<T> {
        let (g, p, w) = (self.g, self.p, self.w);
        let half = p / 2;
        let q_inv = T::one() / T::of_usize(half * half);
        let n_inv = T::one() / T::of_usize(p * p);
        let d_inv = T::one() / T::of_usize(p * (p - 1));
        let two = T::of(2.0);
        let sign = |v: T| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        };
        let mut gx = vec![T::zero(); x.len()];
        for pr in 0..g {
            for pc in 0..g {
                let idx = |r: usize, c: usize| (pr * p + r) * w + pc * p + c;
                let go = &g_out[(pr * g + pc) * STATS..(pr * g + pc + 1) * STATS];
                let mean = (0..p).flat_map(|r| (0..p).map(move |c| (r, c))).map(|(r, c)| x[idx(r, c)]).sum::<T>() * n_inv;
                for r in 0..p {
                    for c in 0..p {
                        let k = idx(r, c);
                        gx[k] += go[(r / half) * 2 + c / half] * q_inv;
                        gx[k] += go[4] * two * (x[k] - mean) * n_inv;
                        if c + 1 < p {
                            let s = sign(x[idx(r, c + 1)] - x[k]) * go[5] * d_inv;
                            gx[idx(r, c + 1)] += s;
                            gx[k] -= s;
                        }
                        if r + 1 < p {
                            let s = sign(x[idx(r + 1, c)] - x[k]) * go[6] * d_inv;
                            gx[idx(r + 1, c)] += s;
                            gx[k] -= s;
                        }
                    }
                }
            }
        }
        gx
    }
}

impl<T: Scalar> PatchFeatureExtractor<T> for StubPatchExtractor {
    fn name(&self) -> String {
        "stub".into()
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, image: &RasterImage<T>) -> Result<Matrix<T>, BackendError> {
        let tape = Tape::new();
        let x = image_constant(&tape, image);
        let f = self.extract_on_tape(&tape, x)?;
        Ok(Matrix::from_vec(self.grid * self.grid, self.dim, tape.value(f).to_vec()))
    }

    fn extract_on_tape(&self, tape: &Tape<T>, image: Var) -> Result<Var, BackendError> {
        let (lum, h, w) = luminance_on_tape(tape, image)?;
        let g = self.grid;
        let fits = h == w && h % g == 0 && (h / g).is_multiple_of(2);
        if !fits {
            return Err(BackendError::ResolutionMismatch {
                expected: format!("a square image whose side splits into {g} patches of even size"),
                found: h,
            });
        }
        let stats = PatchStats { g, p: h / g, w };
        let x = tape.value(lum);
        let value = stats.forward(&x);
        let s = tape.custom(&[lum], value, &[g * g, STATS], Box::new(move |go, needs| vec![needs[0].then(|| stats.backward(&x, go))]));
        let p = tape.constant(self.projection.iter().map(|&v| T::of(v)).collect(), &[STATS, self.dim]);
        let b = tape.constant(self.bias.iter().map(|&v| T::of(v)).collect(), &[self.dim]);
        Ok(tape.add_row_bias(tape.matmul(s, p), b))
    }
}

/// Procedural compositor: a seeded sky/ground gradient, one textured block
/// per scene word, and the object ink drawn in dark gray on top.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubImageGenerator;

pub fn stub_image_generator() -> StubImageGenerator {
    StubImageGenerator
}

pub const STUB_INK_LEVEL: f64 = 0.2;

impl<T: Scalar> ImageGeneratorBackend<T> for StubImageGenerator {
    fn name(&self) -> String {
        "stub".into()
    }

    fn generate(&self, object: &RasterImage<T>, text: &str, seed: u64) -> Result<RasterImage<T>, BackendError> {
        let (w, h) = (object.width(), object.height());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stub-image"));
        let mut color = |lo: f64, hi: f64| -> [f64; 3] { [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)] };
        let top = color(0.7, 1.0);
        let horizon_sky = color(0.6, 1.0);
        let ground = color(0.45, 0.8);
        let horizon = ((0.4 + 0.3 * rng.random::<f64>()) * h as f64) as usize;
        let mut img = RasterImage::blank(w, h, 3);
        for y in 0..h {
            let row = if y < horizon {
                let t = y as f64 / horizon.max(1) as f64;
                [0, 1, 2].map(|c| top[c] + (horizon_sky[c] - top[c]) * t)
            } else {
                let t = (y - horizon) as f64 / (h - horizon).max(1) as f64;
                [0, 1, 2].map(|c| ground[c] * (1.0 - 0.2 * t))
            };
            for x in 0..w {
                for (c, &v) in row.iter().enumerate() {
                    img.set(x, y, c, T::of(v));
                }
            }
        }
        let stripe = (w / 64).max(2);
        for word in tokenize(text) {
            let mut wr = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("word/{word}")));
            let bw = wr.random_range((w / 16).max(1)..=(w / 5).max(1));
            let bh = wr.random_range((h / 16).max(1)..=(h / 5).max(1));
            let x0 = wr.random_range(0..=w - bw);
            let y0 = wr.random_range(0..=h - bh);
            let base = [0, 1, 2].map(|_| wr.random_range(0.45..0.9));
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let shade = if ((x + y) / stripe) % 2 == 0 { 1.0 } else { 0.9 };
                    for (c, &v) in base.iter().enumerate() {
                        img.set(x, y, c, T::of(v * shade));
                    }
                }
            }
        }
        let half = T::of(0.5);
        for y in 0..h {
            for x in 0..w {
                let ink = (0..object.channels()).any(|c| object.get(x, y, c) > half);
                if ink {
                    for c in 0..3 {
                        img.set(x, y, c, T::of(STUB_INK_LEVEL));
                    }
                }
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::{rasterize, VectorSketch};

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    fn sketch_raster(res: usize) -> RasterImage<f64> {
        let s = VectorSketch::from_absolute_strokes(&[vec![(0.0, 0.0), (1.0, 1.0), (0.0, 1.0)]]).unwrap();
        rasterize(&s.normalize().unwrap(), res, 2).unwrap()
    }

    #[test]
    fn embedder_contract() {
        let e = stub_embedder(1, 32).unwrap();
        let a: Vec<f64> = e.embed_text("a cat in a kitchen").unwrap();
        let b: Vec<f64> = e.embed_text("a cat in a kitchen").unwrap();
        let c: Vec<f64> = e.embed_text("mountains under a stormy sky").unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-6);
        assert!(a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>() < 0.99);
        let img: Vec<f64> = e.embed_image(&sketch_raster(64)).unwrap();
        assert!((norm(&img) - 1.0).abs() < 1e-6);
        let blank: Vec<f64> = e.embed_image(&RasterImage::blank(32, 32, 3)).unwrap();
        assert!((norm(&blank) - 1.0).abs() < 1e-6);
        assert!(stub_embedder(1, 4).is_err());
        assert!(SemanticEmbedder::<f64>::embed_image(&e, &RasterImage::blank(8, 8, 1)).is_err());
    }

    #[test]
    fn embedder_gradient_matches_differences() {
        let e = stub_embedder(2, 8).unwrap();
        let img = sketch_raster(32);
        let tape = Tape::new();
        let x = tape.param(img.data().to_vec(), &[1, 32, 32]);
        let v = e.embed_image_on_tape(&tape, x).unwrap();
        let probe = tape.constant((0..8).map(|k| (k as f64 * 0.37).sin()).collect(), &[1, 8]);
        let loss = tape.sum(tape.mul(v, probe));
        let grads = tape.backward(loss);
        let g = grads.get(x).unwrap();
        for k in [0usize, 100, 517, 1000] {
            let eval = |d: f64| {
                let mut data = img.data().to_vec();
                data[k] += d;
                let out: Vec<f64> = e.embed_image(&RasterImage::from_data(32, 32, 1, data).unwrap()).unwrap();
                out.iter().enumerate().map(|(i, o)| o * (i as f64 * 0.37).sin()).sum::<f64>()
            };
            let h = if img.data()[k] > 0.5 { -1e-6 } else { 1e-6 };
            let numeric = (eval(h) - eval(0.0)) / h;
            let rel = (g[k] - numeric).abs() / g[k].abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "pixel {k}: {} vs {numeric}", g[k]);
        }
    }

    #[test]
    fn patch_contract() {
        let p = stub_patch_extractor(3, 4, 6).unwrap();
        let uniform = RasterImage::filled(32, 32, 1, 0.3);
        let f = PatchFeatureExtractor::<f64>::extract(&p, &uniform).unwrap();
        assert_eq!(f.shape(), (16, 6));
        for r in 1..16 {
            assert_eq!(f.row(r), f.row(0));
        }
        let img = sketch_raster(32);
        let base = p.extract(&img).unwrap();
        let mut flipped = img.clone();
        for y in 0..8 {
            for x in 8..16 {
                flipped.set(x, y, 0, 1.0 - img.get(x, y, 0));
            }
        }
        let changed = p.extract(&flipped).unwrap();
        assert_ne!(base.row(1), changed.row(1));
        assert_eq!(base.row(5), changed.row(5));
        assert!(matches!(p.extract(&RasterImage::<f64>::blank(30, 30, 1)), Err(BackendError::ResolutionMismatch { .. })));
    }

    #[test]
    fn patch_stats_gradient() {
        let stats = PatchStats { g: 2, p: 4, w: 8 };
        let x: Vec<f64> = (0..64).map(|k| ((k * 37 % 11) as f64) / 11.0 + (k as f64) * 1e-3).collect();
        let probe: Vec<f64> = (0..4 * STATS).map(|k| (k as f64 * 0.21).cos()).collect();
        let f = |x: &[f64]| stats.forward(x).iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
        let g = stats.backward(&x, &probe);
        for k in 0..64 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[k] += 1e-7;
            b[k] -= 1e-7;
            let numeric = (f(&a) - f(&b)) / 2e-7;
            assert!((g[k] - numeric).abs() < 1e-5, "pixel {k}: {} vs {numeric}", g[k]);
        }
    }

    #[test]
    fn generator_contract() {
        let gen = stub_image_generator();
        let obj = sketch_raster(64);
        let a = gen.generate(&obj, "a cat in a garden", 5).unwrap();
        let b = gen.generate(&obj, "a cat in a garden", 5).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height(), a.channels()), (64, 64, 3));
        let blank = gen.generate(&RasterImage::blank(64, 64, 1), "a cat in a garden", 5).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if obj.get(x, y, 0) > 0.5 {
                    for c in 0..3 {
                        assert!(a.get(x, y, c) < blank.get(x, y, c));
                    }
                }
            }
        }
        let other = gen.generate(&obj, "a cat on a beach", 5).unwrap();
        assert_ne!(a, other);
    }
}
