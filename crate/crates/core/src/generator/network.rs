use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GeneratorError;
use crate::autodiff::{Tape, Var};
use crate::sketch::RasterImage;
use crate::tensor::{ParamSet, Tensor};
use crate::Scalar;

pub const MAX_BLOCKS: usize = 8;
const FIXED: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Feature width of every hidden layer.
    pub channels: usize,
    /// Residual blocks at the bottleneck, at most [`MAX_BLOCKS`].
    pub blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { channels: 32, blocks: 4 }
    }
}

static NAMES: [&str; FIXED + 4 * MAX_BLOCKS] = [
    "stem.weight",
    "stem.bias",
    "down0.weight",
    "down0.bias",
    "down1.weight",
    "down1.bias",
    "up0.weight",
    "up0.bias",
    "up1.weight",
    "up1.bias",
    "head.weight",
    "head.bias",
    "res0.conv0.weight",
    "res0.conv0.bias",
    "res0.conv1.weight",
    "res0.conv1.bias",
    "res1.conv0.weight",
    "res1.conv0.bias",
    "res1.conv1.weight",
    "res1.conv1.bias",
    "res2.conv0.weight",
    "res2.conv0.bias",
    "res2.conv1.weight",
    "res2.conv1.bias",
    "res3.conv0.weight",
    "res3.conv0.bias",
    "res3.conv1.weight",
    "res3.conv1.bias",
    "res4.conv0.weight",
    "res4.conv0.bias",
    "res4.conv1.weight",
    "res4.conv1.bias",
    "res5.conv0.weight",
    "res5.conv0.bias",
    "res5.conv1.weight",
    "res5.conv1.bias",
    "res6.conv0.weight",
    "res6.conv0.bias",
    "res6.conv1.weight",
    "res6.conv1.bias",
    "res7.conv0.weight",
    "res7.conv0.bias",
    "res7.conv1.weight",
    "res7.conv1.bias",
];

/// Residual image-to-sketch network: a 3×3 stem, two stride-2 convolutions,
/// residual blocks, two upsample-and-convolve stages, and a sigmoid head
/// producing one ink channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams<T> {
    pub config: GeneratorConfig,
    /// Fixed layers first (stem, down0, down1, up0, up1, head; weight then
    /// bias), then four tensors per residual block.
    tensors: Vec<Tensor<T>>,
}

fn he<T: Scalar>(out_c: usize, in_c: usize, k: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::randn(&[out_c, in_c, k, k], gain * (2.0 / (in_c * k * k) as f64).sqrt(), rng)
}

impl<T: Scalar> GeneratorParams<T> {
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self, GeneratorError> {
        let c = config.channels;
        if c == 0 || config.blocks > MAX_BLOCKS {
            return Err(GeneratorError::InvalidConfig(format!("need channels ≥ 1 and at most {MAX_BLOCKS} residual blocks")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = vec![
            he(c, 3, 3, 1.0, &mut rng),
            Tensor::zeros(&[c]),
            he(c, c, 3, 1.0, &mut rng),
            Tensor::zeros(&[c]),
            he(c, c, 3, 1.0, &mut rng),
            Tensor::zeros(&[c]),
            he(c, c, 3, 1.0, &mut rng),
            Tensor::zeros(&[c]),
            he(c, c, 3, 1.0, &mut rng),
            Tensor::zeros(&[c]),
            he(1, c, 3, 0.5, &mut rng),
            Tensor::zeros(&[1]),
        ];
        for _ in 0..config.blocks {
            tensors.push(he(c, c, 3, 1.0, &mut rng));
            tensors.push(Tensor::zeros(&[c]));
            tensors.push(he(c, c, 3, 0.1, &mut rng));
            tensors.push(Tensor::zeros(&[c]));
        }
        Ok(Self { config, tensors })
    }

    /// Rebuilds parameters from named tensors (e.g. a checkpoint section).
    pub fn from_named(config: GeneratorConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, GeneratorError> {
        let mut template = Self::init(config, 0)?;
        let mut seen = 0;
        for (name, t) in named {
            let slot = template
                .named_mut()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, slot)| slot)
                .ok_or_else(|| GeneratorError::InvalidConfig(format!("unexpected tensor {name}")))?;
            if slot.shape != t.shape {
                return Err(GeneratorError::InvalidConfig(format!("tensor {name} has shape {:?}, expected {:?}", t.shape, slot.shape)));
            }
            *slot = t;
            seen += 1;
        }
        if seen != template.tensors.len() {
            return Err(GeneratorError::InvalidConfig(format!("{seen} of {} tensors present", template.tensors.len())));
        }
        Ok(template)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub(crate) fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| t.on_tape(tape, trainable)).collect()
    }
}

impl<T: Scalar> ParamSet<T> for GeneratorParams<T> {
    fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        self.tensors.iter().enumerate().map(|(k, t)| (NAMES[k], t)).collect()
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        self.tensors.iter_mut().enumerate().map(|(k, t)| (NAMES[k], t)).collect()
    }
}

pub(crate) fn check_resolution(width: usize, height: usize) -> Result<(), GeneratorError> {
    if width != height || !width.is_multiple_of(4) || width < 8 {
        return Err(GeneratorError::ResolutionMismatch { width, height });
    }
    Ok(())
}

/// Ink map `[1, h, w]` for a planar `[3, h, w]` image in `[0, 1]`.
pub(crate) fn forward_on_tape<T: Scalar>(tape: &Tape<T>, vars: &[Var], image: Var) -> Var {
    let x = tape.add_scalar(tape.scale(image, T::of(2.0)), -T::one());
    let conv = |x: Var, k: usize, stride: usize| tape.conv2d(x, vars[2 * k], vars[2 * k + 1], stride, 1);
    let mut h = tape.relu(conv(x, 0, 1));
    h = tape.relu(conv(h, 1, 2));
    h = tape.relu(conv(h, 2, 2));
    let blocks = (vars.len() - FIXED) / 4;
    for b in 0..blocks {
        let v = &vars[FIXED + 4 * b..FIXED + 4 * b + 4];
        let r = tape.relu(tape.conv2d(h, v[0], v[1], 1, 1));
        let r = tape.conv2d(r, v[2], v[3], 1, 1);
        h = tape.relu(tape.add(h, r));
    }
    h = tape.relu(conv(tape.upsample2x(h), 3, 1));
    h = tape.relu(conv(tape.upsample2x(h), 4, 1));
    tape.sigmoid(conv(h, 5, 1))
}

/// Predicted scene sketch (ink in `[0, 1]`) for a 3-channel image.
pub fn generate<T: Scalar>(image: &RasterImage<T>, params: &GeneratorParams<T>) -> Result<RasterImage<T>, GeneratorError> {
    check_resolution(image.width(), image.height())?;
    if image.channels() != 3 {
        return Err(GeneratorError::InvalidConfig(format!("generator input needs 3 channels, got {}", image.channels())));
    }
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let x = tape.constant(image.to_planar(), &[3, image.height(), image.width()]);
    let out = forward_on_tape(&tape, &vars, x);
    let data = tape.value(out).iter().map(|&v| v.max(T::zero()).min(T::one())).collect();
    Ok(RasterImage::from_data(image.width(), image.height(), 1, data)?)
}
