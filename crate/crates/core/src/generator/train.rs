use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adversarial::Discriminator;
use super::losses::{objective_on_tape, read_breakdown, LossBreakdown, LossWeights, PairTargets, TrainingPair, DEFAULT_SOCP_RESOLUTION};
use super::network::{forward_on_tape, generate, GeneratorParams};
use super::GeneratorError;
use crate::autodiff::Tape;
use crate::backends::{image_constant, Backends};
use crate::layout::adapt;
use crate::optim::{Adam, AdamConfig};
use crate::seed::derive_seed;
use crate::sketch::{rasterize, RasterImage};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorTrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Side of the object-content comparison grid.
    pub socp_resolution: usize,
    /// Stroke width of the rendered real samples shown to the critic.
    pub stroke_width: usize,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            epochs: 50,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            socp_resolution: DEFAULT_SOCP_RESOLUTION,
            stroke_width: 1,
        }
    }
}

/// Mean per-term losses over one epoch's steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub sfp: Option<f64>,
    pub socp: Option<f64>,
    pub mop: Option<f64>,
    pub adversarial: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainReport {
    /// Batch-mean total loss of every optimiser step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub steps: u64,
}

impl GeneratorTrainReport {
    /// `epoch,l_sfp,l_socp,l_mop,l_adv,total`; disabled terms are left empty.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("epoch,l_sfp,l_socp,l_mop,l_adv,total\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{},{:.6}", e.epoch, cell(e.sfp), cell(e.socp), cell(e.mop), cell(e.adversarial), e.total);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), GeneratorError> {
        std::fs::write(path, self.to_csv()).map_err(|e| GeneratorError::Io { path: path.display().to_string(), message: e.to_string() })
    }
}

/// Loss terms and parameter gradients for one pair.
pub(crate) fn pair_gradients<T: Scalar>(
    params: &GeneratorParams<T>,
    pair: &TrainingPair<T>,
    targets: &PairTargets<T>,
    weights: &LossWeights,
    backends: &Backends<T>,
    critic: Option<&Discriminator<T>>,
) -> Result<(LossBreakdown<T>, Vec<Vec<T>>), GeneratorError> {
    let tape = Tape::new();
    let vars = params.bind(&tape, true);
    let ink = forward_on_tape(&tape, &vars, image_constant(&tape, &pair.image));
    let adversarial = critic.map(|d| d.generator_term(&tape, ink));
    let (total, terms) = objective_on_tape(&tape, ink, targets, weights, backends, adversarial)?;
    let grads = tape.backward(total);
    let g = vars.iter().map(|&v| grads.get_or_zeros(v, tape.value(v).len())).collect();
    Ok((read_breakdown(&tape, &terms), g))
}

/// Loss terms of `total_loss` at the generator's output for `pair`, with
/// the gradient of the weighted total for every parameter tensor (in
/// `tensors()` order).
pub fn loss_gradients<T: Scalar>(
    params: &GeneratorParams<T>,
    pair: &TrainingPair<T>,
    weights: &LossWeights,
    socp_resolution: usize,
    backends: &Backends<T>,
) -> Result<(LossBreakdown<T>, Vec<Vec<T>>), GeneratorError> {
    weights.validate()?;
    check_pairs(std::slice::from_ref(pair))?;
    let targets = PairTargets::prepare(pair, weights, socp_resolution, backends)?;
    pair_gradients(params, pair, &targets, weights, backends, None)
}

fn check_pairs<T: Scalar>(pairs: &[TrainingPair<T>]) -> Result<(), GeneratorError> {
    if pairs.is_empty() {
        return Err(GeneratorError::EmptyDataset);
    }
    for p in pairs {
        if p.image.channels() != 3 {
            return Err(GeneratorError::InvalidConfig(format!("training images need 3 channels, got {}", p.image.channels())));
        }
        super::network::check_resolution(p.image.width(), p.image.height())?;
    }
    Ok(())
}

#[derive(Default)]
struct Accumulator {
    sums: [f64; 5],
    seen: [bool; 4],
    steps: usize,
}

impl Accumulator {
    fn add<T: Scalar>(&mut self, b: &LossBreakdown<T>, n: usize) {
        let inv = 1.0 / n as f64;
        for (k, v) in [b.sfp, b.socp, b.mop, b.adversarial].into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[k] += v.f64() * inv;
                self.seen[k] = true;
            }
        }
        self.sums[4] += b.total.f64() * inv;
    }

    fn log(&self, epoch: usize) -> EpochLog {
        let n = self.steps.max(1) as f64;
        let term = |k: usize| self.seen[k].then(|| self.sums[k] / n);
        EpochLog { epoch, sfp: term(0), socp: term(1), mop: term(2), adversarial: term(3), total: self.sums[4] / n }
    }
}

/// Adam over shuffled mini-batches. Per-pair gradients run in parallel and
/// are summed in pair order, so results do not depend on the thread count.
pub fn train_generator<T: Scalar>(
    params: &mut GeneratorParams<T>,
    pairs: &[TrainingPair<T>],
    config: &GeneratorTrainConfig,
    weights: &LossWeights,
    backends: &Backends<T>,
) -> Result<GeneratorTrainReport, GeneratorError> {
    check_pairs(pairs)?;
    weights.validate()?;
    if config.batch_size == 0 || config.epochs == 0 || !(config.learning_rate > 0.0) {
        return Err(GeneratorError::InvalidConfig("batch size, epochs and learning rate must be positive".into()));
    }
    let targets: Vec<PairTargets<T>> =
        pairs.par_iter().map(|p| PairTargets::prepare(p, weights, config.socp_resolution, backends)).collect::<Result<_, _>>()?;
    let adversarial = weights.adversarial_enabled && weights.adversarial > 0.0;
    let mut critic = adversarial.then(|| Discriminator::init(derive_seed(config.seed, "critic"), config.learning_rate));
    let real: Vec<RasterImage<T>> = if adversarial {
        pairs
            .iter()
            .map(|p| Ok(rasterize(&adapt(&p.object, &p.layout)?, p.image.width(), config.stroke_width)?))
            .collect::<Result<_, GeneratorError>>()?
    } else {
        Vec::new()
    };

    let mut adam = Adam::new(AdamConfig { learning_rate: config.learning_rate, beta1: config.beta1, beta2: config.beta2, epsilon: config.epsilon });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "generator-batches"));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step_losses = Vec::new();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = Accumulator::default();
        for chunk in order.chunks(config.batch_size) {
            let frozen: &GeneratorParams<T> = params;
            let results: Vec<_> = chunk
                .par_iter()
                .map(|&k| pair_gradients(frozen, &pairs[k], &targets[k], weights, backends, critic.as_ref()))
                .collect::<Result<_, _>>()?;
            let norm = T::one() / T::of_usize(chunk.len());
            let mut grads: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
            let mut batch_total = 0.0;
            for (b, g) in &results {
                acc.add(b, chunk.len());
                batch_total += b.total.f64() / chunk.len() as f64;
                for (a, gi) in grads.iter_mut().zip(g) {
                    a.iter_mut().zip(gi).for_each(|(x, &y)| *x += y * norm);
                }
            }
            acc.steps += 1;
            step_losses.push(batch_total);
            if let Some(d) = critic.as_mut() {
                let frozen: &GeneratorParams<T> = params;
                let fake: Vec<RasterImage<T>> = chunk.iter().map(|&k| generate(&pairs[k].image, frozen)).collect::<Result<_, _>>()?;
                let real: Vec<RasterImage<T>> = chunk.iter().map(|&k| real[k].clone()).collect();
                d.update(&real, &fake);
            }
            let mut slots: Vec<&mut Tensor<T>> = params.tensors_mut().iter_mut().collect();
            adam.step(&mut slots, &grads);
        }
        let log = acc.log(epoch);
        log::debug!("generator epoch {epoch}: total {:.5}", log.total);
        epochs.push(log);
        if !params.is_finite() {
            return Err(GeneratorError::InvalidConfig(format!("parameters diverged in epoch {epoch}")));
        }
    }
    Ok(GeneratorTrainReport { step_losses, epochs, steps: adam.steps_taken() })
}
