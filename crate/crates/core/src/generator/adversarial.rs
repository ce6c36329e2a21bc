use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::optim::{Adam, AdamConfig};
use crate::sketch::RasterImage;
use crate::tensor::Tensor;
use crate::Scalar;

/// Small patch critic over ink maps with a least-squares objective. Real
/// samples are rendered adapted object sketches.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    tensors: Vec<Tensor<T>>,
    adam: Adam<T>,
}

const WIDTH: usize = 8;

impl<T: Scalar> Discriminator<T> {
    pub fn init(seed: u64, learning_rate: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = vec![
            Tensor::randn(&[WIDTH, 1, 4, 4], (2.0f64 / 16.0).sqrt(), &mut rng),
            Tensor::zeros(&[WIDTH]),
            Tensor::randn(&[1, WIDTH, 4, 4], (1.0 / (16.0 * WIDTH as f64)).sqrt(), &mut rng),
            Tensor::zeros(&[1]),
        ];
        Self { tensors, adam: Adam::new(AdamConfig { learning_rate, beta1: 0.5, ..AdamConfig::default() }) }
    }

    fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| t.on_tape(tape, trainable)).collect()
    }

    fn score(tape: &Tape<T>, v: &[Var], ink: Var) -> Var {
        let h = tape.relu(tape.conv2d(ink, v[0], v[1], 2, 1));
        tape.conv2d(h, v[2], v[3], 2, 1)
    }

    /// `mean((D(fake) − 1)²)` with the critic held fixed.
    pub(crate) fn generator_term(&self, tape: &Tape<T>, ink: Var) -> Var {
        let v = self.bind(tape, false);
        tape.mean(tape.square(tape.add_scalar(Self::score(tape, &v, ink), -T::one())))
    }

    /// One critic update on `mean((D(real) − 1)²) + mean(D(fake)²)`, averaged
    /// over the batch. Returns the critic loss before the update.
    pub fn update(&mut self, real: &[RasterImage<T>], fake: &[RasterImage<T>]) -> T {
        let mut grads: Vec<Vec<T>> = self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
        let mut total = T::zero();
        let n = T::of_usize(real.len().max(1));
        for (r, f) in real.iter().zip(fake) {
            let tape = Tape::new();
            let v = self.bind(&tape, true);
            let as_var = |img: &RasterImage<T>| tape.constant(img.data().to_vec(), &[1, img.height(), img.width()]);
            let real_term = tape.mean(tape.square(tape.add_scalar(Self::score(&tape, &v, as_var(r)), -T::one())));
            let fake_term = tape.mean(tape.square(Self::score(&tape, &v, as_var(f))));
            let loss = tape.add(real_term, fake_term);
            total += tape.scalar(loss);
            let g = tape.backward(loss);
            for (acc, &var) in grads.iter_mut().zip(&v) {
                for (a, b) in acc.iter_mut().zip(g.get_or_zeros(var, tape.value(var).len())) {
                    *a += b / n;
                }
            }
        }
        let mut params: Vec<&mut Tensor<T>> = self.tensors.iter_mut().collect();
        self.adam.step(&mut params, &grads);
        total / n
    }
}
