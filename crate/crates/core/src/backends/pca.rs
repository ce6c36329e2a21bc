use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::autodiff::{Tape, Var};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::Scalar;

/// Principal axes of a feature set with the projected range of the fitting
/// data, used to map projections into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjector<T> {
    pub mean: Vec<T>,
    /// `k × d`, one unit component per row, by decreasing variance.
    pub components: Matrix<T>,
    pub explained_variance: Vec<T>,
    pub total_variance: T,
    pub min: Vec<T>,
    pub max: Vec<T>,
}

impl<T: Scalar> PcaProjector<T> {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn dim(&self) -> usize {
        self.components.cols()
    }

    /// Components with a projected range too small to normalise.
    fn is_degenerate(&self, c: usize) -> bool {
        let range = self.max[c] - self.min[c];
        !(range > T::epsilon() * T::of(64.0) * (T::one() + self.max[c].abs().max(self.min[c].abs())))
    }

    /// Raw centred projection `(X − μ) Cᵀ`.
    pub fn scores(&self, features: &Matrix<T>) -> Result<Matrix<T>, BackendError> {
        self.check(features.cols())?;
        let centered = Matrix::from_fn(features.rows(), features.cols(), |i, j| features[(i, j)] - self.mean[j]);
        Ok(centered.matmul(&self.components.transpose()))
    }

    fn check(&self, d: usize) -> Result<(), BackendError> {
        if d != self.dim() {
            return Err(BackendError::DimensionMismatch(format!("features of width {d}, projector fitted on width {}", self.dim())));
        }
        Ok(())
    }

    /// Affine map `x ↦ x W + b` equal to the normalised projection before
    /// clamping; degenerate components map to 0.
    fn normalizing_affine(&self) -> (Matrix<T>, Vec<T>) {
        let (k, d) = (self.k(), self.dim());
        let mut w = Matrix::zeros(d, k);
        let mut b = vec![T::zero(); k];
        for c in 0..k {
            if self.is_degenerate(c) {
                continue;
            }
            let inv = T::one() / (self.max[c] - self.min[c]);
            let mut offset = T::zero();
            for j in 0..d {
                w[(j, c)] = self.components[(c, j)] * inv;
                offset += self.mean[j] * self.components[(c, j)];
            }
            b[c] = -(offset + self.min[c]) * inv;
        }
        (w, b)
    }

    /// Normalised, clamped projection of a `[n, d]` tape tensor.
    pub fn project_on_tape(&self, tape: &Tape<T>, features: Var) -> Result<Var, BackendError> {
        let shape = tape.shape(features);
        self.check(*shape.last().unwrap_or(&0))?;
        let (w, b) = self.normalizing_affine();
        let wv = tape.constant(w.into_vec(), &[self.dim(), self.k()]);
        let bv = tape.constant(b, &[self.k()]);
        let y = tape.add_row_bias(tape.matmul(features, wv), bv);
        Ok(tape.clamp(y, T::zero(), T::one()))
    }
}

/// Fits the top-`k` principal components of the rows of `features`
/// (unbiased covariance).
pub fn pca_fit<T: Scalar>(features: &Matrix<T>, k: usize) -> Result<PcaProjector<T>, BackendError> {
    let (n, d) = features.shape();
    if n < 2 {
        return Err(BackendError::TooFewSamples { needed: 2, found: n });
    }
    if k == 0 || k > d {
        return Err(BackendError::DimensionMismatch(format!("cannot keep {k} components of {d}-dimensional features")));
    }
    let mean = features.column_mean();
    let cov = features.covariance(1);
    let eig = symmetric_eigen(&cov);
    let components = Matrix::from_fn(k, d, |c, j| eig.vectors[(j, c)]);
    let explained_variance = eig.values[..k].iter().map(|&v| v.max(T::zero())).collect();
    let total_variance = cov.trace();
    let mut p = PcaProjector { mean, components, explained_variance, total_variance, min: vec![T::zero(); k], max: vec![T::zero(); k] };
    let scores = p.scores(features)?;
    for c in 0..k {
        let col = scores.column(c);
        p.min[c] = col.iter().copied().fold(T::infinity(), T::min);
        p.max[c] = col.iter().copied().fold(T::neg_infinity(), T::max);
    }
    Ok(p)
}

/// Projection onto the fitted components, min/max normalised with the
/// fitted ranges and clamped to `[0, 1]`.
pub fn pca_project<T: Scalar>(projector: &PcaProjector<T>, features: &Matrix<T>) -> Result<Matrix<T>, BackendError> {
    projector.check(features.cols())?;
    let (w, b) = projector.normalizing_affine();
    let mut y = features.matmul(&w);
    for i in 0..y.rows() {
        for (v, &bc) in y.row_mut(i).iter_mut().zip(&b) {
            *v = (*v + bc).max(T::zero()).min(T::one());
        }
    }
    Ok(y)
}
