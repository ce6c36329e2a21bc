//! Fréchet distance between feature Gaussians and the Inception Score,
//! over features and class probabilities supplied by any backend.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{sqrt_psd, symmetric_eigen, Matrix};
use crate::Scalar;

/// Eigenvalues of the covariance product below this are treated as
/// numerical noise and clipped to zero; anything more negative is logged.
const NEGATIVE_EIGEN_TOLERANCE: f64 = -1e-8;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least {needed} samples, got {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("invalid probability rows: {0}")]
    InvalidDistribution(String),
    #[error("features contain non-finite values")]
    NonFinite,
    #[error("could not write {path}: {message}")]
    Io { path: String, message: String },
}

/// Per-image features, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    pub features: Matrix<T>,
    pub backend: String,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn new(features: Matrix<T>, backend: impl Into<String>) -> Result<Self, MetricsError> {
        if features.rows() < 2 {
            return Err(MetricsError::TooFewSamples { needed: 2, found: features.rows() });
        }
        if !features.is_finite() {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self { features, backend: backend.into() })
    }

    pub fn from_rows(rows: &[Vec<T>], backend: impl Into<String>) -> Result<Self, MetricsError> {
        if let Some(bad) = rows.iter().find(|r| r.len() != rows[0].len()) {
            return Err(MetricsError::DimensionMismatch(format!("rows of width {} and {}", rows[0].len(), bad.len())));
        }
        if rows.is_empty() {
            return Err(MetricsError::TooFewSamples { needed: 2, found: 0 });
        }
        Self::new(Matrix::from_rows(rows), backend)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Per-image class probabilities, one row each.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilitySet<T> {
    pub probs: Matrix<T>,
}

impl<T: Scalar> ProbabilitySet<T> {
    pub fn new(probs: Matrix<T>) -> Result<Self, MetricsError> {
        if probs.rows() == 0 || probs.cols() == 0 {
            return Err(MetricsError::InvalidDistribution("empty probability matrix".into()));
        }
        for i in 0..probs.rows() {
            let row = probs.row(i);
            if row.iter().any(|&p| !p.is_finite() || p < T::zero()) {
                return Err(MetricsError::InvalidDistribution(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs().f64() > 1e-6 {
                return Err(MetricsError::InvalidDistribution(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, MetricsError> {
        if let Some(bad) = rows.iter().find(|r| r.len() != rows[0].len()) {
            return Err(MetricsError::InvalidDistribution(format!("rows of width {} and {}", rows[0].len(), bad.len())));
        }
        if rows.is_empty() {
            return Err(MetricsError::InvalidDistribution("empty probability matrix".into()));
        }
        Self::new(Matrix::from_rows(rows))
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^½)` with unbiased covariances.
pub fn frechet_distance<T: Scalar>(a: &FeatureSet<T>, b: &FeatureSet<T>) -> Result<T, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch(format!("feature widths {} and {}", a.dim(), b.dim())));
    }
    for s in [a, b] {
        if s.len() < 2 {
            return Err(MetricsError::TooFewSamples { needed: 2, found: s.len() });
        }
    }
    let (mu_a, mu_b) = (a.features.column_mean(), b.features.column_mean());
    let mean_term: T = mu_a.iter().zip(&mu_b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    let (cov_a, cov_b) = (a.features.covariance(1), b.features.covariance(1));
    // Tr((Σ_a Σ_b)^½) = Tr((Σ_a^½ Σ_b Σ_a^½)^½), whose argument is symmetric
    let root_a = sqrt_psd(&cov_a);
    let inner = root_a.matmul(&cov_b).matmul(&root_a);
    let eig = symmetric_eigen(&inner);
    let mut cross = T::zero();
    for &l in &eig.values {
        if l.f64() < NEGATIVE_EIGEN_TOLERANCE {
            log::warn!("covariance product has eigenvalue {l}, clipped to zero");
        }
        cross += l.max(T::zero()).sqrt();
    }
    let d = mean_term + cov_a.trace() + cov_b.trace() - T::of(2.0) * cross;
    Ok(d.max(T::zero()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InceptionScore {
    pub mean: f64,
    pub std: f64,
}

/// Inception Score over `splits` contiguous chunks; `std` is the population
/// deviation across splits.
pub fn inception_score<T: Scalar>(p: &ProbabilitySet<T>, splits: usize) -> Result<InceptionScore, MetricsError> {
    let n = p.probs.rows();
    if splits == 0 || n < splits {
        return Err(MetricsError::InvalidDistribution(format!("cannot split {n} rows into {splits} parts")));
    }
    let c = p.classes();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
        let rows = hi - lo;
        let mut marginal = vec![0.0; c];
        for i in lo..hi {
            for (m, &v) in marginal.iter_mut().zip(p.probs.row(i)) {
                *m += v.f64() / rows as f64;
            }
        }
        let mut kl = 0.0;
        for i in lo..hi {
            for (&v, &m) in p.probs.row(i).iter().zip(&marginal) {
                let v = v.f64();
                if v > 0.0 {
                    kl += v * (v.ln() - m.ln());
                }
            }
        }
        scores.push((kl / rows as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok(InceptionScore { mean, std: var.sqrt() })
}

/// Softmax over scaled cosine similarities between unit image embeddings
/// (rows) and unit class embeddings (rows): a zero-shot classifier.
pub fn zero_shot_probabilities<T: Scalar>(images: &Matrix<T>, classes: &Matrix<T>, temperature: T) -> Result<ProbabilitySet<T>, MetricsError> {
    if images.cols() != classes.cols() {
        return Err(MetricsError::DimensionMismatch(format!("image width {} and class width {}", images.cols(), classes.cols())));
    }
    let mut logits = images.matmul(&classes.transpose());
    for i in 0..logits.rows() {
        let row = logits.row_mut(i);
        let top = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - top) / temperature).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    ProbabilitySet::new(logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub backend: String,
    pub n: usize,
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,value,backend,n\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.metric, r.value, r.backend, r.n);
    }
    out
}

pub fn write_report(rows: &[MetricRow], path: &Path) -> Result<(), MetricsError> {
    std::fs::write(path, report_csv(rows)).map_err(|e| MetricsError::Io { path: path.display().to_string(), message: e.to_string() })
}
