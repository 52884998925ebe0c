//! Correlation-and-multiplicity-adjusted critical values.
//!
//! The CMA quantile is the (1−α) empirical quantile of the standardized
//! maximum deviation over the domain, taken either from multivariate normal
//! samples of the estimate (analytic) or from bootstrap replicates.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Source of the max-statistic samples.
pub enum CmaSource<'a> {
    /// Sample the estimate from a normal model. With `joint` set the draws
    /// come from the full cross-location covariance; otherwise each point is
    /// sampled independently from its marginal (the literal algorithmic
    /// variant), which ignores cross-location correlation.
    AnalyticMc {
        covariance: &'a DMatrix<f64>,
        n_samples: usize,
        seed: u64,
        joint: bool,
    },
    /// Bootstrap replicates of the (flattened) estimate.
    Bootstrap { replicates: &'a [DVector<f64>] },
}

fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((n as f64 * p).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Square root factor of a PSD matrix via eigenvalue trimming.
fn psd_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance(
            "covariance contains non-finite entries".to_string(),
        ));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let n = cov.nrows();
    let mut root = DMatrix::zeros(n, n);
    for k in 0..n {
        let ev = eig.eigenvalues[k].max(0.0).sqrt();
        for i in 0..n {
            root[(i, k)] = eig.eigenvectors[(i, k)] * ev;
        }
    }
    Ok(root)
}

/// CMA critical value for a (flattened) estimate over its domain.
pub fn cma_critical_value(
    estimate: &DVector<f64>,
    variance: &DVector<f64>,
    source: CmaSource<'_>,
    level: f64,
) -> Result<f64> {
    let m = estimate.len();
    if variance.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {m} points, variance has {}",
            variance.len()
        )));
    }
    let sd: Vec<f64> = variance.iter().map(|&v| v.max(0.0).sqrt()).collect();

    let mut stats: Vec<f64> = match source {
        CmaSource::AnalyticMc {
            covariance,
            n_samples,
            seed,
            joint,
        } => {
            if n_samples < 2 {
                return Err(Error::InvalidConfig(
                    "analytic CMA needs at least 2 samples".to_string(),
                ));
            }
            if covariance.nrows() != m || covariance.ncols() != m {
                return Err(Error::DimensionMismatch(format!(
                    "covariance is {}×{} for {m} points",
                    covariance.nrows(),
                    covariance.ncols()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if joint {
                let root = psd_sqrt(covariance)?;
                (0..n_samples)
                    .map(|_| {
                        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                        let x = &root * z;
                        max_standardized(&x, &sd)
                    })
                    .collect()
            } else {
                (0..n_samples)
                    .map(|_| {
                        let x = DVector::from_fn(m, |i, _| {
                            sd[i] * rng.sample::<f64, _>(StandardNormal)
                        });
                        max_standardized(&x, &sd)
                    })
                    .collect()
            }
        }
        CmaSource::Bootstrap { replicates } => {
            if replicates.len() < 2 {
                return Err(Error::InvalidConfig(
                    "bootstrap CMA needs at least 2 replicates".to_string(),
                ));
            }
            replicates
                .iter()
                .map(|rep| {
                    let dev = rep - estimate;
                    max_standardized(&dev, &sd)
                })
                .collect()
        }
    };
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(empirical_quantile(&stats, level))
}

fn max_standardized(deviation: &DVector<f64>, sd: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for (i, &s) in sd.iter().enumerate() {
        if s > 0.0 {
            best = best.max(deviation[i].abs() / s);
        }
    }
    best
}
