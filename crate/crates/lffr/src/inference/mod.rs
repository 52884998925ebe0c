//! Confidence bands for scalar coefficient curves and coefficient surfaces:
//! analytic covariance propagation, cluster bootstrap, and
//! correlation-and-multiplicity-adjusted (CMA) critical values.

pub mod analytic;
pub mod bootstrap;
pub mod cma;

pub use analytic::{
    compute_pairwise, cov_beta_star, propagate_smoother_variance, var_gamma_raw,
    PairwiseCovariance,
};
pub use bootstrap::{bootstrap, bootstrap_variance, BootstrapEstimates};
pub use cma::{cma_critical_value, CmaSource};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided normal critical value for a coverage level.
pub fn normal_quantile(level: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(0.5 + level / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandKind {
    PointwiseAnalytic,
    PointwiseBootstrap,
    CmaAnalytic,
    CmaBootstrap,
}

impl BandKind {
    pub fn label(&self) -> &'static str {
        match self {
            BandKind::PointwiseAnalytic => "pointwise_analytic",
            BandKind::PointwiseBootstrap => "pointwise_bootstrap",
            BandKind::CmaAnalytic => "cma_analytic",
            BandKind::CmaBootstrap => "cma_bootstrap",
        }
    }
}

/// Estimates and band edges share one of two shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum BandData {
    Curve(DVector<f64>),
    Surface(DMatrix<f64>),
}

impl BandData {
    pub fn len(&self) -> usize {
        match self {
            BandData::Curve(v) => v.len(),
            BandData::Surface(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = f64> + '_> {
        match self {
            BandData::Curve(v) => Box::new(v.iter().copied()),
            BandData::Surface(m) => Box::new(m.iter().copied()),
        }
    }

    fn same_shape(&self, other: &BandData) -> bool {
        match (self, other) {
            (BandData::Curve(a), BandData::Curve(b)) => a.len() == b.len(),
            (BandData::Surface(a), BandData::Surface(b)) => a.shape() == b.shape(),
            _ => false,
        }
    }

    fn zip_map(&self, other: &BandData, f: impl Fn(f64, f64) -> f64) -> BandData {
        match (self, other) {
            (BandData::Curve(a), BandData::Curve(b)) => {
                BandData::Curve(DVector::from_fn(a.len(), |i, _| f(a[i], b[i])))
            }
            (BandData::Surface(a), BandData::Surface(b)) => BandData::Surface(DMatrix::from_fn(
                a.nrows(),
                a.ncols(),
                |i, j| f(a[(i, j)], b[(i, j)]),
            )),
            _ => unreachable!("shape checked by caller"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConfidenceBand {
    /// What the band is for, e.g. `beta_1` or `gamma_1`.
    pub name: String,
    pub estimate: BandData,
    pub lower: BandData,
    pub upper: BandData,
    pub level: f64,
    pub kind: BandKind,
    /// The multiplier on the pointwise standard error (z for pointwise
    /// bands, the adjusted quantile for CMA bands).
    pub critical_value: f64,
}

fn check_band_inputs(estimate: &BandData, variance: &BandData) -> Result<()> {
    if !estimate.same_shape(variance) {
        return Err(Error::ShapeMismatch(
            "estimate and variance shapes differ".to_string(),
        ));
    }
    for (index, v) in variance.iter().enumerate() {
        if v < 0.0 {
            return Err(Error::NegativeVariance { index, value: v });
        }
    }
    Ok(())
}

fn band_with_multiplier(
    name: &str,
    estimate: &BandData,
    variance: &BandData,
    multiplier: f64,
    level: f64,
    kind: BandKind,
) -> ConfidenceBand {
    let lower = estimate.zip_map(variance, |e, v| e - multiplier * v.sqrt());
    let upper = estimate.zip_map(variance, |e, v| e + multiplier * v.sqrt());
    ConfidenceBand {
        name: name.to_string(),
        estimate: estimate.clone(),
        lower,
        upper,
        level,
        kind,
        critical_value: multiplier,
    }
}

/// Pointwise bands: estimate ± z_{1−α/2} √variance.
pub fn pointwise_bands(
    name: &str,
    estimate: &BandData,
    variance: &BandData,
    level: f64,
    kind: BandKind,
) -> Result<ConfidenceBand> {
    check_band_inputs(estimate, variance)?;
    let z = normal_quantile(level);
    Ok(band_with_multiplier(name, estimate, variance, z, level, kind))
}

/// CMA bands: estimate ± q √variance. The critical value is floored at the
/// pointwise z so the CMA band always contains the pointwise band of the
/// same level.
pub fn cma_bands(
    name: &str,
    estimate: &BandData,
    variance: &BandData,
    q: f64,
    level: f64,
    kind: BandKind,
) -> Result<ConfidenceBand> {
    check_band_inputs(estimate, variance)?;
    let q_used = q.max(normal_quantile(level));
    Ok(band_with_multiplier(
        name, estimate, variance, q_used, level, kind,
    ))
}

/// Long-format CSV rows for a collection of bands over known grids.
pub fn write_bands_csv(
    path: &std::path::Path,
    bands: &[ConfidenceBand],
    grid_s: &DVector<f64>,
    grid_u: &[DVector<f64>],
) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "target,kind,level,s,u,estimate,lower,upper").map_err(|e| Error::io(path, e))?;
    for band in bands {
        match (&band.estimate, &band.lower, &band.upper) {
            (BandData::Curve(e), BandData::Curve(lo), BandData::Curve(hi)) => {
                for l in 0..e.len() {
                    writeln!(
                        file,
                        "{},{},{},{},,{},{},{}",
                        band.name,
                        band.kind.label(),
                        band.level,
                        grid_s[l],
                        e[l],
                        lo[l],
                        hi[l]
                    )
                    .map_err(|e| Error::io(path, e))?;
                }
            }
            (BandData::Surface(e), BandData::Surface(lo), BandData::Surface(hi)) => {
                // surfaces are named gamma_k; pick the matching predictor grid
                let k = band
                    .name
                    .rsplit('_')
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .map(|v| v - 1)
                    .unwrap_or(0);
                let gu = &grid_u[k.min(grid_u.len().saturating_sub(1))];
                for l in 0..e.ncols() {
                    for r in 0..e.nrows() {
                        writeln!(
                            file,
                            "{},{},{},{},{},{},{},{}",
                            band.name,
                            band.kind.label(),
                            band.level,
                            grid_s[l],
                            gu[r],
                            e[(r, l)],
                            lo[(r, l)],
                            hi[(r, l)]
                        )
                        .map_err(|e| Error::io(path, e))?;
                    }
                }
            }
            _ => unreachable!("band edges share the estimate shape"),
        }
    }
    Ok(())
}
