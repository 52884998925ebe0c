//! Synthetic longitudinal functional data and evaluation metrics.
//!
//! Outcomes are generated on equally spaced grids of [0, 1] as
//! Y_ij(s) = β₀(s) + β₁(s)X_ij + u_i(s) + ∫ W_ij(u)γ(s,u)du + ε_ij(s),
//! with scalar covariates drawn from N(0, 25), functional predictors drawn
//! from a cubic B-spline basis with standard-normal coefficients, and
//! subject effects spanned by two orthonormalized trigonometric curves. Two
//! signal-to-noise ratios control the random-effect scale and the residual
//! standard deviation, both calibrated on the realized draws.

mod study;

pub use study::{
    load_study_config, run_study, MethodsConfig, ReplicateRow, ScenarioAggregate, ScenarioConfig,
    StudyConfig, StudyReport,
};

use crate::basis::bspline_basis;
use crate::data::FunctionalDataset;
use crate::error::{Error, Result};
use crate::inference::{BandData, ConfidenceBand};
use crate::quad::{inner_product, trapezoid_weights};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Closed-form coefficient curves available to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveSpec {
    /// −0.15 − 0.1 sin(2πs) − 0.1 cos(2πs)
    TrigIntercept,
    /// (1/20) φ((s − 0.6)/0.0225) with φ the standard normal density
    GaussianBump,
    Zero,
    Constant(f64),
}

impl CurveSpec {
    pub fn evaluate(&self, s: f64) -> f64 {
        match self {
            CurveSpec::TrigIntercept => {
                -0.15 - 0.1 * (2.0 * PI * s).sin() - 0.1 * (2.0 * PI * s).cos()
            }
            CurveSpec::GaussianBump => {
                let z = (s - 0.6) / 0.0225;
                (1.0 / 20.0) * (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
            }
            CurveSpec::Zero => 0.0,
            CurveSpec::Constant(c) => *c,
        }
    }
}

/// Closed-form coefficient surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurfaceSpec {
    /// 5 sin(0.5π(s + 0.5)²) · cos(πu + 0.5)
    SineCosine,
    Zero,
}

impl SurfaceSpec {
    pub fn evaluate(&self, s: f64, u: f64) -> f64 {
        match self {
            SurfaceSpec::SineCosine => {
                5.0 * (0.5 * PI * (s + 0.5) * (s + 0.5)).sin() * (PI * u + 0.5).cos()
            }
            SurfaceSpec::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub beta0: CurveSpec,
    pub beta1: CurveSpec,
    pub gamma: SurfaceSpec,
}

impl Default for TruthSpec {
    fn default() -> Self {
        TruthSpec {
            beta0: CurveSpec::TrigIntercept,
            beta1: CurveSpec::GaussianBump,
            gamma: SurfaceSpec::SineCosine,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of subjects I.
    pub subjects: usize,
    /// Visits per subject (the mean when `poisson_visits` is set).
    pub mean_visits: usize,
    /// Outcome grid length L.
    pub grid_s: usize,
    /// Predictor grid length U.
    pub grid_u: usize,
    /// sd(fixed-effect functions) / sd(random-effect functions).
    pub snr_b: f64,
    /// sd(linear predictor) / sd(residuals).
    pub snr_eps: f64,
    pub seed: u64,
    /// Draw J_i ~ 1 + Poisson(mean_visits − 1) instead of a fixed count.
    #[serde(default)]
    pub poisson_visits: bool,
    #[serde(default)]
    pub truth: TruthSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            subjects: 100,
            mean_visits: 5,
            grid_s: 25,
            grid_u: 25,
            snr_b: 0.5,
            snr_eps: 1.5,
            seed: 0,
            poisson_visits: false,
            truth: TruthSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects < 2 || self.mean_visits < 1 {
            return Err(Error::InvalidConfig(
                "subjects must be >= 2 and mean_visits >= 1".to_string(),
            ));
        }
        if self.grid_s < 4 || self.grid_u < 4 {
            return Err(Error::InvalidConfig(
                "grid lengths must be at least 4".to_string(),
            ));
        }
        if !(self.snr_b > 0.0) {
            return Err(Error::InvalidConfig("snr_b must be positive".to_string()));
        }
        if !(self.snr_eps > 0.0) {
            return Err(Error::InvalidConfig("snr_eps must be positive".to_string()));
        }
        Ok(())
    }
}

/// True coefficients and realized subject effects behind a generated dataset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub beta0: DVector<f64>,
    pub beta1: DVector<f64>,
    /// U × L surface, column l over the predictor grid.
    pub gamma: DMatrix<f64>,
    /// I × L realized subject random-effect curves (after scaling).
    pub random_effects: DMatrix<f64>,
    pub sigma_eps: f64,
}

fn unit_grid(n: usize) -> DVector<f64> {
    DVector::from_fn(n, |i, _| i as f64 / (n - 1) as f64)
}

/// Evaluate the closed-form coefficients on the grids.
pub fn true_coefficients(
    grid_s: &DVector<f64>,
    grid_u: &DVector<f64>,
    truth: &TruthSpec,
) -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
    let beta0 = grid_s.map(|s| truth.beta0.evaluate(s));
    let beta1 = grid_s.map(|s| truth.beta1.evaluate(s));
    let gamma = DMatrix::from_fn(grid_u.len(), grid_s.len(), |r, l| {
        truth.gamma.evaluate(grid_s[l], grid_u[r])
    });
    (beta0, beta1, gamma)
}

/// The two subject-effect directions, orthonormalized under the trapezoid
/// inner product on the outcome grid.
fn subject_effect_basis(grid_s: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let mut psi1 = grid_s.map(|s| 1.5 - (2.0 * PI * s).sin() - (2.0 * PI * s).cos());
    let n1 = inner_product(&psi1, &psi1, grid_s).sqrt();
    psi1 /= n1;
    let mut psi2 = grid_s.map(|s| (4.0 * PI * s).sin());
    let proj = inner_product(&psi2, &psi1, grid_s);
    psi2 -= &psi1 * proj;
    let n2 = inner_product(&psi2, &psi2, grid_s).sqrt();
    psi2 /= n2;
    (psi1, psi2)
}

fn sample_sd(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    let vals: Vec<f64> = values.collect();
    debug_assert_eq!(vals.len(), n);
    let mean = vals.iter().sum::<f64>() / n as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Generate a dataset together with its ground truth.
pub fn generate_dataset(cfg: &SimConfig) -> Result<(FunctionalDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid_s = unit_grid(cfg.grid_s);
    let grid_u = unit_grid(cfg.grid_u);
    let l = cfg.grid_s;
    let u_len = cfg.grid_u;

    // visits per subject
    let visits: Vec<usize> = if cfg.poisson_visits {
        let poisson = Poisson::new((cfg.mean_visits.max(2) - 1) as f64)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        (0..cfg.subjects)
            .map(|_| 1 + rng.sample(poisson) as usize)
            .collect()
    } else {
        vec![cfg.mean_visits; cfg.subjects]
    };
    let n: usize = visits.iter().sum();

    let mut subject_id = Vec::with_capacity(n);
    let mut visit_id = Vec::with_capacity(n);
    for (i, &ji) in visits.iter().enumerate() {
        for j in 0..ji {
            subject_id.push(i as i64 + 1);
            visit_id.push(j as i64 + 1);
        }
    }

    // scalar covariates: intercept plus N(0, 25)
    let mut x = DMatrix::zeros(n, 2);
    for r in 0..n {
        x[(r, 0)] = 1.0;
        x[(r, 1)] = 5.0 * rng.sample::<f64, _>(StandardNormal);
    }

    // functional predictors from a cubic B-spline basis with 5 interior
    // knots (fewer when the grid is too short to support them)
    let interior = 5.min(u_len.saturating_sub(4));
    let predictor_basis = bspline_basis(&grid_u, interior, 3)?;
    let n_coef = predictor_basis.n_basis();
    let mut w = DMatrix::zeros(n, u_len);
    for r in 0..n {
        let coefs = DVector::from_fn(n_coef, |_, _| rng.sample::<f64, _>(StandardNormal));
        let curve = &predictor_basis.values * coefs;
        for c in 0..u_len {
            w[(r, c)] = curve[c];
        }
    }

    // subject effects on two orthonormal directions
    let (psi1, psi2) = subject_effect_basis(&grid_s);
    let mut u_raw = DMatrix::zeros(cfg.subjects, l);
    for i in 0..cfg.subjects {
        let c1 = 3.0f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let c2 = 1.5f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
        for c in 0..l {
            u_raw[(i, c)] = c1 * psi1[c] + c2 * psi2[c];
        }
    }

    let (beta0, beta1, gamma) = true_coefficients(&grid_s, &grid_u, &cfg.truth);

    // fixed-effect part, with the functional term by trapezoid quadrature
    let wq = trapezoid_weights(&grid_u);
    let gamma_weighted = DMatrix::from_fn(u_len, l, |r, c| gamma[(r, c)] * wq[r]);
    let integral = &w * &gamma_weighted; // N × L
    let mut fixed = DMatrix::zeros(n, l);
    for r in 0..n {
        for c in 0..l {
            fixed[(r, c)] = beta0[c] + beta1[c] * x[(r, 1)] + integral[(r, c)];
        }
    }

    // scale the subject effects so sd(fixed)/sd(random) hits snr_b
    let sd_fixed = sample_sd(fixed.iter().copied(), n * l);
    let subject_of_row: Vec<usize> = subject_id.iter().map(|&id| id as usize - 1).collect();
    let sd_rand = sample_sd(
        (0..n).flat_map(|r| (0..l).map(move |c| (r, c))).map(|(r, c)| {
            u_raw[(subject_of_row[r], c)]
        }),
        n * l,
    );
    let kappa = sd_fixed / (cfg.snr_b * sd_rand);
    let random_effects = &u_raw * kappa;

    // linear predictor and residual scale from the realized draws
    let mut eta = fixed;
    for r in 0..n {
        for c in 0..l {
            eta[(r, c)] += random_effects[(subject_of_row[r], c)];
        }
    }
    let sigma_eps = sample_sd(eta.iter().copied(), n * l) / cfg.snr_eps;

    let mut y = eta;
    for r in 0..n {
        for c in 0..l {
            y[(r, c)] += sigma_eps * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let dataset = FunctionalDataset {
        subject_id,
        visit_id,
        y,
        x,
        z: DMatrix::from_element(n, 1, 1.0),
        w: vec![w],
        grid_s,
        grid_u: vec![grid_u],
    };
    dataset.validate()?;
    Ok((
        dataset,
        GroundTruth {
            beta0,
            beta1,
            gamma,
            random_effects,
            sigma_eps,
        },
    ))
}

/// ∫ (est − truth)² over the grid domain.
pub fn ise_scalar(est: &DVector<f64>, truth: &DVector<f64>, grid: &DVector<f64>) -> Result<f64> {
    if est.len() != truth.len() || est.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "lengths {} / {} / {}",
            est.len(),
            truth.len(),
            grid.len()
        )));
    }
    let w = trapezoid_weights(grid);
    Ok((0..est.len())
        .map(|i| w[i] * (est[i] - truth[i]).powi(2))
        .sum())
}

/// ∫∫ (est − truth)² over the product domain; rows run over `grid_u`.
pub fn ise_surface(
    est: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    grid_u: &DVector<f64>,
    grid_s: &DVector<f64>,
) -> Result<f64> {
    if est.shape() != truth.shape() || est.nrows() != grid_u.len() || est.ncols() != grid_s.len() {
        return Err(Error::ShapeMismatch(format!(
            "surface {:?} vs truth {:?} on {}×{} grids",
            est.shape(),
            truth.shape(),
            grid_u.len(),
            grid_s.len()
        )));
    }
    let wu = trapezoid_weights(grid_u);
    let ws = trapezoid_weights(grid_s);
    let mut acc = 0.0;
    for r in 0..est.nrows() {
        for c in 0..est.ncols() {
            acc += wu[r] * ws[c] * (est[(r, c)] - truth[(r, c)]).powi(2);
        }
    }
    Ok(acc)
}

/// Fraction of grid points where lower ≤ truth ≤ upper (closed interval:
/// boundary values count as covered).
pub fn coverage(band: &ConfidenceBand, truth: &BandData) -> Result<f64> {
    let n = band.estimate.len();
    if truth.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "band has {n} points, truth has {}",
            truth.len()
        )));
    }
    let mut covered = 0usize;
    for ((lo, hi), t) in band
        .lower
        .iter()
        .zip(band.upper.iter())
        .zip(truth.iter())
    {
        if lo <= t && t <= hi {
            covered += 1;
        }
    }
    Ok(covered as f64 / n as f64)
}
