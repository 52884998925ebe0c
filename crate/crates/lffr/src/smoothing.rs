//! Univariate P-spline smoothing and the bivariate sandwich smoother.
//!
//! Both smoothers expose their smoother matrices explicitly so that variance
//! estimates can be propagated through the smoothing step.

use crate::basis::{bspline_design, bspline_uniform_knots, difference_penalty};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// 51-point log-spaced grid searched by GCV.
pub fn gcv_lambda_grid() -> Vec<f64> {
    (0..51)
        .map(|i| 10f64.powf(-8.0 + 16.0 * i as f64 / 50.0))
        .collect()
}

/// Explicit linear smoother S = B (BᵀB + λ PᵀP)⁻¹ Bᵀ with cubic B-splines
/// and a second-order difference penalty.
#[derive(Debug, Clone)]
pub struct SmootherMatrix {
    pub s: DMatrix<f64>,
    pub lambda: f64,
    pub n_knots: usize,
    /// Effective degrees of freedom, trace of S.
    pub edf: f64,
}

impl SmootherMatrix {
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.nrows() == 0
    }
}

/// Build the smoother matrix for a fixed smoothing parameter. The basis uses
/// equally spaced knots extended past the boundaries so the second-order
/// difference penalty exactly passes constants and straight lines through.
pub fn smoother_matrix(grid: &DVector<f64>, n_knots: usize, lambda: f64) -> Result<SmootherMatrix> {
    let l = grid.len();
    let n_basis = n_knots + 4;
    if l < n_basis {
        return Err(Error::TooFewPoints {
            len: l,
            required: n_basis,
        });
    }
    let knots = bspline_uniform_knots(grid[0], grid[l - 1], n_knots, 3);
    let b = &bspline_design(grid.as_slice(), &knots, 3);
    let penalty = difference_penalty(2, n_basis).values;
    let mut inner = b.transpose() * b;
    inner += &penalty * lambda;
    let chol = nalgebra::Cholesky::new(inner.clone()).ok_or_else(|| {
        Error::SingularCovariance("B'B + lambda P'P is not positive definite".to_string())
    })?;
    // one step of iterative refinement keeps the smoother accurate at the
    // extreme ends of the lambda grid
    let bt = b.transpose();
    let mut core = chol.solve(&bt);
    let residual = &bt - &inner * &core;
    core += chol.solve(&residual);
    let s = b * core;
    let edf = s.trace();
    Ok(SmootherMatrix {
        s,
        lambda,
        n_knots,
        edf,
    })
}

fn gcv_score(values: &DVector<f64>, sm: &SmootherMatrix) -> f64 {
    let l = values.len() as f64;
    let fitted = &sm.s * values;
    let rss = (values - fitted).norm_squared();
    let denom = 1.0 - sm.edf / l;
    if denom <= 1e-10 {
        f64::INFINITY
    } else {
        rss / (denom * denom)
    }
}

/// P-spline smoothing with GCV-selected λ over [`gcv_lambda_grid`].
pub fn psmooth(
    values: &DVector<f64>,
    grid: &DVector<f64>,
    n_knots: usize,
) -> Result<(DVector<f64>, SmootherMatrix)> {
    if values.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values on a grid of {}",
            values.len(),
            grid.len()
        )));
    }
    let mut best: Option<(f64, SmootherMatrix)> = None;
    for lambda in gcv_lambda_grid() {
        let sm = smoother_matrix(grid, n_knots, lambda)?;
        let score = gcv_score(values, &sm);
        if best.as_ref().map_or(true, |(s, _)| score < *s) {
            best = Some((score, sm));
        }
    }
    let (_, sm) = best.expect("non-empty lambda grid");
    let smoothed = &sm.s * values;
    Ok((smoothed, sm))
}

/// Bivariate sandwich smoother: Γ̃ = S₂ Γ̂ S₁ᵀ, the matrix form of
/// (S₁ ⊗ S₂) vec(Γ̂) under column-major stacking. λ is selected per
/// dimension by GCV on the corresponding marginal mean profile.
pub fn sandwich_smooth(
    gamma_hat: &DMatrix<f64>,
    grid_u: &DVector<f64>,
    grid_s: &DVector<f64>,
    knots_u: usize,
    knots_s: usize,
) -> Result<(DMatrix<f64>, SmootherMatrix, SmootherMatrix)> {
    let r = gamma_hat.nrows();
    let l = gamma_hat.ncols();
    if grid_u.len() != r || grid_s.len() != l {
        return Err(Error::ShapeMismatch(format!(
            "surface is {r}×{l}, grids have {} and {} points",
            grid_u.len(),
            grid_s.len()
        )));
    }
    // marginal profiles: mean over the other dimension
    let mean_over_u = DVector::from_fn(l, |j, _| gamma_hat.column(j).sum() / r as f64);
    let mean_over_s = DVector::from_fn(r, |i, _| gamma_hat.row(i).sum() / l as f64);
    let (_, s1) = psmooth(&mean_over_u, grid_s, knots_s)?;
    let (_, s2) = psmooth(&mean_over_s, grid_u, knots_u)?;
    let gamma_tilde = &s2.s * gamma_hat * s1.s.transpose();
    Ok((gamma_tilde, s1, s2))
}

/// Apply the sandwich with externally supplied smoother matrices.
pub fn sandwich_apply(
    gamma_hat: &DMatrix<f64>,
    s1: &SmootherMatrix,
    s2: &SmootherMatrix,
) -> DMatrix<f64> {
    &s2.s * gamma_hat * s1.s.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_grid(n: usize) -> DVector<f64> {
        DVector::from_fn(n, |i, _| i as f64 / (n - 1) as f64)
    }

    #[test]
    fn smoother_reproduces_constants() {
        let grid = unit_grid(30);
        for lambda in [0.0, 1.0, 1e6] {
            let sm = smoother_matrix(&grid, 8, lambda).unwrap();
            let ones = DVector::from_element(30, 1.0);
            assert!((&sm.s * &ones - &ones).amax() < 1e-10);
        }
    }

    #[test]
    fn linear_input_passes_through_for_any_lambda() {
        let grid = unit_grid(40);
        let values = grid.map(|x| 3.0 - 2.0 * x);
        for lambda in [1e-6, 1.0, 1e8] {
            let sm = smoother_matrix(&grid, 10, lambda).unwrap();
            let out = &sm.s * &values;
            assert!((&out - &values).amax() < 1e-8, "lambda {lambda}");
        }
    }

    #[test]
    fn huge_lambda_gives_least_squares_line() {
        let grid = unit_grid(35);
        let values = grid.map(|x| (6.0 * x).sin());
        let sm = smoother_matrix(&grid, 9, 1e8).unwrap();
        let out = &sm.s * &values;
        // least-squares straight line oracle
        let x_mean = grid.sum() / 35.0;
        let y_mean = values.sum() / 35.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..35 {
            num += (grid[i] - x_mean) * (values[i] - y_mean);
            den += (grid[i] - x_mean).powi(2);
        }
        let slope = num / den;
        let line = grid.map(|x| y_mean + slope * (x - x_mean));
        assert!((&out - &line).amax() < 1e-6);
    }

    #[test]
    fn gcv_beats_raw_values_on_noisy_sine() {
        let grid = unit_grid(50);
        let truth = grid.map(|x| (2.0 * std::f64::consts::PI * x).sin());
        let mut wins = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy =
                DVector::from_fn(50, |i, _| truth[i] + 0.1 * rng.sample::<f64, _>(StandardNormal));
            let (smoothed, _) = psmooth(&noisy, &grid, 10).unwrap();
            let mse_s = (&smoothed - &truth).norm_squared();
            let mse_raw = (&noisy - &truth).norm_squared();
            if mse_s <= mse_raw {
                wins += 1;
            }
        }
        assert!(wins >= 90, "GCV fit beat raw values in only {wins}/100 runs");
    }

    #[test]
    fn edf_nonincreasing_in_lambda() {
        let grid = unit_grid(30);
        let mut last = f64::INFINITY;
        for lambda in gcv_lambda_grid() {
            let sm = smoother_matrix(&grid, 8, lambda).unwrap();
            assert!(sm.edf <= last + 1e-9);
            assert!(sm.edf > 0.0 && sm.edf <= 30.0 + 1e-9);
            last = sm.edf;
        }
    }

    #[test]
    fn too_few_points_error() {
        let grid = unit_grid(10);
        assert!(matches!(
            smoother_matrix(&grid, 8, 1.0),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn saturated_basis_at_zero_lambda_interpolates() {
        let r = 10;
        let l = 12;
        let grid_u = unit_grid(r);
        let grid_s = unit_grid(l);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gamma = DMatrix::from_fn(r, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s1 = smoother_matrix(&grid_s, l - 4, 0.0).unwrap();
        let s2 = smoother_matrix(&grid_u, r - 4, 0.0).unwrap();
        let out = sandwich_apply(&gamma, &s1, &s2);
        assert!((&out - &gamma).amax() < 1e-8);
    }

    #[test]
    fn constant_surface_unchanged() {
        let grid_u = unit_grid(12);
        let grid_s = unit_grid(15);
        let gamma = DMatrix::from_element(12, 15, 4.25);
        let (out, _, _) = sandwich_smooth(&gamma, &grid_u, &grid_s, 5, 6).unwrap();
        assert!((&out - &gamma).amax() < 1e-10);
    }

    #[test]
    fn matrix_form_matches_explicit_kronecker() {
        let r = 6;
        let l = 5;
        let grid_u = unit_grid(r);
        let grid_s = unit_grid(l);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let gamma = DMatrix::from_fn(r, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s1 = smoother_matrix(&grid_s, 1, 0.37).unwrap();
        let s2 = smoother_matrix(&grid_u, 2, 1.21).unwrap();
        let out = sandwich_apply(&gamma, &s1, &s2);

        // explicit Kronecker-product oracle on vec(Γ̂)
        let kron = s1.s.kronecker(&s2.s);
        let vec_g = DVector::from_fn(r * l, |idx, _| gamma[(idx % r, idx / r)]);
        let vec_out = kron * vec_g;
        for j in 0..l {
            for i in 0..r {
                assert!((out[(i, j)] - vec_out[j * r + i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sandwich_is_linear_for_fixed_smoothers() {
        let r = 8;
        let l = 9;
        let grid_u = unit_grid(r);
        let grid_s = unit_grid(l);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g1 = DMatrix::from_fn(r, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g2 = DMatrix::from_fn(r, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s1 = smoother_matrix(&grid_s, 3, 0.8).unwrap();
        let s2 = smoother_matrix(&grid_u, 3, 0.2).unwrap();
        let lhs = sandwich_apply(&(&g1 * 2.0 + &g2 * -3.0), &s1, &s2);
        let rhs = sandwich_apply(&g1, &s1, &s2) * 2.0 + sandwich_apply(&g2, &s1, &s2) * -3.0;
        assert!((lhs - rhs).amax() < 1e-10);
    }
}
