//! Spline bases and penalty matrices.
//!
//! Two basis families are used by the pipeline: cubic B-splines (predictor
//! simulation, univariate and bivariate smoothers) and a degree-1 truncated
//! power basis (coefficient functions of the functional predictors, whose
//! first two coefficients stay unpenalized).

use crate::error::{Error, Result};
use crate::quad::weighted_cross_product;
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    BSpline { degree: usize },
    TruncatedPower,
}

/// Basis functions evaluated on a grid, one column per basis function.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub kind: BasisKind,
    /// Full knot vector for B-splines (clamped); interior knots for the
    /// truncated power basis.
    pub knots: DVector<f64>,
}

impl BasisMatrix {
    pub fn n_basis(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    /// Zero block on unpenalized coefficients, identity on the rest.
    BlockZeroIdentity,
    /// PᵀP for a difference operator P of the given order.
    Difference(usize),
}

#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    pub values: DMatrix<f64>,
    pub kind: PenaltyKind,
}

/// Clamped knot vector with interior knots at equally spaced quantiles of the
/// grid and boundary knots repeated `degree + 1` times.
pub fn bspline_knots(grid: &DVector<f64>, n_interior: usize, degree: usize) -> DVector<f64> {
    let n = grid.len();
    let lo = grid[0];
    let hi = grid[n - 1];
    let mut knots = Vec::with_capacity(n_interior + 2 * (degree + 1));
    for _ in 0..=degree {
        knots.push(lo);
    }
    for j in 1..=n_interior {
        let p = j as f64 / (n_interior + 1) as f64;
        // type-7 quantile of the grid values
        let h = p * (n - 1) as f64;
        let i = h.floor() as usize;
        let frac = h - i as f64;
        let q = if i + 1 < n {
            grid[i] * (1.0 - frac) + grid[i + 1] * frac
        } else {
            grid[n - 1]
        };
        knots.push(q);
    }
    for _ in 0..=degree {
        knots.push(hi);
    }
    DVector::from_vec(knots)
}

/// Evaluate all B-spline basis functions defined by a clamped knot vector at
/// arbitrary points (Cox–de Boor recursion). The right boundary is treated as
/// part of the last span so the basis partitions unity on the closed domain.
pub fn bspline_design(points: &[f64], knots: &DVector<f64>, degree: usize) -> DMatrix<f64> {
    let n_basis = knots.len() - degree - 1;
    let mut out = DMatrix::zeros(points.len(), n_basis);
    let t = knots.as_slice();
    let t_max = t[t.len() - 1];

    for (row, &x) in points.iter().enumerate() {
        // Locate the knot span [t_k, t_{k+1}) containing x.
        let k = if x >= t_max {
            // last non-empty span
            let mut k = n_basis - 1;
            while k > 0 && t[k] >= t[k + 1] {
                k -= 1;
            }
            k
        } else {
            let mut k = degree;
            while k + 1 < n_basis && x >= t[k + 1] {
                k += 1;
            }
            k
        };

        // de Boor's algorithm for the nonzero functions on this span.
        let mut vals = vec![0.0; degree + 1];
        vals[0] = 1.0;
        for d in 1..=degree {
            let mut saved = 0.0;
            for r in 0..d {
                let left = t[k + 1 + r - d];
                let right = t[k + 1 + r];
                let denom = right - left;
                let term = if denom > 0.0 { vals[r] / denom } else { 0.0 };
                vals[r] = saved + (right - x) * term;
                saved = (x - left) * term;
            }
            vals[d] = saved;
        }
        for (j, &v) in vals.iter().enumerate() {
            let col = k - degree + j;
            if col < n_basis {
                out[(row, col)] = v;
            }
        }
    }
    out
}

/// Equally spaced knots extended `degree` intervals beyond each boundary,
/// the classic penalized-spline construction: difference penalties on the
/// coefficients then have exact polynomial null spaces on the data range.
pub fn bspline_uniform_knots(lo: f64, hi: f64, n_interior: usize, degree: usize) -> DVector<f64> {
    let h = (hi - lo) / (n_interior + 1) as f64;
    let total = n_interior + 2 + 2 * degree;
    DVector::from_fn(total, |i, _| lo + (i as f64 - degree as f64) * h)
}

/// B-spline design matrix on a grid with `n_interior` equally spaced quantile
/// knots and clamped boundaries.
pub fn bspline_basis(
    grid: &DVector<f64>,
    n_interior: usize,
    degree: usize,
) -> Result<BasisMatrix> {
    let n_basis = n_interior + degree + 1;
    if grid.len() < n_basis {
        return Err(Error::DegenerateKnots {
            requested: n_basis,
            len: grid.len(),
        });
    }
    let knots = bspline_knots(grid, n_interior, degree);
    let values = bspline_design(grid.as_slice(), &knots, degree);
    Ok(BasisMatrix {
        values,
        kind: BasisKind::BSpline { degree },
        knots,
    })
}

/// Degree-1 truncated power basis: columns (1, u, (u−κ₁)₊, …, (u−κ_{K−2})₊)
/// with K−2 equally spaced interior knots, so exactly the first two
/// coefficients are unpenalized under the block penalty.
pub fn truncated_power_basis(grid: &DVector<f64>, k_g: usize) -> Result<BasisMatrix> {
    if grid.len() < k_g {
        return Err(Error::DegenerateKnots {
            requested: k_g,
            len: grid.len(),
        });
    }
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    let n_interior = k_g - 2;
    let knots = DVector::from_fn(n_interior, |j, _| {
        lo + (j + 1) as f64 * (hi - lo) / (n_interior + 1) as f64
    });
    let mut values = DMatrix::zeros(grid.len(), k_g);
    for i in 0..grid.len() {
        values[(i, 0)] = 1.0;
        values[(i, 1)] = grid[i];
        for j in 0..n_interior {
            values[(i, 2 + j)] = (grid[i] - knots[j]).max(0.0);
        }
    }
    Ok(BasisMatrix {
        values,
        kind: BasisKind::TruncatedPower,
        knots,
    })
}

/// Block penalty for one functional-predictor coefficient block: a
/// (p + K_g) × (p + K_g) matrix with a leading (p+2)×(p+2) zero block and a
/// trailing identity of size K_g − 2.
pub fn penalty_d(p: usize, k_g: usize) -> PenaltyMatrix {
    let dim = p + k_g;
    let mut values = DMatrix::zeros(dim, dim);
    for j in p + 2..dim {
        values[(j, j)] = 1.0;
    }
    PenaltyMatrix {
        values,
        kind: PenaltyKind::BlockZeroIdentity,
    }
}

/// PᵀP for the order-th difference operator of shape (K − order) × K.
pub fn difference_penalty(order: usize, k: usize) -> PenaltyMatrix {
    assert!(order >= 1 && order < k, "difference order must be in [1, K)");
    let p = difference_operator(order, k);
    PenaltyMatrix {
        values: p.transpose() * &p,
        kind: PenaltyKind::Difference(order),
    }
}

/// The order-th difference operator itself.
pub fn difference_operator(order: usize, k: usize) -> DMatrix<f64> {
    let mut p = DMatrix::identity(k, k);
    for o in 1..=order {
        let rows = k - o;
        let mut next = DMatrix::zeros(rows, k);
        for i in 0..rows {
            for j in 0..k {
                next[(i, j)] = p[(i + 1, j)] - p[(i, j)];
            }
        }
        p = next;
    }
    p
}

/// Quadrature inner products of two basis families evaluated on the same
/// grid; entry (l, m) is ∫ ψ_l(u) φ_m(u) du.
pub fn inner_product_matrix(
    psi: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    grid_u: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if psi.nrows() != grid_u.len() || phi.nrows() != grid_u.len() {
        return Err(Error::GridMismatch(format!(
            "bases evaluated on {} and {} points, grid has {}",
            psi.nrows(),
            phi.nrows(),
            grid_u.len()
        )));
    }
    Ok(weighted_cross_product(psi, phi, grid_u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_grid(n: usize) -> DVector<f64> {
        DVector::from_fn(n, |i, _| i as f64 / (n - 1) as f64)
    }

    #[test]
    fn bspline_rows_sum_to_one() {
        let grid = unit_grid(41);
        let basis = bspline_basis(&grid, 5, 3).unwrap();
        for i in 0..grid.len() {
            let s: f64 = basis.values.row(i).sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn bspline_degenerate_grid_errors() {
        // 8 basis functions requested (4 interior + 3 + 1) on 3 points
        let grid = unit_grid(3);
        let err = bspline_basis(&grid, 4, 3).unwrap_err();
        assert!(matches!(err, Error::DegenerateKnots { requested: 8, len: 3 }));
    }

    #[test]
    fn bspline_continuous_at_knots() {
        // finite-difference continuity check: values just left/right of each
        // interior knot differ by O(eps) since cubic splines are C^2
        let grid = unit_grid(51);
        let knots = bspline_knots(&grid, 5, 3);
        for j in 4..knots.len() - 4 {
            let kappa = knots[j];
            let pts = [kappa - 1e-9, kappa, kappa + 1e-9];
            let vals = bspline_design(&pts, &knots, 3);
            for c in 0..vals.ncols() {
                assert!((vals[(0, c)] - vals[(1, c)]).abs() < 1e-6);
                assert!((vals[(2, c)] - vals[(1, c)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn truncated_power_first_columns() {
        let grid = DVector::from_vec(vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        let basis = truncated_power_basis(&grid, 4).unwrap();
        for i in 0..4 {
            assert_eq!(basis.values[(i, 0)], 1.0);
            assert_eq!(basis.values[(i, 1)], grid[i]);
        }
        // hinge is exactly zero left of its knot
        assert_eq!(basis.values[(0, 2)], 0.0);
        assert_eq!(basis.values[(1, 2)], 0.0);
    }

    #[test]
    fn truncated_power_full_rank_on_dense_grid() {
        let grid = unit_grid(101);
        let basis = truncated_power_basis(&grid, 8).unwrap();
        let svd = basis.values.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * smax)
            .count();
        assert_eq!(rank, 8);
    }

    #[test]
    fn penalty_d_small_cases() {
        let d = penalty_d(1, 4);
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0]));
        assert_eq!(d.values, expected);

        // empty identity block
        let d = penalty_d(2, 2);
        assert_eq!(d.values, DMatrix::zeros(4, 4));
    }

    #[test]
    fn penalty_d_is_idempotent_projection() {
        let d = penalty_d(2, 6).values;
        assert_eq!(&d * &d, d.clone());
        assert_eq!(d.transpose(), d.clone());
        assert_relative_eq!(d.trace(), 4.0);
    }

    #[test]
    fn difference_penalty_annihilates_polynomials() {
        let p = difference_operator(2, 4);
        let linear = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let out = &p * &linear;
        assert!(out.amax() < 1e-13);
    }

    #[test]
    fn first_order_difference_penalty_matches_hand_computation() {
        let pen = difference_penalty(1, 3).values;
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0],
        );
        assert_eq!(pen, expected);
    }

    #[test]
    fn difference_penalty_is_psd() {
        let pen = difference_penalty(2, 9).values;
        let eig = nalgebra::SymmetricEigen::new(pen);
        assert!(eig.eigenvalues.min() >= -1e-12);
    }

    #[test]
    fn inner_product_constant_bases() {
        let grid = unit_grid(51);
        let ones = DMatrix::from_element(51, 1, 1.0);
        let m = inner_product_matrix(&ones, &ones, &grid).unwrap();
        assert_relative_eq!(m[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn inner_product_orthogonal_trig() {
        let grid = unit_grid(201);
        let psi = DMatrix::from_fn(201, 1, |i, _| (2.0 * std::f64::consts::PI * grid[i]).sin());
        let phi = DMatrix::from_fn(201, 1, |i, _| (2.0 * std::f64::consts::PI * grid[i]).cos());
        let m = inner_product_matrix(&psi, &phi, &grid).unwrap();
        assert!(m[(0, 0)].abs() < 1e-4);
    }

    #[test]
    fn inner_product_grid_mismatch() {
        let grid = unit_grid(10);
        let a = DMatrix::zeros(9, 2);
        let b = DMatrix::zeros(10, 2);
        assert!(matches!(
            inner_product_matrix(&a, &b, &grid),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn inner_product_is_bilinear() {
        let grid = unit_grid(31);
        let psi = DMatrix::from_fn(31, 2, |i, j| (grid[i] + 1.0).powi(j as i32 + 1));
        let phi = DMatrix::from_fn(31, 2, |i, j| (1.5 - grid[i]).powi(j as i32 + 1));
        let m1 = inner_product_matrix(&psi, &phi, &grid).unwrap();
        let m2 = inner_product_matrix(&(&psi * 3.0), &phi, &grid).unwrap();
        assert_relative_eq!((m1 * 3.0 - m2).norm(), 0.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn partition_of_unity_on_random_grids(
            raw in proptest::collection::vec(0.001f64..1.0, 12..40),
            n_interior in 1usize..6,
        ) {
            // build a strictly increasing grid from positive increments
            let mut acc = 0.0;
            let mut pts = vec![0.0];
            for r in raw {
                acc += r;
                pts.push(acc);
            }
            let grid = DVector::from_vec(pts);
            if grid.len() >= n_interior + 4 {
                let basis = bspline_basis(&grid, n_interior, 3).unwrap();
                for i in 0..grid.len() {
                    let s: f64 = basis.values.row(i).sum();
                    prop_assert!((s - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}
