//! Trapezoid-rule quadrature on observation grids.
//!
//! All integrals over functional domains are evaluated with the trapezoid
//! rule on the observed grid, which is exact for piecewise-linear functions
//! and O(h^2) accurate on the equally spaced grids used in practice.

use nalgebra::{DMatrix, DVector};

/// Trapezoid weights for a strictly increasing grid.
pub fn trapezoid_weights(grid: &DVector<f64>) -> DVector<f64> {
    let n = grid.len();
    let mut w = DVector::zeros(n);
    if n == 1 {
        w[0] = 1.0;
        return w;
    }
    w[0] = (grid[1] - grid[0]) / 2.0;
    w[n - 1] = (grid[n - 1] - grid[n - 2]) / 2.0;
    for i in 1..n - 1 {
        w[i] = (grid[i + 1] - grid[i - 1]) / 2.0;
    }
    w
}

/// ∫ f over the grid domain.
pub fn trapezoid(values: &DVector<f64>, grid: &DVector<f64>) -> f64 {
    let w = trapezoid_weights(grid);
    values.dot(&w)
}

/// Quadrature inner product ⟨f, g⟩ = ∫ f·g.
pub fn inner_product(f: &DVector<f64>, g: &DVector<f64>, grid: &DVector<f64>) -> f64 {
    let w = trapezoid_weights(grid);
    (0..grid.len()).map(|i| f[i] * g[i] * w[i]).sum()
}

/// AᵀQB for column families A (n×a), B (n×b) under the trapezoid weight
/// matrix Q of the grid. Entry (l, m) is ∫ a_l·b_m.
pub fn weighted_cross_product(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    grid: &DVector<f64>,
) -> DMatrix<f64> {
    let w = trapezoid_weights(grid);
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    for l in 0..a.ncols() {
        for m in 0..b.ncols() {
            let mut acc = 0.0;
            for i in 0..grid.len() {
                acc += a[(i, l)] * b[(i, m)] * w[i];
            }
            out[(l, m)] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_grid(n: usize) -> DVector<f64> {
        DVector::from_fn(n, |i, _| i as f64 / (n - 1) as f64)
    }

    #[test]
    fn weights_sum_to_domain_length() {
        let g = unit_grid(25);
        assert_relative_eq!(trapezoid_weights(&g).sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn integrates_constant_exactly() {
        let g = unit_grid(11);
        let f = DVector::from_element(11, 3.5);
        assert_relative_eq!(trapezoid(&f, &g), 3.5, epsilon = 1e-12);
    }

    #[test]
    fn integrates_linear_exactly_on_uneven_grid() {
        let g = DVector::from_vec(vec![0.0, 0.1, 0.35, 0.4, 0.8, 1.0]);
        let f = g.map(|x| 2.0 * x - 1.0);
        // ∫ (2x - 1) dx over [0,1] = 0
        assert_relative_eq!(trapezoid(&f, &g), 0.0, epsilon = 1e-12);
    }
}
