//! Functional principal component analysis of the functional predictors.
//!
//! Curves are pooled over subjects and visits; eigenpairs come from the
//! sample covariance symmetrized under the trapezoid inner product so that
//! the eigenfunctions are quadrature-orthonormal. Scores are quadrature
//! projections of the centered curves.

use crate::error::{Error, Result};
use crate::quad::trapezoid_weights;
use nalgebra::{DMatrix, DVector};

/// Relative eigenvalue threshold below which a component counts toward rank
/// deficiency.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct FpcaBasis {
    /// Pointwise mean curve μ(u), length R.
    pub mean: DVector<f64>,
    /// R × K eigenfunctions, quadrature-orthonormal columns.
    pub eigenfunctions: DMatrix<f64>,
    /// Nonincreasing, nonnegative eigenvalues (negatives trimmed to zero).
    pub eigenvalues: DVector<f64>,
    /// N × K scores of the training curves.
    pub scores: DMatrix<f64>,
    pub grid_u: DVector<f64>,
    /// Number of eigenvalues above the relative rank threshold.
    pub numerical_rank: usize,
    /// Set when fewer than K components carry numerically nonzero variance;
    /// trailing components are retained with zero eigenvalues.
    pub rank_deficient: bool,
}

impl FpcaBasis {
    pub fn n_components(&self) -> usize {
        self.eigenfunctions.ncols()
    }
}

pub fn estimate_fpca(w: &DMatrix<f64>, grid_u: &DVector<f64>, k_w: usize) -> Result<FpcaBasis> {
    let n = w.nrows();
    let r = w.ncols();
    if r != grid_u.len() {
        return Err(Error::GridMismatch(format!(
            "curves have {r} points, grid has {}",
            grid_u.len()
        )));
    }
    if n < 2 {
        return Err(Error::DimensionMismatch(
            "at least two curves are required".to_string(),
        ));
    }
    if k_w == 0 || k_w > n.min(r) {
        return Err(Error::InvalidConfig(format!(
            "number of components {k_w} must be in [1, min(N, R)] = [1, {}]",
            n.min(r)
        )));
    }

    let mean = DVector::from_fn(r, |j, _| w.column(j).sum() / n as f64);
    let mut centered = w.clone();
    for i in 0..n {
        for j in 0..r {
            centered[(i, j)] -= mean[j];
        }
    }

    let weights = trapezoid_weights(grid_u);
    let sqrt_w = weights.map(f64::sqrt);

    // Symmetrized weighted covariance Q^{1/2} C Q^{1/2}, C = (1/N) WᵀW.
    let cov = centered.transpose() * &centered / n as f64;
    let mut sym = cov;
    for i in 0..r {
        for j in 0..r {
            sym[(i, j)] *= sqrt_w[i] * sqrt_w[j];
        }
    }

    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let max_ev = eig.eigenvalues[order[0]].max(0.0);
    let mut eigenvalues = DVector::zeros(k_w);
    let mut eigenfunctions = DMatrix::zeros(r, k_w);
    let mut numerical_rank = 0;
    for (out, &idx) in order.iter().take(k_w).enumerate() {
        let ev = eig.eigenvalues[idx];
        eigenvalues[out] = ev.max(0.0);
        if ev > RANK_TOL * max_ev {
            numerical_rank += 1;
        }
        // back-transform to quadrature-orthonormal coordinates
        let mut col = DVector::zeros(r);
        for i in 0..r {
            col[i] = eig.eigenvectors[(i, idx)] / sqrt_w[i].max(f64::MIN_POSITIVE);
        }
        // deterministic sign: largest-magnitude entry positive
        let mut arg = 0;
        for i in 1..r {
            if col[i].abs() > col[arg].abs() {
                arg = i;
            }
        }
        if col[arg] < 0.0 {
            col.neg_mut();
        }
        eigenfunctions.set_column(out, &col);
    }

    let mut basis = FpcaBasis {
        mean,
        eigenfunctions,
        eigenvalues,
        scores: DMatrix::zeros(0, 0),
        grid_u: grid_u.clone(),
        numerical_rank,
        rank_deficient: numerical_rank < k_w,
    };
    basis.scores = scores_for(&basis, w)?;
    Ok(basis)
}

/// Quadrature projections of centered curves onto the eigenfunctions.
pub fn scores_for(basis: &FpcaBasis, w_new: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = basis.grid_u.len();
    if w_new.ncols() != r {
        return Err(Error::GridMismatch(format!(
            "curves have {} points, basis grid has {r}",
            w_new.ncols()
        )));
    }
    let weights = trapezoid_weights(&basis.grid_u);
    let k = basis.n_components();
    let mut scores = DMatrix::zeros(w_new.nrows(), k);
    for i in 0..w_new.nrows() {
        for l in 0..k {
            let mut acc = 0.0;
            for j in 0..r {
                acc += (w_new[(i, j)] - basis.mean[j]) * basis.eigenfunctions[(j, l)] * weights[j];
            }
            scores[(i, l)] = acc;
        }
    }
    Ok(scores)
}
