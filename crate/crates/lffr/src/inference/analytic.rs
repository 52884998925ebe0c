//! Analytic covariance of the pointwise estimates across locations.
//!
//! With A(s) = (X*ᵀV̂⁻¹(s)X* + (λ/σ̂²_ε)D)⁻¹, the cross-location covariance
//! is A(s₁)·X*ᵀV̂⁻¹(s₁)·Z G(s₁,s₂) Zᵀ·V̂⁻¹(s₂)X*·A(s₂) for s₁ ≠ s₂, while at
//! coincident locations the middle factor is the full V̂(s) so the residual
//! variance contributes. Smoother matrices then propagate these covariances
//! to the smoothed estimates.

use crate::covariance::CovarianceField;
use crate::error::{Error, Result};
use crate::pointwise::{DesignContext, PointwiseFit};
use crate::smoothing::SmootherMatrix;
use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

/// Per-subject factor M_i = Z_iᵀ V̂_i⁻¹(s) X*_i for one location.
fn subject_factors(ctx: &DesignContext, fit: &PointwiseFit) -> Vec<DMatrix<f64>> {
    let q = ctx.q();
    let d = ctx.dim();
    let s2e = fit.sigma2_eps;
    if ctx.random_intercept {
        let s2b = fit.h[(0, 0)];
        ctx.rows_by_subject
            .iter()
            .enumerate()
            .map(|(i, rows)| {
                let denom = s2e + s2b * rows.len() as f64;
                let mut m = DMatrix::zeros(1, d);
                for c in 0..d {
                    m[(0, c)] = ctx.g_subject[(i, c)] / denom;
                }
                m
            })
            .collect()
    } else {
        ctx.rows_by_subject
            .iter()
            .map(|rows| {
                let mut zi = DMatrix::zeros(rows.len(), q);
                let mut xi = DMatrix::zeros(rows.len(), d);
                for (a, &r) in rows.iter().enumerate() {
                    for b in 0..q {
                        zi[(a, b)] = ctx.z[(r, b)];
                    }
                    for b in 0..d {
                        xi[(a, b)] = ctx.xstar[(r, b)];
                    }
                }
                let qi = zi.transpose() * &xi;
                let active: Vec<usize> =
                    (0..q).filter(|&t| fit.h[(t, t)] > 0.0).collect();
                if active.is_empty() {
                    return qi / s2e;
                }
                let mut core = DMatrix::zeros(active.len(), active.len());
                let mut z_act = DMatrix::zeros(rows.len(), active.len());
                for (a, &r) in rows.iter().enumerate() {
                    for (b, &t) in active.iter().enumerate() {
                        z_act[(a, b)] = ctx.z[(r, t)];
                    }
                }
                let ztz = z_act.transpose() * &z_act;
                for (a, &t) in active.iter().enumerate() {
                    for b in 0..active.len() {
                        core[(a, b)] = ztz[(a, b)];
                    }
                    core[(a, a)] += s2e / fit.h[(t, t)];
                }
                let w = Cholesky::new(core).expect("positive definite core").inverse();
                let q_act = z_act.transpose() * &xi;
                let correction = zi.transpose() * &z_act * w * q_act;
                (qi - correction) / s2e
            })
            .collect()
    }
}

/// Covariance of β̂*(s_l1) and β̂*(s_l2). For l1 = l2 the middle factor is
/// X*ᵀV̂⁻¹X* itself (full V̂ in the middle), so the same-point covariance is
/// the usual sandwich.
pub fn cov_beta_star(
    ctx: &DesignContext,
    fits: &[PointwiseFit],
    g: &CovarianceField,
    l1: usize,
    l2: usize,
) -> Result<DMatrix<f64>> {
    if l1 >= fits.len() || l2 >= fits.len() || g.l != fits.len() {
        return Err(Error::DimensionMismatch(format!(
            "locations ({l1}, {l2}) for {} fits and a {}-location field",
            fits.len(),
            g.l
        )));
    }
    if l1 == l2 {
        let fit = &fits[l1];
        let middle = crate::pointwise::xtvx(ctx, &fit.h, fit.sigma2_eps);
        return Ok(&fit.xtvx_inv * middle * &fit.xtvx_inv);
    }
    let m1 = subject_factors(ctx, &fits[l1]);
    let m2 = subject_factors(ctx, &fits[l2]);
    let g_block = g.block(l1, l2);
    let d = ctx.dim();
    let mut middle = DMatrix::zeros(d, d);
    for i in 0..m1.len() {
        middle += m1[i].transpose() * &g_block * &m2[i];
    }
    Ok(&fits[l1].xtvx_inv * middle * &fits[l2].xtvx_inv)
}

/// Cross-location covariances for every pair, stored upper-triangular.
pub struct PairwiseCovariance {
    pub l: usize,
    pub dim: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl PairwiseCovariance {
    fn index(&self, l1: usize, l2: usize) -> usize {
        // upper triangle of an L×L grid, l1 <= l2
        l1 * self.l - l1 * (l1 + 1) / 2 + l2
    }

    /// Cov(β̂*(l1), β̂*(l2)); the transpose of the stored block when l1 > l2.
    pub fn cov(&self, l1: usize, l2: usize) -> DMatrix<f64> {
        if l1 <= l2 {
            self.blocks[self.index(l1, l2)].clone()
        } else {
            self.blocks[self.index(l2, l1)].transpose()
        }
    }

    /// L×L covariance matrix of one coefficient across locations.
    pub fn scalar_curve_cov(&self, coef: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.l, self.l);
        for l1 in 0..self.l {
            for l2 in l1..self.l {
                let v = self.blocks[self.index(l1, l2)][(coef, coef)];
                out[(l1, l2)] = v;
                out[(l2, l1)] = v;
            }
        }
        out
    }

    /// Spline-block slice Ĉov(ĝ(l1), ĝ(l2)) for one predictor block.
    pub fn gamma_block(&self, cols: std::ops::Range<usize>, l1: usize, l2: usize) -> DMatrix<f64> {
        let full = self.cov(l1, l2);
        full.view((cols.start, cols.start), (cols.len(), cols.len()))
            .into_owned()
    }
}

/// Compute the full pairwise covariance family. The fast random-intercept
/// path aggregates per-subject outer products within visit-count groups, so
/// each pair costs O(d²) instead of O(I d²).
pub fn compute_pairwise(
    ctx: &DesignContext,
    fits: &[PointwiseFit],
    g: &CovarianceField,
) -> Result<PairwiseCovariance> {
    let l_len = fits.len();
    let d = ctx.dim();
    if g.l != l_len {
        return Err(Error::DimensionMismatch(format!(
            "{} fits but the covariance field has {} locations",
            l_len, g.l
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..l_len)
        .flat_map(|l1| (l1..l_len).map(move |l2| (l1, l2)))
        .collect();

    let factors: Option<Vec<Vec<DMatrix<f64>>>> = if ctx.random_intercept {
        None
    } else {
        Some(fits.iter().map(|f| subject_factors(ctx, f)).collect())
    };

    let blocks: Vec<DMatrix<f64>> = pairs
        .par_iter()
        .map(|&(l1, l2)| {
            if l1 == l2 {
                let fit = &fits[l1];
                let middle = crate::pointwise::xtvx(ctx, &fit.h, fit.sigma2_eps);
                return &fit.xtvx_inv * middle * &fit.xtvx_inv;
            }
            let g_val = g.block(l1, l2);
            let mut middle = DMatrix::zeros(d, d);
            if ctx.random_intercept {
                let g_scalar = g_val[(0, 0)];
                let (f1, f2) = (&fits[l1], &fits[l2]);
                let (s2e1, s2b1) = (f1.sigma2_eps, f1.h[(0, 0)]);
                let (s2e2, s2b2) = (f2.sigma2_eps, f2.h[(0, 0)]);
                for (gi, group) in ctx.j_groups.iter().enumerate() {
                    let j = group.j as f64;
                    let coef = g_scalar / ((s2e1 + s2b1 * j) * (s2e2 + s2b2 * j));
                    middle += &ctx.gg_by_group[gi] * coef;
                }
            } else {
                let fs = factors.as_ref().expect("general path factors");
                for i in 0..ctx.n_subjects() {
                    middle += fs[l1][i].transpose() * &g_val * &fs[l2][i];
                }
            }
            &fits[l1].xtvx_inv * middle * &fits[l2].xtvx_inv
        })
        .collect();

    Ok(PairwiseCovariance {
        l: l_len,
        dim: d,
        blocks,
    })
}

/// Surface covariance from spline-coefficient covariance:
/// Ĉov(γ̂(s₁,·), γ̂(s₂,·)) = Φ Ĉov(ĝ(s₁), ĝ(s₂)) Φᵀ evaluated on the
/// predictor grid.
pub fn var_gamma_raw(cov_g: &DMatrix<f64>, phi: &DMatrix<f64>) -> DMatrix<f64> {
    phi * cov_g * phi.transpose()
}

/// (S₁ ⊗ S₂) M for an RL × c matrix without materializing the Kronecker
/// product: each column is unstacked to R × L and sandwiched.
fn kron_apply(s1: &DMatrix<f64>, s2: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let r = s2.nrows();
    let l = s1.nrows();
    assert_eq!(m.nrows(), r * l, "row count must equal R·L");
    let mut out = DMatrix::zeros(r * l, m.ncols());
    for col in 0..m.ncols() {
        let a = DMatrix::from_fn(r, l, |i, j| m[(j * r + i, col)]);
        let b = s2 * a * s1.transpose();
        for j in 0..l {
            for i in 0..r {
                out[(j * r + i, col)] = b[(i, j)];
            }
        }
    }
    out
}

/// Covariance of the smoothed surface: (S₁⊗S₂) Var(vec Γ̂) (S₁⊗S₂)ᵀ,
/// computed by two sandwich applications.
pub fn propagate_smoother_variance(
    var_vec_gamma: &DMatrix<f64>,
    s1: &SmootherMatrix,
    s2: &SmootherMatrix,
) -> Result<DMatrix<f64>> {
    let rl = s1.len() * s2.len();
    if var_vec_gamma.nrows() != rl || var_vec_gamma.ncols() != rl {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {}×{}, smoothers imply {}",
            var_vec_gamma.nrows(),
            var_vec_gamma.ncols(),
            rl
        )));
    }
    let t = kron_apply(&s1.s, &s2.s, var_vec_gamma);
    Ok(kron_apply(&s1.s, &s2.s, &t.transpose()).transpose())
}

/// Full LR × LR covariance of vec(Γ̂) for one predictor block (column-major
/// stacking, column l runs over the predictor grid).
pub fn surface_cov_full(
    pairwise: &PairwiseCovariance,
    cols: std::ops::Range<usize>,
    phi: &DMatrix<f64>,
) -> DMatrix<f64> {
    let r = phi.nrows();
    let l_len = pairwise.l;
    let mut out = DMatrix::zeros(r * l_len, r * l_len);
    for l1 in 0..l_len {
        for l2 in l1..l_len {
            let cov_g = pairwise.gamma_block(cols.clone(), l1, l2);
            let block = var_gamma_raw(&cov_g, phi);
            for a in 0..r {
                for b in 0..r {
                    out[(l1 * r + a, l2 * r + b)] = block[(a, b)];
                    out[(l2 * r + b, l1 * r + a)] = block[(a, b)];
                }
            }
        }
    }
    out
}

/// Pointwise variances of the sandwich-smoothed surface without building the
/// LR × LR matrices: Var(Γ̃[r,l]) = Σ_{l₁,l₂} S₁[l,l₁] S₁[l,l₂] ·
/// ψ_rᵀ Cov(ĝ(l₁), ĝ(l₂)) ψ_r with ψ_r = Φᵀ S₂[r,:]ᵀ.
pub fn surface_var_smoothed_diag(
    pairwise: &PairwiseCovariance,
    cols: std::ops::Range<usize>,
    phi: &DMatrix<f64>,
    s1: &SmootherMatrix,
    s2: &SmootherMatrix,
) -> DMatrix<f64> {
    let r = phi.nrows();
    let l_len = pairwise.l;
    let k_g = cols.len();
    // ψ_r for every output row r
    let psi = &s2.s * phi; // R × K_g, row r = S₂[r,:]Φ
    // b[r][(l1,l2)] = ψ_rᵀ Cov_g(l1,l2) ψ_r, exploiting pair symmetry
    let rows: Vec<DMatrix<f64>> = (0..r)
        .into_par_iter()
        .map(|row| {
            let psi_r = DVector::from_fn(k_g, |c, _| psi[(row, c)]);
            let mut b = DMatrix::zeros(l_len, l_len);
            for l1 in 0..l_len {
                for l2 in l1..l_len {
                    let cov_g = pairwise.gamma_block(cols.clone(), l1, l2);
                    let v = (psi_r.transpose() * &cov_g * &psi_r)[(0, 0)];
                    b[(l1, l2)] = v;
                    b[(l2, l1)] = v;
                }
            }
            // contract with the response-domain smoother rows
            let sb = &s1.s * b * s1.s.transpose();
            DMatrix::from_fn(1, l_len, |_, l| sb[(l, l)])
        })
        .collect();
    let mut out = DMatrix::zeros(r, l_len);
    for (row, vals) in rows.into_iter().enumerate() {
        for l in 0..l_len {
            out[(row, l)] = vals[(0, l)];
        }
    }
    out
}

/// Covariance of a smoothed coefficient curve: S Σ Sᵀ.
pub fn smoothed_curve_cov(cov: &DMatrix<f64>, s: &SmootherMatrix) -> DMatrix<f64> {
    &s.s * cov * s.s.transpose()
}
