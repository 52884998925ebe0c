//! Shared design context for the pointwise fits.
//!
//! The fixed-effect design X* = [X, Ξ₁M₁, …, Ξ_K M_K] and the subject
//! grouping do not depend on the outcome location, so they are built once
//! per fit and shared read-only across locations and worker threads.

use crate::basis::{inner_product_matrix, truncated_power_basis, BasisMatrix, PenaltyKind,
                   PenaltyMatrix};
use crate::data::FunctionalDataset;
use crate::error::{Error, Result};
use crate::fpca::{estimate_fpca, FpcaBasis};
use crate::smoothing::psmooth;
use nalgebra::{DMatrix, DVector};
use std::ops::Range;

use super::PointwiseModelConfig;

/// One functional predictor's coefficient block inside X*.
#[derive(Debug, Clone)]
pub struct SplineBlock {
    /// Columns of this predictor's K_g spline coefficients in X*.
    pub cols: Range<usize>,
    /// The penalized trailing K_g − 2 columns.
    pub penalized: Range<usize>,
    /// Coefficient-function basis evaluated on the predictor grid (R × K_g).
    pub phi: BasisMatrix,
    /// Basis inner products M with entries ∫ ψ_l φ_m (K_eff × K_g).
    pub m: DMatrix<f64>,
    pub fpca: FpcaBasis,
}

/// Subjects sharing a visit count; lets per-subject rank-one corrections be
/// aggregated once instead of per criterion evaluation.
#[derive(Debug, Clone)]
pub struct JGroup {
    pub j: usize,
    pub subjects: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DesignContext {
    pub xstar: DMatrix<f64>,
    pub p: usize,
    pub blocks: Vec<SplineBlock>,
    pub z: DMatrix<f64>,
    pub rows_by_subject: Vec<Vec<usize>>,
    pub subject_ids: Vec<i64>,
    pub j_groups: Vec<JGroup>,
    pub group_of_subject: Vec<usize>,
    /// True when q = 1 and Z is identically one (random intercept), which
    /// enables the aggregated fast path.
    pub random_intercept: bool,
    /// X*ᵀX* cached for the generalized least-squares solves.
    pub xtx: DMatrix<f64>,
    /// Row i holds X*_iᵀ1 for subject i (random-intercept path).
    pub g_subject: DMatrix<f64>,
    /// Per J-group: Σ_i g_i g_iᵀ.
    pub gg_by_group: Vec<DMatrix<f64>>,
    pub grid_s: DVector<f64>,
}

impl DesignContext {
    pub fn dim(&self) -> usize {
        self.xstar.ncols()
    }

    pub fn n_obs(&self) -> usize {
        self.xstar.nrows()
    }

    pub fn n_subjects(&self) -> usize {
        self.rows_by_subject.len()
    }

    pub fn q(&self) -> usize {
        self.z.ncols()
    }

    /// Union penalty with a unit diagonal on every penalized spline column.
    pub fn penalty_union(&self) -> PenaltyMatrix {
        let d = self.dim();
        let mut values = DMatrix::zeros(d, d);
        for block in &self.blocks {
            for c in block.penalized.clone() {
                values[(c, c)] = 1.0;
            }
        }
        PenaltyMatrix {
            values,
            kind: PenaltyKind::BlockZeroIdentity,
        }
    }

    /// Penalty with per-block weights λ_k on the penalized columns.
    pub fn penalty_weighted(&self, lambda: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut values = DMatrix::zeros(d, d);
        for (k, block) in self.blocks.iter().enumerate() {
            for c in block.penalized.clone() {
                values[(c, c)] = lambda[k];
            }
        }
        values
    }

    pub fn build(d: &FunctionalDataset, config: &PointwiseModelConfig) -> Result<Self> {
        d.validate()?;
        config.validate()?;

        let n = d.n_obs();
        let mut fpca_bases = Vec::new();
        let mut phi_bases = Vec::new();
        for k in 0..d.n_predictors() {
            let w = if config.presmooth_predictors {
                presmooth_curves(&d.w[k], &d.grid_u[k])?
            } else {
                d.w[k].clone()
            };
            let k_w_eff = config.k_w.min(n).min(d.grid_u[k].len());
            fpca_bases.push(estimate_fpca(&w, &d.grid_u[k], k_w_eff)?);
            phi_bases.push(truncated_power_basis(&d.grid_u[k], config.k_g)?);
        }
        Self::from_parts(d, fpca_bases, phi_bases)
    }

    pub fn from_parts(
        d: &FunctionalDataset,
        fpca: Vec<FpcaBasis>,
        basis_g: Vec<BasisMatrix>,
    ) -> Result<Self> {
        if fpca.len() != d.n_predictors() || basis_g.len() != d.n_predictors() {
            return Err(Error::DimensionMismatch(format!(
                "{} FPCA bases and {} coefficient bases for {} predictors",
                fpca.len(),
                basis_g.len(),
                d.n_predictors()
            )));
        }
        let n = d.n_obs();
        let p = d.n_scalar();

        let mut blocks = Vec::new();
        let mut total_cols = p;
        for (k, (fp, phi)) in fpca.into_iter().zip(basis_g.into_iter()).enumerate() {
            if fp.grid_u.len() != d.grid_u[k].len() || phi.values.nrows() != d.grid_u[k].len() {
                return Err(Error::GridMismatch(format!(
                    "predictor {}: FPCA and coefficient bases must share the predictor grid",
                    k + 1
                )));
            }
            let k_g = phi.n_basis();
            let m = inner_product_matrix(&fp.eigenfunctions, &phi.values, &d.grid_u[k])?;
            let cols = total_cols..total_cols + k_g;
            let penalized = total_cols + 2..total_cols + k_g;
            total_cols += k_g;
            blocks.push(SplineBlock {
                cols,
                penalized,
                phi,
                m,
                fpca: fp,
            });
        }

        let mut xstar = DMatrix::zeros(n, total_cols);
        xstar.columns_mut(0, p).copy_from(&d.x);
        for block in &blocks {
            let c = &block.fpca.scores * &block.m;
            xstar
                .columns_mut(block.cols.start, block.cols.len())
                .copy_from(&c);
        }

        let rows_by_subject = d.subject_rows();
        let n_subjects = rows_by_subject.len();

        // group subjects by visit count
        let mut j_groups: Vec<JGroup> = Vec::new();
        let mut group_of_subject = vec![0usize; n_subjects];
        for (i, rows) in rows_by_subject.iter().enumerate() {
            let j = rows.len();
            let gid = match j_groups.iter().position(|g| g.j == j) {
                Some(g) => g,
                None => {
                    j_groups.push(JGroup {
                        j,
                        subjects: Vec::new(),
                    });
                    j_groups.len() - 1
                }
            };
            j_groups[gid].subjects.push(i);
            group_of_subject[i] = gid;
        }

        let random_intercept = d.n_random() == 1 && d.z.iter().all(|&v| v == 1.0);

        let xtx = xstar.transpose() * &xstar;
        let mut g_subject = DMatrix::zeros(n_subjects, total_cols);
        for (i, rows) in rows_by_subject.iter().enumerate() {
            for &r in rows {
                for c in 0..total_cols {
                    g_subject[(i, c)] += xstar[(r, c)];
                }
            }
        }
        let gg_by_group = j_groups
            .iter()
            .map(|g| {
                let mut acc = DMatrix::zeros(total_cols, total_cols);
                for &i in &g.subjects {
                    let gi = g_subject.row(i);
                    for a in 0..total_cols {
                        for b in 0..total_cols {
                            acc[(a, b)] += gi[a] * gi[b];
                        }
                    }
                }
                acc
            })
            .collect();

        Ok(DesignContext {
            xstar,
            p,
            blocks,
            z: d.z.clone(),
            rows_by_subject,
            subject_ids: d.subjects(),
            j_groups,
            group_of_subject,
            random_intercept,
            xtx,
            g_subject,
            gg_by_group,
            grid_s: d.grid_s.clone(),
        })
    }
}

fn presmooth_curves(w: &DMatrix<f64>, grid: &DVector<f64>) -> Result<DMatrix<f64>> {
    let knots = 10.min(grid.len().saturating_sub(4));
    if knots == 0 {
        return Ok(w.clone());
    }
    let mut out = w.clone();
    for i in 0..w.nrows() {
        let row = DVector::from_fn(w.ncols(), |j, _| w[(i, j)]);
        let (smoothed, _) = psmooth(&row, grid, knots)?;
        for j in 0..w.ncols() {
            out[(i, j)] = smoothed[j];
        }
    }
    Ok(out)
}

/// Assemble the full fixed-effect design X* = [X, Ξ₁M₁, …, Ξ_K M_K] and the
/// block penalty that leaves scalar coefficients and the first two spline
/// coefficients of every predictor unpenalized.
pub fn build_design(
    d: &FunctionalDataset,
    fpca: &[FpcaBasis],
    basis_g: &[BasisMatrix],
) -> Result<(DMatrix<f64>, PenaltyMatrix)> {
    let ctx = DesignContext::from_parts(d, fpca.to_vec(), basis_g.to_vec())?;
    let penalty = ctx.penalty_union();
    Ok((ctx.xstar, penalty))
}
