//! Variance components via restricted maximum likelihood.
//!
//! At each outcome location the pointwise model is refit as a working mixed
//! model: penalized spline coefficients become random effects with variance
//! σ²_g = σ²_ε/λ and subjects carry their own random-effect covariances, so
//! the smoothing parameter drops out of a single profiled criterion. The
//! residual variance is profiled in closed form; the remaining variance
//! ratios are found by Brent (one free ratio) or Nelder–Mead (several), with
//! restarts from fixed initial points.

use crate::error::{Error, Result};
use crate::optim::{brent_min, nelder_mead};
use nalgebra::{Cholesky, DMatrix, DVector};

use super::design::DesignContext;
use super::{LambdaSelection, PointwiseModelConfig};

/// Log-ratio bounds keeping variance ratios inside [e⁻³⁰, e³⁰].
const LOG_RATIO_MIN: f64 = -30.0;
const LOG_RATIO_MAX: f64 = 30.0;

/// Absolute threshold below which a subject variance counts as boundary.
const BOUNDARY_EPS: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct VarianceComponents {
    /// Diagonal q × q covariance of the subject random effects.
    pub h: DMatrix<f64>,
    pub sigma2_eps: f64,
    /// Smoothing parameter per functional predictor, λ_k = σ̂²_ε/σ̂²_{g,k}.
    pub lambda: Vec<f64>,
    pub converged: bool,
    /// Set when some subject variance hit the lower boundary and was
    /// truncated to exactly zero.
    pub boundary: bool,
    pub criterion: f64,
}

/// Column partition of X* into fixed effects and penalized spline columns.
#[derive(Debug, Clone)]
struct Partition {
    xf_cols: Vec<usize>,
    u_cols: Vec<usize>,
    /// Predictor block index of each U column.
    block_of_u: Vec<usize>,
    n_blocks: usize,
}

impl Partition {
    fn new(ctx: &DesignContext, spline_random: bool) -> Self {
        let mut xf_cols: Vec<usize> = (0..ctx.p).collect();
        let mut u_cols = Vec::new();
        let mut block_of_u = Vec::new();
        for (k, block) in ctx.blocks.iter().enumerate() {
            for c in block.cols.clone() {
                if spline_random && block.penalized.contains(&c) {
                    u_cols.push(c);
                    block_of_u.push(k);
                } else {
                    xf_cols.push(c);
                }
            }
        }
        Partition {
            xf_cols,
            u_cols,
            block_of_u,
            n_blocks: ctx.blocks.len(),
        }
    }
}

fn gather_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Location-independent pieces of the working model.
pub struct WorkingModel {
    part: Partition,
    xf: DMatrix<f64>,
    u: DMatrix<f64>,
    n: usize,
    q: usize,
    fast: bool,
    // shared Gram blocks
    utu: DMatrix<f64>,
    utxf: DMatrix<f64>,
    xftxf: DMatrix<f64>,
    // fast path: per J-group aggregates of s_i = U_iᵀ1 and t_i = X_{f,i}ᵀ1
    group_j: Vec<usize>,
    group_count: Vec<usize>,
    group_ss: Vec<DMatrix<f64>>,
    group_st: Vec<DMatrix<f64>>,
    group_tt: Vec<DMatrix<f64>>,
    s_subject: DMatrix<f64>,
    t_subject: DMatrix<f64>,
    // general path
    rows_by_subject: Vec<Vec<usize>>,
    group_of_subject: Vec<usize>,
    z: DMatrix<f64>,
}

/// Per-location outcome summaries consumed by the criterion.
pub struct LocationTerms {
    uty: DVector<f64>,
    xfty: DVector<f64>,
    yty: f64,
    group_sy: Vec<DVector<f64>>,
    group_ty: Vec<DVector<f64>>,
    group_yy: Vec<f64>,
    y: DVector<f64>,
}

impl WorkingModel {
    pub fn new(ctx: &DesignContext, spline_random: bool) -> Self {
        let part = Partition::new(ctx, spline_random);
        let xf = gather_columns(&ctx.xstar, &part.xf_cols);
        let u = gather_columns(&ctx.xstar, &part.u_cols);
        let fast = ctx.random_intercept;

        let utu = u.transpose() * &u;
        let utxf = u.transpose() * &xf;
        let xftxf = xf.transpose() * &xf;

        let n_subjects = ctx.n_subjects();
        let m = u.ncols();
        let pf = xf.ncols();
        let mut s_subject = DMatrix::zeros(n_subjects, m);
        let mut t_subject = DMatrix::zeros(n_subjects, pf);
        for (i, rows) in ctx.rows_by_subject.iter().enumerate() {
            for &r in rows {
                for c in 0..m {
                    s_subject[(i, c)] += u[(r, c)];
                }
                for c in 0..pf {
                    t_subject[(i, c)] += xf[(r, c)];
                }
            }
        }

        let mut group_j = Vec::new();
        let mut group_count = Vec::new();
        let mut group_ss = Vec::new();
        let mut group_st = Vec::new();
        let mut group_tt = Vec::new();
        for g in &ctx.j_groups {
            group_j.push(g.j);
            group_count.push(g.subjects.len());
            let mut ss = DMatrix::zeros(m, m);
            let mut st = DMatrix::zeros(m, pf);
            let mut tt = DMatrix::zeros(pf, pf);
            for &i in &g.subjects {
                for a in 0..m {
                    let sa = s_subject[(i, a)];
                    for b in 0..m {
                        ss[(a, b)] += sa * s_subject[(i, b)];
                    }
                    for b in 0..pf {
                        st[(a, b)] += sa * t_subject[(i, b)];
                    }
                }
                for a in 0..pf {
                    let ta = t_subject[(i, a)];
                    for b in 0..pf {
                        tt[(a, b)] += ta * t_subject[(i, b)];
                    }
                }
            }
            group_ss.push(ss);
            group_st.push(st);
            group_tt.push(tt);
        }

        WorkingModel {
            part,
            n: ctx.n_obs(),
            q: ctx.q(),
            fast,
            utu,
            utxf,
            xftxf,
            group_j,
            group_count,
            group_ss,
            group_st,
            group_tt,
            s_subject,
            t_subject,
            rows_by_subject: ctx.rows_by_subject.clone(),
            group_of_subject: ctx.group_of_subject.clone(),
            z: ctx.z.clone(),
            xf,
            u,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.part.n_blocks
    }

    pub fn location_terms(&self, y: &DVector<f64>) -> LocationTerms {
        let uty = self.u.transpose() * y;
        let xfty = self.xf.transpose() * y;
        let yty = y.norm_squared();
        let n_groups = self.group_j.len();
        let m = self.u.ncols();
        let pf = self.xf.ncols();
        let mut group_sy = vec![DVector::zeros(m); n_groups];
        let mut group_ty = vec![DVector::zeros(pf); n_groups];
        let mut group_yy = vec![0.0; n_groups];
        if self.fast {
            for (i, rows) in self.rows_by_subject.iter().enumerate() {
                let ysum: f64 = rows.iter().map(|&r| y[r]).sum();
                let g = self.group_of_subject[i];
                for c in 0..m {
                    group_sy[g][c] += self.s_subject[(i, c)] * ysum;
                }
                for c in 0..pf {
                    group_ty[g][c] += self.t_subject[(i, c)] * ysum;
                }
                group_yy[g] += ysum * ysum;
            }
        }
        LocationTerms {
            uty,
            xfty,
            yty,
            group_sy,
            group_ty,
            group_yy,
            y: y.clone(),
        }
    }

    /// Profiled restricted likelihood criterion (−2 log REML up to an
    /// additive constant). `log_phi` holds q subject log-ratios followed by
    /// one spline log-ratio per predictor block; fixed spline ratios replace
    /// trailing entries when λ is externally supplied.
    fn criterion(&self, log_phi: &[f64], terms: &LocationTerms) -> (f64, f64) {
        let q = self.q;
        let m = self.u.ncols();
        let pf = self.xf.ncols();
        let phi: Vec<f64> = log_phi
            .iter()
            .map(|&x| x.clamp(LOG_RATIO_MIN, LOG_RATIO_MAX).exp())
            .collect();
        let phi_subject = &phi[..q];
        let phi_blocks = &phi[q..];

        let mut uau = self.utu.clone();
        let mut uax = self.utxf.clone();
        let mut xax = self.xftxf.clone();
        let mut uay = terms.uty.clone();
        let mut xay = terms.xfty.clone();
        let mut yay = terms.yty;
        let mut logdet_a = 0.0;

        if self.fast {
            let phi_b = phi_subject[0];
            for g in 0..self.group_j.len() {
                let j = self.group_j[g] as f64;
                let c = phi_b / (1.0 + phi_b * j);
                logdet_a += self.group_count[g] as f64 * (1.0 + phi_b * j).ln();
                uau -= &self.group_ss[g] * c;
                uax -= &self.group_st[g] * c;
                xax -= &self.group_tt[g] * c;
                uay -= &terms.group_sy[g] * c;
                xay -= &terms.group_ty[g] * c;
                yay -= terms.group_yy[g] * c;
            }
        } else {
            for rows in &self.rows_by_subject {
                let ji = rows.len();
                let mut zi = DMatrix::zeros(ji, q);
                let mut ui = DMatrix::zeros(ji, m);
                let mut xi = DMatrix::zeros(ji, pf);
                let mut yi = DVector::zeros(ji);
                for (a, &r) in rows.iter().enumerate() {
                    for b in 0..q {
                        zi[(a, b)] = self.z[(r, b)];
                    }
                    for b in 0..m {
                        ui[(a, b)] = self.u[(r, b)];
                    }
                    for b in 0..pf {
                        xi[(a, b)] = self.xf[(r, b)];
                    }
                    yi[a] = terms.y[r];
                }
                let ztz = zi.transpose() * &zi;
                // log|I + diag(phi) ZᵀZ|
                let mut cap: DMatrix<f64> = DMatrix::identity(q, q);
                for a in 0..q {
                    for b in 0..q {
                        cap[(a, b)] += phi_subject[a] * ztz[(a, b)];
                    }
                }
                let lu = cap.clone().lu();
                logdet_a += lu.determinant().max(f64::MIN_POSITIVE).ln();
                // K = (diag(1/phi) + ZᵀZ)⁻¹
                let mut core = ztz.clone();
                for a in 0..q {
                    core[(a, a)] += 1.0 / phi_subject[a];
                }
                let k = match Cholesky::new(core) {
                    Some(c) => c.inverse(),
                    None => return (f64::INFINITY, f64::NAN),
                };
                let pi = zi.transpose() * &ui;
                let qi = zi.transpose() * &xi;
                let ri = zi.transpose() * &yi;
                uau -= pi.transpose() * &k * &pi;
                uax -= pi.transpose() * &k * &qi;
                xax -= qi.transpose() * &k * &qi;
                uay -= pi.transpose() * &k * &ri;
                xay -= qi.transpose() * &k * &ri;
                yay -= (ri.transpose() * &k * &ri)[(0, 0)];
            }
        }

        // fold in the spline random effects by one more Woodbury step
        let mut logdet_v0 = logdet_a;
        let (xvx, xvy, yvy) = if m > 0 {
            let mut s_mat = uau;
            for (col, &blk) in self.part.block_of_u.iter().enumerate() {
                s_mat[(col, col)] += 1.0 / phi_blocks[blk];
                logdet_v0 += phi_blocks[blk].ln();
            }
            let chol = match Cholesky::new(s_mat) {
                Some(c) => c,
                None => return (f64::INFINITY, f64::NAN),
            };
            for i in 0..m {
                logdet_v0 += 2.0 * chol.l_dirty()[(i, i)].ln();
            }
            let sinv_uax = chol.solve(&uax);
            let sinv_uay = chol.solve(&uay);
            let xvx = &xax - uax.transpose() * &sinv_uax;
            let xvy = &xay - uax.transpose() * &sinv_uay;
            let yvy = yay - uay.dot(&sinv_uay);
            (xvx, xvy, yvy)
        } else {
            (xax, xay, yay)
        };

        let chol_xvx = match Cholesky::new(xvx) {
            Some(c) => c,
            None => return (f64::INFINITY, f64::NAN),
        };
        let mut logdet_xvx = 0.0;
        for i in 0..pf {
            logdet_xvx += 2.0 * chol_xvx.l_dirty()[(i, i)].ln();
        }
        let ypy = yvy - xvy.dot(&chol_xvx.solve(&xvy));
        if !(ypy > 0.0) {
            return (f64::INFINITY, ypy);
        }
        let crit = (self.n - pf) as f64 * ypy.ln() + logdet_v0 + logdet_xvx;
        (crit, ypy)
    }
}

/// Fixed starting points (in log-ratio space) for the simplex search.
fn simplex_starts(dim: usize) -> Vec<Vec<f64>> {
    let mut starts = vec![vec![0.0; dim]];
    let mut hi_subject = vec![-2.0; dim];
    hi_subject[0] = 2.0;
    starts.push(hi_subject);
    let mut hi_spline = vec![2.0; dim];
    hi_spline[0] = -2.0;
    starts.push(hi_spline);
    starts
}

/// Estimate variance components for one outcome column.
pub fn estimate_components(
    wm: &WorkingModel,
    terms: &LocationTerms,
    config: &PointwiseModelConfig,
) -> Result<VarianceComponents> {
    let q = wm.q;
    let n_blocks = wm.n_blocks();
    let pf = wm.xf.ncols();
    if wm.n <= pf {
        return Err(Error::DimensionMismatch(format!(
            "{} observations for {} fixed effects",
            wm.n, pf
        )));
    }

    let fixed_lambda = match config.lambda_selection {
        LambdaSelection::FixedValue(l0) => Some(l0),
        LambdaSelection::MixedModelReml => None,
    };
    // with a fixed λ the spline ratios are pinned at 1/λ
    let fixed_log_phi_g = fixed_lambda.map(|l0| {
        if l0 > 0.0 {
            (-l0.ln()).clamp(LOG_RATIO_MIN, LOG_RATIO_MAX)
        } else {
            LOG_RATIO_MAX
        }
    });
    let free_dim = if fixed_log_phi_g.is_some() { q } else { q + n_blocks };

    let assemble = |free: &[f64]| -> Vec<f64> {
        let mut full = Vec::with_capacity(q + n_blocks);
        full.extend_from_slice(&free[..q.min(free.len())]);
        match fixed_log_phi_g {
            Some(g) => full.extend(std::iter::repeat(g).take(n_blocks)),
            None => full.extend_from_slice(&free[q..]),
        }
        full
    };

    let (best_x, converged) = if free_dim == 1 {
        let res = brent_min(
            |x| wm.criterion(&assemble(&[x]), terms).0,
            LOG_RATIO_MIN,
            LOG_RATIO_MAX,
            1e-12,
            400,
        );
        (assemble(&res.x), res.converged)
    } else {
        let mut best: Option<(f64, Vec<f64>, bool)> = None;
        for start in simplex_starts(free_dim) {
            let res = nelder_mead(
                |x| wm.criterion(&assemble(x), terms).0,
                &start,
                1.0,
                config.reml_tol,
                config.max_reml_iter,
            );
            if best.as_ref().map_or(true, |(f, _, _)| res.fval < *f) {
                best = Some((res.fval, res.x, res.converged));
            }
        }
        let (_, x, conv) = best.expect("at least one restart");
        (assemble(&x), conv)
    };

    let (criterion, ypy) = wm.criterion(&best_x, terms);
    if !ypy.is_finite() || ypy <= 0.0 {
        return Err(Error::SingularSystem {
            location: 0,
            cond: f64::INFINITY,
        });
    }
    let sigma2_eps = ypy / (wm.n - pf) as f64;
    // a residual variance at numerical-noise scale means the outcome lies in
    // the span of the design; downstream V̂⁻¹ would be meaningless
    let y_scale = terms.yty / wm.n as f64;
    if sigma2_eps <= 1e-14 * y_scale.max(f64::MIN_POSITIVE) {
        return Err(Error::SingularSystem {
            location: 0,
            cond: f64::INFINITY,
        });
    }

    let mut boundary = false;
    let mut h = DMatrix::zeros(q, q);
    for t in 0..q {
        let mut v = best_x[t].clamp(LOG_RATIO_MIN, LOG_RATIO_MAX).exp() * sigma2_eps;
        if v < BOUNDARY_EPS {
            v = 0.0;
            boundary = true;
        }
        h[(t, t)] = v;
    }
    let lambda: Vec<f64> = match fixed_lambda {
        Some(l0) => vec![l0; n_blocks],
        None => (0..n_blocks)
            .map(|k| (-best_x[q + k].clamp(LOG_RATIO_MIN, LOG_RATIO_MAX)).exp())
            .collect(),
    };

    Ok(VarianceComponents {
        h,
        sigma2_eps,
        lambda,
        converged,
        boundary,
        criterion,
    })
}

/// Variance components of the working mixed model for a single outcome
/// vector: subject covariance Ĥ, residual variance σ̂²_ε, and the smoothing
/// parameter λ̂ = σ̂²_ε/σ̂²_g implied by treating all penalized spline
/// coefficients as one random-effect block.
pub fn reml_variance_components(
    y: &DVector<f64>,
    ctx: &DesignContext,
    config: &PointwiseModelConfig,
) -> Result<(DMatrix<f64>, f64, f64)> {
    let spline_random = !matches!(config.lambda_selection, LambdaSelection::FixedValue(l) if l == 0.0);
    let wm = WorkingModel::new(ctx, spline_random);
    let terms = wm.location_terms(y);
    let vc = estimate_components(&wm, &terms, config)?;
    let lambda = vc.lambda.first().copied().unwrap_or(0.0);
    Ok((vc.h, vc.sigma2_eps, lambda))
}
