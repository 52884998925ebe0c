//! Cross-location covariance of the subject random effects.
//!
//! G(s₁, s₂) holds Cov(u_t(s₁), u_v(s₂)) for all location pairs. Two
//! estimators are provided: a moment regression of residual cross-products
//! on products of random-effect covariates, and (for random intercepts) the
//! marginal covariance of the outcome minus the part explained by the fixed
//! effects. Fields can be sandwich-smoothed and trimmed to the positive
//! semi-definite cone.

use crate::error::{Error, Result};
use crate::smoothing::sandwich_smooth;
use nalgebra::{DMatrix, DVector};

/// Cross-covariances of the subject random effects over all grid pairs,
/// stored as the q·L × q·L unfolding with index t + q·l.
#[derive(Debug, Clone)]
pub struct CovarianceField {
    pub q: usize,
    pub l: usize,
    pub unfolded: DMatrix<f64>,
    pub grid_s: DVector<f64>,
    pub smoothed: bool,
    pub trimmed: bool,
}

impl CovarianceField {
    /// Entry Ĉov(u_t(s_l), u_v(s_m)).
    pub fn entry(&self, t: usize, v: usize, l: usize, m: usize) -> f64 {
        self.unfolded[(t + self.q * l, v + self.q * m)]
    }

    /// q × q block Ĝ(s_l, s_m).
    pub fn block(&self, l: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.q, self.q, |t, v| self.entry(t, v, l, m))
    }

    pub fn set_block(&mut self, l: usize, m: usize, value: &DMatrix<f64>) {
        for t in 0..self.q {
            for v in 0..self.q {
                self.unfolded[(t + self.q * l, v + self.q * m)] = value[(t, v)];
            }
        }
    }

    /// Write the unfolded matrix as CSV for diagnostics.
    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let header: Vec<String> = (0..self.unfolded.ncols())
            .map(|c| format!("g_{}_{}", c % self.q + 1, c / self.q + 1))
            .collect();
        writeln!(file, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for i in 0..self.unfolded.nrows() {
            let row: Vec<String> = (0..self.unfolded.ncols())
                .map(|j| format!("{}", self.unfolded[(i, j)]))
                .collect();
            writeln!(file, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Moment-regression estimator of G. For every location pair the residual
/// cross-products r_ij(s_l)·r_ik(s_m) are regressed on the covariate
/// products Z_ijv·Z_ikt over within-subject visit pairs. Same-visit pairs
/// (j = k) are included only for l ≠ m, where the residual variance does not
/// contaminate the moment because errors are uncorrelated across locations.
pub fn estimate_g_mom(
    residuals: &DMatrix<f64>,
    z: &DMatrix<f64>,
    subject_ids: &[i64],
    grid_s: &DVector<f64>,
) -> Result<CovarianceField> {
    let n = residuals.nrows();
    let l_len = residuals.ncols();
    let q = z.ncols();
    if z.nrows() != n || subject_ids.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "residuals have {n} rows, Z has {}, ids have {}",
            z.nrows(),
            subject_ids.len()
        )));
    }

    // subject groups in order of first appearance
    let mut groups: Vec<Vec<usize>> = Vec::new();
    {
        let mut index = std::collections::HashMap::new();
        for (row, &id) in subject_ids.iter().enumerate() {
            let slot = *index.entry(id).or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
            groups[slot].push(row);
        }
    }

    let qq = q * q;
    let total_pairs: usize = groups.iter().map(|g| g.len() * g.len()).sum();
    let off_diag_pairs: usize = groups
        .iter()
        .map(|g| g.len() * g.len() - g.len())
        .sum();
    if off_diag_pairs < qq || total_pairs < qq {
        return Err(Error::InsufficientPairs {
            pairs: off_diag_pairs,
            unknowns: qq,
        });
    }

    // Gram matrices of the covariate products over the two pair sets; the
    // covariates do not depend on the location pair, so they are formed once.
    // Index (v, t) flattens to v * q + t for the regression unknowns
    // Cov[u_t(s_l), u_v(s_m)].
    let mut gram_all = DMatrix::zeros(qq, qq);
    let mut gram_diag = DMatrix::zeros(qq, qq);
    // per subject: a_i = Z_iᵀZ_i (for the all-pairs factorization)
    for g in &groups {
        let mut a: DMatrix<f64> = DMatrix::zeros(q, q);
        for &r in g {
            for v in 0..q {
                for t in 0..q {
                    a[(v, t)] += z[(r, v)] * z[(r, t)];
                }
            }
        }
        for v1 in 0..q {
            for t1 in 0..q {
                for v2 in 0..q {
                    for t2 in 0..q {
                        gram_all[(v1 * q + t1, v2 * q + t2)] += a[(v1, v2)] * a[(t1, t2)];
                    }
                }
            }
        }
        for &r in g {
            for v1 in 0..q {
                for t1 in 0..q {
                    for v2 in 0..q {
                        for t2 in 0..q {
                            gram_diag[(v1 * q + t1, v2 * q + t2)] +=
                                z[(r, v1)] * z[(r, t1)] * z[(r, v2)] * z[(r, t2)];
                        }
                    }
                }
            }
        }
    }
    let gram_offdiag = &gram_all - &gram_diag;

    let inv_all = gram_all
        .clone()
        .try_inverse()
        .ok_or(Error::InsufficientPairs {
            pairs: total_pairs,
            unknowns: qq,
        })?;
    let inv_offdiag = gram_offdiag
        .clone()
        .try_inverse()
        .ok_or(Error::InsufficientPairs {
            pairs: off_diag_pairs,
            unknowns: qq,
        })?;

    // per-subject weighted residual sums T_i[v, l] = Σ_j Z_ijv r_ij(s_l)
    let t_sums: Vec<DMatrix<f64>> = groups
        .iter()
        .map(|g| {
            let mut t = DMatrix::zeros(q, l_len);
            for &r in g {
                for v in 0..q {
                    for l in 0..l_len {
                        t[(v, l)] += z[(r, v)] * residuals[(r, l)];
                    }
                }
            }
            t
        })
        .collect();

    let mut unfolded = DMatrix::zeros(q * l_len, q * l_len);
    for l in 0..l_len {
        for m in l..l_len {
            // moment vector over the applicable pair set
            let mut moments = DVector::zeros(qq);
            for (gi, g) in groups.iter().enumerate() {
                let t = &t_sums[gi];
                for v in 0..q {
                    for tt in 0..q {
                        moments[v * q + tt] += t[(v, l)] * t[(tt, m)];
                    }
                }
                if l == m {
                    // remove same-visit products
                    for &r in g {
                        for v in 0..q {
                            for tt in 0..q {
                                moments[v * q + tt] -=
                                    z[(r, v)] * z[(r, tt)] * residuals[(r, l)] * residuals[(r, m)];
                            }
                        }
                    }
                }
            }
            let coef = if l == m {
                &inv_offdiag * &moments
            } else {
                &inv_all * &moments
            };
            // coef[v*q + t] estimates Cov[u_t(s_l), u_v(s_m)]
            let mut block = DMatrix::zeros(q, q);
            for v in 0..q {
                for t in 0..q {
                    block[(t, v)] = coef[v * q + t];
                }
            }
            let mut field_view = |l1: usize, m1: usize, b: &DMatrix<f64>| {
                for t in 0..q {
                    for v in 0..q {
                        unfolded[(t + q * l1, v + q * m1)] = b[(t, v)];
                    }
                }
            };
            field_view(l, m, &block);
            if l != m {
                field_view(m, l, &block.transpose());
            }
        }
    }

    Ok(CovarianceField {
        q,
        l: l_len,
        unfolded,
        grid_s: grid_s.clone(),
        smoothed: false,
        trimmed: false,
    })
}

/// Marginal estimator for random intercepts:
/// Ĝ(s₁, s₂) = Ĉov(Y(s₁), Y(s₂)) − β̂*(s₁)ᵀ Ĉov(X*) β̂*(s₂)
/// pooled over all observations.
pub fn estimate_g_marginal(
    y: &DMatrix<f64>,
    xstar: &DMatrix<f64>,
    beta_star_all: &[DVector<f64>],
    q: usize,
    grid_s: &DVector<f64>,
) -> Result<CovarianceField> {
    if q != 1 {
        return Err(Error::UnsupportedQ { q });
    }
    let n = y.nrows();
    let l_len = y.ncols();
    if beta_star_all.len() != l_len {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficient vectors for {} locations",
            beta_star_all.len(),
            l_len
        )));
    }
    if n < 2 {
        return Err(Error::DimensionMismatch(
            "at least two observations required".to_string(),
        ));
    }

    // pooled covariance of Y columns; the population divisor keeps this
    // estimator on the same moment scale as the pair regression, so the two
    // agree exactly on noiseless random-intercept data
    let denom = n as f64;
    let y_means = DVector::from_fn(l_len, |l, _| y.column(l).sum() / n as f64);
    let mut cov_y = DMatrix::zeros(l_len, l_len);
    for l in 0..l_len {
        for m in l..l_len {
            let mut acc = 0.0;
            for r in 0..n {
                acc += (y[(r, l)] - y_means[l]) * (y[(r, m)] - y_means[m]);
            }
            cov_y[(l, m)] = acc / denom;
            cov_y[(m, l)] = cov_y[(l, m)];
        }
    }

    // pooled covariance of the design rows
    let d = xstar.ncols();
    let x_means = DVector::from_fn(d, |c, _| xstar.column(c).sum() / n as f64);
    let mut cov_x = DMatrix::zeros(d, d);
    for r in 0..n {
        for a in 0..d {
            let xa = xstar[(r, a)] - x_means[a];
            for b in a..d {
                cov_x[(a, b)] += xa * (xstar[(r, b)] - x_means[b]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov_x[(a, b)] = cov_x[(b, a)];
        }
    }
    cov_x /= denom;

    let explained = {
        // β̂*(s_l)ᵀ Cov(X*) β̂*(s_m) for all pairs
        let cols = DMatrix::from_fn(d, l_len, |r, c| beta_star_all[c][r]);
        let tmp = &cov_x * &cols;
        cols.transpose() * tmp
    };

    let unfolded = cov_y - explained;
    Ok(CovarianceField {
        q: 1,
        l: l_len,
        unfolded,
        grid_s: grid_s.clone(),
        smoothed: false,
        trimmed: false,
    })
}

/// Project a symmetric matrix onto the positive semi-definite cone by
/// trimming negative eigenvalues to zero.
pub fn psd_trim(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let ev = eig.eigenvalues[k];
        if ev > 0.0 {
            let v = eig.eigenvectors.column(k);
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += ev * v[i] * v[j];
                }
            }
        }
    }
    out
}

/// Sandwich-smooth each (t, v) slice of the field over the location grid and
/// trim the unfolding to positive semi-definiteness.
pub fn smooth_covariance(field: &CovarianceField, knots: usize) -> Result<CovarianceField> {
    let mut out = field.clone();
    let l_len = field.l;
    for t in 0..field.q {
        for v in t..field.q {
            let slice = DMatrix::from_fn(l_len, l_len, |l, m| field.entry(t, v, l, m));
            let (smoothed, _, _) =
                sandwich_smooth(&slice, &field.grid_s, &field.grid_s, knots, knots)?;
            // keep the unfolding symmetric: slice (t,v) and (v,t) transposed
            let symmetrized = (&smoothed + smoothed.transpose()) * 0.5;
            for l in 0..l_len {
                for m in 0..l_len {
                    out.unfolded[(t + field.q * l, v + field.q * m)] = symmetrized[(l, m)];
                    out.unfolded[(v + field.q * l, t + field.q * m)] = symmetrized[(m, l)];
                }
            }
        }
    }
    out.unfolded = psd_trim(&out.unfolded);
    out.smoothed = true;
    out.trimmed = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_grid(n: usize) -> DVector<f64> {
        DVector::from_fn(n, |i, _| i as f64 / (n - 1) as f64)
    }

    fn intercept_layout(subjects: usize, visits: usize) -> (Vec<i64>, DMatrix<f64>) {
        let n = subjects * visits;
        let ids = (0..n).map(|r| (r / visits) as i64).collect();
        (ids, DMatrix::from_element(n, 1, 1.0))
    }

    #[test]
    fn noiseless_random_intercept_recovered_exactly() {
        let subjects = 30;
        let visits = 4;
        let l = 6;
        let (ids, z) = intercept_layout(subjects, visits);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b: Vec<f64> = (0..subjects)
            .map(|_| (2.0f64).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let residuals = DMatrix::from_fn(subjects * visits, l, |r, _| b[r / visits]);
        let field = estimate_g_mom(&residuals, &z, &ids, &unit_grid(l)).unwrap();

        // exact oracle: mean of b_i·b_i over ordered off-diagonal pairs equals
        // the pair-set average of products, which is the plain mean of b²
        // weighted by pair counts. All subjects share J, so it reduces to the
        // average of b_i².
        let exact: f64 = b.iter().map(|x| x * x).sum::<f64>() / subjects as f64;
        for l1 in 0..l {
            for m1 in 0..l {
                assert!(
                    (field.entry(0, 0, l1, m1) - exact).abs() < 1e-10,
                    "entry ({l1},{m1}) = {} vs {exact}",
                    field.entry(0, 0, l1, m1)
                );
            }
        }
    }

    #[test]
    fn mom_reduces_to_pair_averaging_for_intercept() {
        // direct averaging oracle over the pair sets
        let subjects = 7;
        let visits = 3;
        let l = 5;
        let (ids, z) = intercept_layout(subjects, visits);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let residuals = DMatrix::from_fn(subjects * visits, l, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let field = estimate_g_mom(&residuals, &z, &ids, &unit_grid(l)).unwrap();
        for l1 in 0..l {
            for m1 in 0..l {
                let mut acc = 0.0;
                let mut count = 0usize;
                for i in 0..subjects {
                    for j in 0..visits {
                        for k in 0..visits {
                            if j == k && l1 == m1 {
                                continue;
                            }
                            acc += residuals[(i * visits + j, l1)]
                                * residuals[(i * visits + k, m1)];
                            count += 1;
                        }
                    }
                }
                let oracle = acc / count as f64;
                assert!(
                    (field.entry(0, 0, l1, m1) - oracle).abs() < 1e-12,
                    "({l1},{m1}): {} vs {oracle}",
                    field.entry(0, 0, l1, m1)
                );
            }
        }
    }

    #[test]
    fn pure_noise_yields_small_estimates() {
        let subjects = 200;
        let visits = 4;
        let l = 5;
        let sigma2 = 1.0;
        let (ids, z) = intercept_layout(subjects, visits);
        let mut hits = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let residuals = DMatrix::from_fn(subjects * visits, l, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let field = estimate_g_mom(&residuals, &z, &ids, &unit_grid(l)).unwrap();
            let max_abs = field.unfolded.amax();
            if max_abs <= 0.1 * sigma2 {
                hits += 1;
            }
        }
        assert!(hits >= 18, "only {hits}/20 seeds had max |G| <= 0.1 sigma2");
    }

    #[test]
    fn mom_symmetric_for_intercept() {
        let (ids, z) = intercept_layout(9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let residuals = DMatrix::from_fn(27, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let field = estimate_g_mom(&residuals, &z, &ids, &unit_grid(4)).unwrap();
        for l1 in 0..4 {
            for m1 in 0..4 {
                assert_eq!(field.entry(0, 0, l1, m1), field.entry(0, 0, m1, l1));
            }
        }
    }

    #[test]
    fn marginal_reduces_to_sample_covariance_when_beta_zero() {
        let n = 40;
        let l = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = DMatrix::from_fn(n, l, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xstar = DMatrix::from_fn(n, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let zeros = vec![DVector::zeros(3); l];
        let field = estimate_g_marginal(&y, &xstar, &zeros, 1, &unit_grid(l)).unwrap();
        // pooled covariance oracle (population divisor)
        for l1 in 0..l {
            for m1 in 0..l {
                let mean_l = y.column(l1).sum() / n as f64;
                let mean_m = y.column(m1).sum() / n as f64;
                let mut acc = 0.0;
                for r in 0..n {
                    acc += (y[(r, l1)] - mean_l) * (y[(r, m1)] - mean_m);
                }
                acc /= n as f64;
                assert!((field.entry(0, 0, l1, m1) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_matches_mom_on_noiseless_intercept() {
        // balanced, noiseless, mean-zero subject effects: the two estimators
        // compute the same moment exactly
        let subjects = 40;
        let visits = 3;
        let l = 5;
        let n = subjects * visits;
        let (ids, z) = intercept_layout(subjects, visits);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut b: Vec<f64> = (0..subjects)
            .map(|_| 1.4 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mean = b.iter().sum::<f64>() / subjects as f64;
        for v in &mut b {
            *v -= mean;
        }
        let y = DMatrix::from_fn(n, l, |r, _| b[r / visits]);
        // no fixed effects: X* = intercept, beta = 0 so residuals = Y
        let xstar = DMatrix::from_element(n, 1, 1.0);
        let zeros = vec![DVector::zeros(1); l];
        let marginal = estimate_g_marginal(&y, &xstar, &zeros, 1, &unit_grid(l)).unwrap();
        let mom = estimate_g_mom(&y, &z, &ids, &unit_grid(l)).unwrap();
        for l1 in 0..l {
            for m1 in 0..l {
                assert!(
                    (marginal.entry(0, 0, l1, m1) - mom.entry(0, 0, l1, m1)).abs()
                        < 1e-6 * mom.entry(0, 0, l1, m1).abs().max(1.0)
                );
            }
        }
    }

    #[test]
    fn marginal_requires_intercept_model() {
        let y = DMatrix::zeros(10, 4);
        let xstar = DMatrix::zeros(10, 2);
        let err = estimate_g_marginal(&y, &xstar, &vec![DVector::zeros(2); 4], 2, &unit_grid(4));
        assert!(matches!(err, Err(Error::UnsupportedQ { q: 2 })));
    }

    #[test]
    fn psd_trim_diagonal_case() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        let out = psd_trim(&a);
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((out - expected).amax() < 1e-12);
    }

    #[test]
    fn psd_trim_identity_on_psd_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = &b * b.transpose();
        let out = psd_trim(&a);
        assert!((out - a).amax() < 1e-10);
    }

    #[test]
    fn psd_trim_removes_exactly_negative_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let b = DMatrix::from_fn(6, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = (&b + b.transpose()) * 0.5;
        let out = psd_trim(&a);
        let eig_out = nalgebra::SymmetricEigen::new(out.clone());
        assert!(eig_out.eigenvalues.min() >= -1e-10);
        // ‖out − a‖_F equals the norm of the trimmed negative eigenvalues
        let eig_a = nalgebra::SymmetricEigen::new(a.clone());
        let neg_norm: f64 = eig_a
            .eigenvalues
            .iter()
            .filter(|&&e| e < 0.0)
            .map(|e| e * e)
            .sum::<f64>()
            .sqrt();
        let diff = (&out - &a).norm();
        assert!((diff - neg_norm).abs() < 1e-10);
    }

    #[test]
    fn constant_field_unchanged_by_smoothing() {
        let l = 12;
        let field = CovarianceField {
            q: 1,
            l,
            unfolded: DMatrix::from_element(l, l, 2.2),
            grid_s: unit_grid(l),
            smoothed: false,
            trimmed: false,
        };
        let out = smooth_covariance(&field, 5).unwrap();
        assert!(out.smoothed && out.trimmed);
        assert!((&out.unfolded - &field.unfolded).amax() < 1e-9);
        let eig = nalgebra::SymmetricEigen::new(out.unfolded.clone());
        assert!(eig.eigenvalues.min() >= -1e-8);
    }

    #[test]
    fn smoothing_improves_noisy_rank_one_field() {
        let l = 15;
        let grid = unit_grid(l);
        let truth = DMatrix::from_element(l, l, 1.5);
        let mut wins = 0;
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mut noisy = truth.clone();
            for i in 0..l {
                for j in i..l {
                    let e = 0.3 * rng.sample::<f64, _>(StandardNormal);
                    noisy[(i, j)] += e;
                    noisy[(j, i)] = noisy[(i, j)];
                }
            }
            let field = CovarianceField {
                q: 1,
                l,
                unfolded: noisy.clone(),
                grid_s: grid.clone(),
                smoothed: false,
                trimmed: false,
            };
            let out = smooth_covariance(&field, 5).unwrap();
            if (&out.unfolded - &truth).norm() <= (&noisy - &truth).norm() {
                wins += 1;
            }
        }
        assert!(wins >= 27, "smoothing helped in only {wins}/30 runs");
    }

    proptest! {
        #[test]
        fn mom_is_scale_equivariant(c in 0.1f64..10.0) {
            let (ids, z) = intercept_layout(6, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let residuals = DMatrix::from_fn(18, 4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let grid = unit_grid(4);
            let base = estimate_g_mom(&residuals, &z, &ids, &grid).unwrap();
            let scaled = estimate_g_mom(&(&residuals * c), &z, &ids, &grid).unwrap();
            let diff = (&scaled.unfolded - &base.unfolded * (c * c)).amax();
            prop_assert!(diff < 1e-9 * (c * c).max(1.0));
        }
    }
}
