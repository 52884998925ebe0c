//! Cluster bootstrap of subjects for fixed-effects inference.
//!
//! Each replicate resamples subject indices with replacement, keeps all
//! visits of every sampled subject (copies get fresh ids so they act as
//! independent clusters), refits the fitting-and-smoothing pipeline, and
//! stores the raw and smoothed estimates. Replicate RNG streams derive from
//! (seed, replicate), so results are identical for any worker count.

use crate::data::FunctionalDataset;
use crate::error::{Error, Result};
use crate::pipeline::{fit_model, FitConfig};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct BootstrapEstimates {
    pub b_requested: usize,
    pub seed: u64,
    /// Raw pointwise scalar coefficients per successful replicate (p × L).
    pub beta_hat_reps: Vec<DMatrix<f64>>,
    /// Smoothed scalar coefficients per replicate.
    pub beta_smooth_reps: Vec<DMatrix<f64>>,
    /// Raw coefficient surfaces per replicate, one matrix per predictor.
    pub gamma_hat_reps: Vec<Vec<DMatrix<f64>>>,
    pub gamma_smooth_reps: Vec<Vec<DMatrix<f64>>>,
    /// Original subject ids drawn in each replicate.
    pub indices_log: Vec<Vec<i64>>,
    pub failures: usize,
}

impl BootstrapEstimates {
    pub fn n_successful(&self) -> usize {
        self.beta_hat_reps.len()
    }
}

/// Build the resampled dataset: all rows of each sampled subject, with the
/// sample position as the new subject id so duplicates form separate
/// clusters.
pub fn resample_subjects(d: &FunctionalDataset, sample: &[usize]) -> FunctionalDataset {
    let rows_by_subject = d.subject_rows();
    let total_rows: usize = sample.iter().map(|&i| rows_by_subject[i].len()).sum();
    let l = d.n_locations();
    let p = d.n_scalar();
    let q = d.n_random();

    let mut subject_id = Vec::with_capacity(total_rows);
    let mut visit_id = Vec::with_capacity(total_rows);
    let mut y = DMatrix::zeros(total_rows, l);
    let mut x = DMatrix::zeros(total_rows, p);
    let mut z = DMatrix::zeros(total_rows, q);
    let mut w: Vec<DMatrix<f64>> = d
        .w
        .iter()
        .map(|wk| DMatrix::zeros(total_rows, wk.ncols()))
        .collect();

    let mut dst = 0;
    for (pos, &subject) in sample.iter().enumerate() {
        for &src in &rows_by_subject[subject] {
            subject_id.push(pos as i64 + 1);
            visit_id.push(d.visit_id[src]);
            for c in 0..l {
                y[(dst, c)] = d.y[(src, c)];
            }
            for c in 0..p {
                x[(dst, c)] = d.x[(src, c)];
            }
            for c in 0..q {
                z[(dst, c)] = d.z[(src, c)];
            }
            for (k, wk) in d.w.iter().enumerate() {
                for c in 0..wk.ncols() {
                    w[k][(dst, c)] = wk[(src, c)];
                }
            }
            dst += 1;
        }
    }

    FunctionalDataset {
        subject_id,
        visit_id,
        y,
        x,
        z,
        w,
        grid_s: d.grid_s.clone(),
        grid_u: d.grid_u.clone(),
    }
}

fn run_bootstrap<F>(
    d: &FunctionalDataset,
    cfg: &FitConfig,
    b: usize,
    seed: u64,
    sampler: &F,
) -> Result<BootstrapEstimates>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Vec<usize> + Sync,
{
    if b < 2 {
        return Err(Error::InvalidConfig(
            "bootstrap needs at least 2 replicates".to_string(),
        ));
    }
    let original_ids = d.subjects();

    struct RepOutput {
        beta_hat: DMatrix<f64>,
        beta_smooth: DMatrix<f64>,
        gamma_hat: Vec<DMatrix<f64>>,
        gamma_smooth: Vec<DMatrix<f64>>,
        sampled: Vec<i64>,
    }

    let outputs: Vec<Result<RepOutput>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64 + 1);
            let sample = sampler(rep, &mut rng);
            let resampled = resample_subjects(d, &sample);
            let model = fit_model(&resampled, cfg)?;
            Ok(RepOutput {
                beta_hat: model.result.beta_hat,
                beta_smooth: model.result.beta_smooth,
                gamma_hat: model.result.gamma_hat,
                gamma_smooth: model.result.gamma_smooth,
                sampled: sample.iter().map(|&i| original_ids[i]).collect(),
            })
        })
        .collect();

    let mut estimates = BootstrapEstimates {
        b_requested: b,
        seed,
        beta_hat_reps: Vec::new(),
        beta_smooth_reps: Vec::new(),
        gamma_hat_reps: Vec::new(),
        gamma_smooth_reps: Vec::new(),
        indices_log: Vec::new(),
        failures: 0,
    };
    for out in outputs {
        match out {
            Ok(rep) => {
                estimates.beta_hat_reps.push(rep.beta_hat);
                estimates.beta_smooth_reps.push(rep.beta_smooth);
                estimates.gamma_hat_reps.push(rep.gamma_hat);
                estimates.gamma_smooth_reps.push(rep.gamma_smooth);
                estimates.indices_log.push(rep.sampled);
            }
            Err(_) => estimates.failures += 1,
        }
    }
    if estimates.failures * 20 > b {
        return Err(Error::BootstrapFailures {
            failed: estimates.failures,
            total: b,
        });
    }
    Ok(estimates)
}

/// Nonparametric cluster bootstrap: B replicates of subject resampling and
/// pipeline refits.
pub fn bootstrap(
    d: &FunctionalDataset,
    cfg: &FitConfig,
    b: usize,
    seed: u64,
) -> Result<BootstrapEstimates> {
    let n_subjects = d.subjects().len();
    run_bootstrap(d, cfg, b, seed, &move |_rep, rng: &mut ChaCha8Rng| {
        (0..n_subjects).map(|_| rng.gen_range(0..n_subjects)).collect()
    })
}

/// Bootstrap with an externally supplied resampling rule (used by tests to
/// force degenerate samples).
pub fn bootstrap_with_sampler(
    d: &FunctionalDataset,
    cfg: &FitConfig,
    b: usize,
    seed: u64,
    sampler: impl Fn(usize, &mut ChaCha8Rng) -> Vec<usize> + Sync,
) -> Result<BootstrapEstimates> {
    run_bootstrap(d, cfg, b, seed, &sampler)
}

/// Elementwise sample variance (divisor B − 1) across replicates.
pub fn bootstrap_variance(reps: &[DMatrix<f64>]) -> DMatrix<f64> {
    assert!(reps.len() >= 2, "need at least two replicates");
    let (r, c) = reps[0].shape();
    let bn = reps.len() as f64;
    let mut mean = DMatrix::zeros(r, c);
    for rep in reps {
        mean += rep;
    }
    mean /= bn;
    let mut var = DMatrix::zeros(r, c);
    for rep in reps {
        for i in 0..r {
            for j in 0..c {
                let dev = rep[(i, j)] - mean[(i, j)];
                var[(i, j)] += dev * dev;
            }
        }
    }
    var / (bn - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::GMethod;
    use crate::pointwise::PointwiseModelConfig;
    use crate::simulation::{generate_dataset, SimConfig};

    fn tiny_cfg() -> FitConfig {
        FitConfig {
            pointwise: PointwiseModelConfig {
                k_w: 4,
                k_g: 5,
                ..PointwiseModelConfig::default()
            },
            knots_beta: 3,
            knots_s: 3,
            knots_u: 3,
            g_method: GMethod::Marginal,
            g_knots: 3,
        }
    }

    fn tiny_sim(seed: u64) -> SimConfig {
        SimConfig {
            subjects: 15,
            mean_visits: 3,
            grid_s: 10,
            grid_u: 10,
            snr_b: 0.5,
            snr_eps: 1.5,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (d, _) = generate_dataset(&tiny_sim(5)).unwrap();
        let cfg = tiny_cfg();
        let a = bootstrap(&d, &cfg, 4, 123).unwrap();
        let b = bootstrap(&d, &cfg, 4, 123).unwrap();
        assert_eq!(a.indices_log, b.indices_log);
        for (ma, mb) in a.beta_smooth_reps.iter().zip(b.beta_smooth_reps.iter()) {
            assert_eq!(ma, mb);
        }
        for (ga, gb) in a.gamma_smooth_reps.iter().zip(b.gamma_smooth_reps.iter()) {
            assert_eq!(ga[0], gb[0]);
        }
    }

    #[test]
    fn identity_resample_reproduces_full_fit() {
        let (d, _) = generate_dataset(&tiny_sim(6)).unwrap();
        let cfg = tiny_cfg();
        let model = fit_model(&d, &cfg).unwrap();
        let n = d.subjects().len();
        let reps =
            bootstrap_with_sampler(&d, &cfg, 2, 9, |_, _| (0..n).collect::<Vec<_>>()).unwrap();
        for rep in &reps.beta_hat_reps {
            assert!((rep - &model.result.beta_hat).amax() < 1e-9);
        }
        for rep in &reps.gamma_smooth_reps {
            assert!((&rep[0] - &model.result.gamma_smooth[0]).amax() < 1e-9);
        }
    }

    #[test]
    fn variance_of_two_replicates() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let b = DMatrix::from_element(2, 2, 3.0);
        let v = bootstrap_variance(&[a, b]);
        assert!((v[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn variance_of_identical_replicates_is_zero() {
        let a = DMatrix::from_element(3, 2, 0.7);
        let v = bootstrap_variance(&[a.clone(), a.clone(), a]);
        assert!(v.amax() <= 1e-30);
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reps: Vec<DMatrix<f64>> = (0..7)
            .map(|_| DMatrix::from_fn(3, 4, |_, _| rng.gen::<f64>() * 4.0 - 2.0))
            .collect();
        let v = bootstrap_variance(&reps);
        for i in 0..3 {
            for j in 0..4 {
                let vals: Vec<f64> = reps.iter().map(|m| m[(i, j)]).collect();
                let mean = vals.iter().sum::<f64>() / 7.0;
                let oracle = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
                assert!((v[(i, j)] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_relabels_duplicates() {
        let (d, _) = generate_dataset(&tiny_sim(7)).unwrap();
        let resampled = resample_subjects(&d, &[0, 0, 2]);
        let subjects = resampled.subjects();
        assert_eq!(subjects, vec![1, 2, 3]);
        assert_eq!(resampled.n_obs(), 9);
        // duplicated subject's rows match the original values
        let rows = d.subject_rows();
        assert_eq!(resampled.y[(0, 0)], d.y[(rows[0][0], 0)]);
        assert_eq!(resampled.y[(3, 0)], d.y[(rows[0][0], 0)]);
    }
}
