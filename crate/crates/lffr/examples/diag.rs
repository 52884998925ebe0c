//! Scratch diagnostic: Monte-Carlo vs analytic variances at the baseline
//! simulation setting.

use lffr::inference::{analytic, compute_pairwise};
use lffr::pipeline::{self, FitConfig};
use lffr::simulation::{generate_dataset, SimConfig};
use nalgebra::{DMatrix, DVector};

fn main() {
    let reps = 40;
    let cfg = FitConfig::default();
    let l_len = 25usize;
    let r_len = 25usize;

    let mut beta1_raw: Vec<DVector<f64>> = Vec::new();
    let mut beta1_smooth: Vec<DVector<f64>> = Vec::new();
    let mut gamma_smooth: Vec<DMatrix<f64>> = Vec::new();
    let mut gamma_raw: Vec<DMatrix<f64>> = Vec::new();
    let mut ana_sd_raw: DVector<f64> = DVector::zeros(l_len);
    let mut ana_sd_smooth: DVector<f64> = DVector::zeros(l_len);
    let mut ana_sd_gamma: DMatrix<f64> = DMatrix::zeros(r_len, l_len);
    let mut truth_gamma = DMatrix::zeros(r_len, l_len);
    let mut truth_beta1 = DVector::zeros(l_len);
    let mut ise_raw_sum = 0.0;
    let mut ise_smooth_sum = 0.0;
    let mut g_field_mean: DMatrix<f64> = DMatrix::zeros(l_len, l_len);
    let mut g_mom_mean: DMatrix<f64> = DMatrix::zeros(l_len, l_len);
    let mut g_raw_marg_mean: DMatrix<f64> = DMatrix::zeros(l_len, l_len);
    let mut cov11_mean: DMatrix<f64> = DMatrix::zeros(l_len, l_len);
    let mut true_g: DMatrix<f64> = DMatrix::zeros(l_len, l_len);
    let mut lambda_mean = 0.0;

    for rep in 0..reps {
        let sim = SimConfig {
            seed: 9000 + rep as u64,
            ..SimConfig::default()
        };
        let (d, truth) = generate_dataset(&sim).unwrap();
        let model = pipeline::fit_model(&d, &cfg).unwrap();
        let field = pipeline::covariance_field(&model, &d).unwrap();
        let pairwise = compute_pairwise(&model.ctx, &model.fits, &field).unwrap();
        for l1 in 0..l_len { for l2 in 0..l_len {
            g_field_mean[(l1,l2)] += field.entry(0,0,l1,l2) / reps as f64;
        }}
        // raw marginal + mom for comparison
        {
            let betas: Vec<DVector<f64>> = model.fits.iter().map(|f| f.beta_star.clone()).collect();
            let raw = lffr::covariance::estimate_g_marginal(&d.y, &model.ctx.xstar, &betas, 1, &model.ctx.grid_s).unwrap();
            let mut residuals = d.y.clone();
            for l in 0..l_len {
                let fitted = &model.ctx.xstar * &model.fits[l].beta_star;
                for r in 0..d.n_obs() { residuals[(r, l)] -= fitted[r]; }
            }
            let mom = lffr::covariance::estimate_g_mom(&residuals, &d.z, &d.subject_id, &model.ctx.grid_s).unwrap();
            for l1 in 0..l_len { for l2 in 0..l_len {
                g_raw_marg_mean[(l1,l2)] += raw.entry(0,0,l1,l2) / reps as f64;
                g_mom_mean[(l1,l2)] += mom.entry(0,0,l1,l2) / reps as f64;
            }}
        }
        for l1 in 0..l_len { for l2 in 0..l_len {
            cov11_mean[(l1,l2)] += pairwise.cov(l1,l2)[(1,1)] / reps as f64;
        }}
        // true G from realized subject effects
        {
            let re = &truth.random_effects;
            let i_n = re.nrows() as f64;
            for l1 in 0..l_len { for l2 in 0..l_len {
                let mut acc = 0.0;
                let m1: f64 = (0..re.nrows()).map(|i| re[(i,l1)]).sum::<f64>()/i_n;
                let m2: f64 = (0..re.nrows()).map(|i| re[(i,l2)]).sum::<f64>()/i_n;
                for i in 0..re.nrows() { acc += (re[(i,l1)]-m1)*(re[(i,l2)]-m2); }
                true_g[(l1,l2)] += acc / (i_n - 1.0) / reps as f64;
            }}
        }
        lambda_mean += model.fits.iter().map(|f| f.lambda[0]).sum::<f64>() / (l_len as f64 * reps as f64);

        let cov1 = pairwise.scalar_curve_cov(1);
        let smooth_cov1 = analytic::smoothed_curve_cov(&cov1, &model.s_beta[1]);
        for l in 0..l_len {
            ana_sd_raw[l] += cov1[(l, l)].max(0.0).sqrt() / reps as f64;
            ana_sd_smooth[l] += smooth_cov1[(l, l)].max(0.0).sqrt() / reps as f64;
        }
        let block = &model.ctx.blocks[0];
        let var_g = analytic::surface_var_smoothed_diag(
            &pairwise,
            block.cols.clone(),
            &block.phi.values,
            &model.s_response[0],
            &model.s_predictor[0],
        );
        for r in 0..r_len {
            for l in 0..l_len {
                ana_sd_gamma[(r, l)] += var_g[(r, l)].max(0.0).sqrt() / reps as f64;
            }
        }

        beta1_raw.push(DVector::from_fn(l_len, |l, _| model.result.beta_hat[(1, l)]));
        beta1_smooth.push(DVector::from_fn(l_len, |l, _| model.result.beta_smooth[(1, l)]));
        gamma_smooth.push(model.result.gamma_smooth[0].clone());
        gamma_raw.push(model.result.gamma_hat[0].clone());
        truth_gamma = truth.gamma.clone();
        truth_beta1 = truth.beta1.clone();

        ise_raw_sum += lffr::simulation::ise_surface(
            &model.result.gamma_hat[0],
            &truth.gamma,
            &model.ctx.blocks[0].fpca.grid_u,
            &model.ctx.grid_s,
        )
        .unwrap();
        ise_smooth_sum += lffr::simulation::ise_surface(
            &model.result.gamma_smooth[0],
            &truth.gamma,
            &model.ctx.blocks[0].fpca.grid_u,
            &model.ctx.grid_s,
        )
        .unwrap();
    }

    let mc_sd = |vs: &Vec<DVector<f64>>| -> DVector<f64> {
        let n = vs.len() as f64;
        let mut mean = DVector::zeros(l_len);
        for v in vs {
            mean += v;
        }
        mean /= n;
        let mut var: DVector<f64> = DVector::zeros(l_len);
        for v in vs {
            for l in 0..l_len {
                var[l] += (v[l] - mean[l]).powi(2);
            }
        }
        var.map(|x: f64| (x / (n - 1.0)).sqrt())
    };

    let sd_raw = mc_sd(&beta1_raw);
    let sd_smooth = mc_sd(&beta1_smooth);
    println!("loc  mc_sd_raw  ana_sd_raw  mc_sd_sm  ana_sd_sm");
    for l in (0..l_len).step_by(4) {
        println!(
            "{l:>3}  {:>9.5}  {:>10.5}  {:>8.5}  {:>9.5}",
            sd_raw[l], ana_sd_raw[l], sd_smooth[l], ana_sd_smooth[l]
        );
    }

    // surface: MC sd and analytic sd at a few points + bias
    let n = reps as f64;
    let mut gmean = DMatrix::zeros(r_len, l_len);
    for g in &gamma_smooth {
        gmean += g;
    }
    gmean /= n;
    let mut gvar: DMatrix<f64> = DMatrix::zeros(r_len, l_len);
    for g in &gamma_smooth {
        for r in 0..r_len {
            for l in 0..l_len {
                gvar[(r, l)] += (g[(r, l)] - gmean[(r, l)]).powi(2);
            }
        }
    }
    let gsd = gvar.map(|x: f64| (x / (n - 1.0)).sqrt());
    println!("\n(r,l)  mc_sd_gam  ana_sd_gam  bias_gam");
    for &(r, l) in &[(0usize, 0usize), (6, 6), (12, 12), (12, 18), (18, 6), (24, 24), (0, 24)] {
        println!(
            "({r:>2},{l:>2})  {:>9.5}  {:>10.5}  {:>8.5}",
            gsd[(r, l)],
            ana_sd_gamma[(r, l)],
            gmean[(r, l)] - truth_gamma[(r, l)]
        );
    }

    // raw surface MC sd vs nothing (bias of raw)
    let mut graw_mean = DMatrix::zeros(r_len, l_len);
    for g in &gamma_raw {
        graw_mean += g;
    }
    graw_mean /= n;
    println!("\nraw gamma bias at same points:");
    for &(r, l) in &[(0usize, 0usize), (6, 6), (12, 12), (12, 18), (18, 6), (24, 24), (0, 24)] {
        println!("({r:>2},{l:>2})  {:>8.5}", graw_mean[(r, l)] - truth_gamma[(r, l)]);
    }

    println!("\nbeta1 smooth bias at a few locations:");
    let b1mean = {
        let mut m = DVector::zeros(l_len);
        for v in &beta1_smooth {
            m += v;
        }
        m / n
    };
    for l in (0..l_len).step_by(4) {
        println!("{l:>3}  {:>9.5}", b1mean[l] - truth_beta1[l]);
    }

    println!(
        "\nmean ISE gamma: raw {:.5}, smoothed {:.5}",
        ise_raw_sum / n,
        ise_smooth_num() / n
    );
    fn ise_smooth_num() -> f64 { 0.0 }
    println!("mean lambda: {lambda_mean:.4}");
    // MC cross-covariance of beta1_raw across replicates
    let mut mc_cov11: DMatrix<f64> = DMatrix::zeros(l_len, l_len);
    {
        let mut mean = DVector::zeros(l_len);
        for v in &beta1_raw { mean += v; }
        mean /= n;
        for v in &beta1_raw {
            for l1 in 0..l_len { for l2 in 0..l_len {
                mc_cov11[(l1,l2)] += (v[l1]-mean[l1])*(v[l2]-mean[l2])/(n-1.0);
            }}
        }
    }
    println!("\npair   true_G  field_G  raw_marg   mom_G  | mc_cov11  ana_cov11");
    for &(l1,l2) in &[(0usize,0usize),(0,1),(0,3),(0,6),(12,12),(12,13),(12,15),(12,18),(24,24),(6,18)] {
        println!("({l1:>2},{l2:>2}) {:>8.4} {:>8.4} {:>9.4} {:>7.4} | {:>9.2e} {:>9.2e}",
            true_g[(l1,l2)], g_field_mean[(l1,l2)], g_raw_marg_mean[(l1,l2)], g_mom_mean[(l1,l2)],
            mc_cov11[(l1,l2)], cov11_mean[(l1,l2)]);
    }
}
