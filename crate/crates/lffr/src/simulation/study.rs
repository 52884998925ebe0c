//! Factorial simulation studies: accuracy (integrated squared error) and
//! empirical coverage across scenarios, with per-replicate seeds logged for
//! exact re-runs.

use crate::error::{Error, Result};
use crate::inference::{
    bootstrap, bootstrap_variance, compute_pairwise, pointwise_bands, BandData, BandKind,
};
use crate::pipeline::{self, FitConfig, GMethod};
use crate::pointwise::{LambdaSelection, PointwiseModelConfig};
use crate::simulation::{coverage, generate_dataset, ise_scalar, ise_surface, SimConfig, TruthSpec};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::Instant;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed stream: replicate seeds are shared across scenarios so
/// paired comparisons (e.g. two smoother settings) see the same data.
pub fn derive_seed(master: u64, replicate: u64, purpose: u64) -> u64 {
    splitmix64(master ^ splitmix64(replicate.wrapping_mul(2) ^ purpose.wrapping_mul(0x1234_5678_9ABC_DEF1)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodsConfig {
    pub analytic: bool,
    pub bootstrap_b: Option<usize>,
    pub cma: bool,
    pub cma_samples: usize,
    /// Sample the CMA max statistic from the joint cross-location normal
    /// rather than independent marginals.
    pub cma_joint: bool,
    pub level: f64,
}

impl Default for MethodsConfig {
    fn default() -> Self {
        MethodsConfig {
            analytic: true,
            bootstrap_b: None,
            cma: false,
            cma_samples: 10_000,
            cma_joint: true,
            level: 0.95,
        }
    }
}

fn default_visits() -> usize {
    5
}
fn default_grid() -> usize {
    25
}
fn default_snr_b() -> f64 {
    0.5
}
fn default_snr_eps() -> f64 {
    1.5
}
fn default_k() -> usize {
    15
}
fn default_knots_beta() -> usize {
    8
}
fn default_knots_s() -> usize {
    10
}
fn default_knots_u() -> usize {
    5
}
fn default_g_method() -> GMethod {
    GMethod::Marginal
}
fn default_g_knots() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub label: String,
    pub subjects: usize,
    #[serde(default = "default_visits")]
    pub mean_visits: usize,
    #[serde(default = "default_grid")]
    pub grid_s: usize,
    #[serde(default = "default_grid")]
    pub grid_u: usize,
    #[serde(default = "default_snr_b")]
    pub snr_b: f64,
    #[serde(default = "default_snr_eps")]
    pub snr_eps: f64,
    #[serde(default)]
    pub poisson_visits: bool,
    #[serde(default = "default_k")]
    pub k_w: usize,
    #[serde(default = "default_k")]
    pub k_g: usize,
    #[serde(default = "default_knots_beta")]
    pub knots_beta: usize,
    #[serde(default = "default_knots_s")]
    pub knots_s: usize,
    #[serde(default = "default_knots_u")]
    pub knots_u: usize,
    #[serde(default = "default_g_method")]
    pub g_method: GMethod,
    #[serde(default = "default_g_knots")]
    pub g_knots: usize,
    /// Pin the smoothing parameter instead of selecting it.
    #[serde(default)]
    pub fixed_lambda: Option<f64>,
}

impl ScenarioConfig {
    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            subjects: self.subjects,
            mean_visits: self.mean_visits,
            grid_s: self.grid_s,
            grid_u: self.grid_u,
            snr_b: self.snr_b,
            snr_eps: self.snr_eps,
            seed,
            poisson_visits: self.poisson_visits,
            truth: TruthSpec::default(),
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            pointwise: PointwiseModelConfig {
                k_w: self.k_w,
                k_g: self.k_g,
                lambda_selection: match self.fixed_lambda {
                    Some(l) => LambdaSelection::FixedValue(l),
                    None => LambdaSelection::MixedModelReml,
                },
                ..PointwiseModelConfig::default()
            },
            knots_beta: self.knots_beta,
            knots_s: self.knots_s,
            knots_u: self.knots_u,
            g_method: self.g_method,
            g_knots: self.g_knots,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub name: String,
    pub n_sims: usize,
    pub seed: u64,
    #[serde(default)]
    pub methods: MethodsConfig,
    pub scenarios: Vec<ScenarioConfig>,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sims == 0 {
            return Err(Error::InvalidConfig("n_sims must be positive".to_string()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one scenario is required".to_string(),
            ));
        }
        if !(self.methods.level > 0.0 && self.methods.level < 1.0) {
            return Err(Error::InvalidConfig("level must lie in (0, 1)".to_string()));
        }
        Ok(())
    }
}

pub fn load_study_config(path: &Path) -> Result<StudyConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: StudyConfig = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        detail: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// One replicate's metrics. Missing values mean the method was not run.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicateRow {
    pub scenario: String,
    pub replicate: usize,
    pub seed: u64,
    pub ise_beta0: Option<f64>,
    pub ise_beta1: Option<f64>,
    pub ise_gamma: Option<f64>,
    pub cov_beta1_analytic: Option<f64>,
    pub cov_gamma_analytic: Option<f64>,
    pub cov_beta1_cma: Option<f64>,
    pub cov_beta1_bootstrap: Option<f64>,
    pub cov_gamma_bootstrap: Option<f64>,
    pub elapsed_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioAggregate {
    pub scenario: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mise_beta0: Option<f64>,
    pub mise_beta1: Option<f64>,
    pub mise_gamma: Option<f64>,
    pub cov_beta1_analytic: Option<f64>,
    pub cov_gamma_analytic: Option<f64>,
    pub cov_beta1_cma: Option<f64>,
    pub cov_beta1_bootstrap: Option<f64>,
    pub cov_gamma_bootstrap: Option<f64>,
    pub mean_elapsed_s: f64,
}

#[derive(Debug)]
pub struct StudyReport {
    pub name: String,
    pub rows: Vec<ReplicateRow>,
    pub aggregates: Vec<ScenarioAggregate>,
    pub cancelled: bool,
}

fn run_replicate(
    scenario: &ScenarioConfig,
    methods: &MethodsConfig,
    replicate: usize,
    master_seed: u64,
) -> Result<ReplicateRow> {
    let start = Instant::now();
    let sim_seed = derive_seed(master_seed, replicate as u64, 0);
    let (d, truth) = generate_dataset(&scenario.sim_config(sim_seed))?;
    let fit_cfg = scenario.fit_config();
    let model = pipeline::fit_model(&d, &fit_cfg)?;
    let grid_s = &model.ctx.grid_s;
    let grid_u = &model.ctx.blocks[0].fpca.grid_u;

    let beta0_est = DVector::from_fn(grid_s.len(), |l, _| model.result.beta_smooth[(0, l)]);
    let beta1_est = DVector::from_fn(grid_s.len(), |l, _| model.result.beta_smooth[(1, l)]);
    let mut row = ReplicateRow {
        scenario: scenario.label.clone(),
        replicate,
        seed: sim_seed,
        ise_beta0: Some(ise_scalar(&beta0_est, &truth.beta0, grid_s)?),
        ise_beta1: Some(ise_scalar(&beta1_est, &truth.beta1, grid_s)?),
        ise_gamma: Some(ise_surface(
            &model.result.gamma_smooth[0],
            &truth.gamma,
            grid_u,
            grid_s,
        )?),
        cov_beta1_analytic: None,
        cov_gamma_analytic: None,
        cov_beta1_cma: None,
        cov_beta1_bootstrap: None,
        cov_gamma_bootstrap: None,
        elapsed_s: 0.0,
        error: None,
    };

    let truth_beta1 = BandData::Curve(truth.beta1.clone());
    let truth_gamma = BandData::Surface(truth.gamma.clone());

    if methods.analytic || methods.cma {
        let field = pipeline::covariance_field(&model, &d)?;
        let pairwise = compute_pairwise(&model.ctx, &model.fits, &field)?;
        if methods.analytic {
            let bands = pipeline::analytic_bands(&model, &pairwise, methods.level)?;
            row.cov_beta1_analytic = Some(coverage(&bands[1], &truth_beta1)?);
            row.cov_gamma_analytic = Some(coverage(&bands[model.ctx.p], &truth_gamma)?);
        }
        if methods.cma {
            let cma_seed = derive_seed(master_seed, replicate as u64, 2);
            let band = pipeline::cma_band_scalar(
                &model,
                &pairwise,
                1,
                methods.level,
                methods.cma_samples,
                cma_seed,
                methods.cma_joint,
            )?;
            row.cov_beta1_cma = Some(coverage(&band, &truth_beta1)?);
        }
    }

    if let Some(b) = methods.bootstrap_b {
        let boot_seed = derive_seed(master_seed, replicate as u64, 1);
        let reps = bootstrap(&d, &fit_cfg, b, boot_seed)?;
        let var_beta = bootstrap_variance(&reps.beta_smooth_reps);
        let var_beta1 =
            DVector::from_fn(grid_s.len(), |l, _| var_beta[(1, l)].max(0.0));
        let band_beta1 = pointwise_bands(
            "beta_1",
            &BandData::Curve(beta1_est.clone()),
            &BandData::Curve(var_beta1),
            methods.level,
            BandKind::PointwiseBootstrap,
        )?;
        row.cov_beta1_bootstrap = Some(coverage(&band_beta1, &truth_beta1)?);

        let gamma_reps: Vec<_> = reps
            .gamma_smooth_reps
            .iter()
            .map(|per_k| per_k[0].clone())
            .collect();
        let var_gamma = bootstrap_variance(&gamma_reps);
        let band_gamma = pointwise_bands(
            "gamma_1",
            &BandData::Surface(model.result.gamma_smooth[0].clone()),
            &BandData::Surface(var_gamma),
            methods.level,
            BandKind::PointwiseBootstrap,
        )?;
        row.cov_gamma_bootstrap = Some(coverage(&band_gamma, &truth_gamma)?);
    }

    row.elapsed_s = start.elapsed().as_secs_f64();
    Ok(row)
}

fn mean_of(rows: &[&ReplicateRow], get: impl Fn(&ReplicateRow) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| get(r)).collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

const ROW_HEADER: &str = "scenario,replicate,seed,ise_beta0,ise_beta1,ise_gamma,cov_beta1_analytic,cov_gamma_analytic,cov_beta1_cma,cov_beta1_bootstrap,cov_gamma_bootstrap,elapsed_s,error";

fn format_row(row: &ReplicateRow) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.scenario,
        row.replicate,
        row.seed,
        opt(row.ise_beta0),
        opt(row.ise_beta1),
        opt(row.ise_gamma),
        opt(row.cov_beta1_analytic),
        opt(row.cov_gamma_analytic),
        opt(row.cov_beta1_cma),
        opt(row.cov_beta1_bootstrap),
        opt(row.cov_gamma_bootstrap),
        row.elapsed_s,
        row.error.clone().unwrap_or_default()
    )
}

/// Run every scenario for `n_sims` replicates. Replicates run in parallel
/// and write independent slots, so the report is identical for any worker
/// count. When `out_dir` is given, per-replicate rows are appended and
/// flushed as they finish; the final ordered files are rewritten at the end.
/// A set `cancel` flag stops new replicates and returns the partial report.
pub fn run_study(
    config: &StudyConfig,
    out_dir: Option<&Path>,
    cancel: Option<&AtomicBool>,
) -> Result<StudyReport> {
    config.validate()?;
    let progress_writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("replicates_progress.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{ROW_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some(Mutex::new(f))
        }
        None => None,
    };

    let tasks: Vec<(usize, usize)> = (0..config.scenarios.len())
        .flat_map(|s| (0..config.n_sims).map(move |r| (s, r)))
        .collect();

    let slots: Vec<Option<ReplicateRow>> = tasks
        .par_iter()
        .map(|&(s, r)| {
            if let Some(flag) = cancel {
                if flag.load(Ordering::Relaxed) {
                    return None;
                }
            }
            let scenario = &config.scenarios[s];
            let row = match run_replicate(scenario, &config.methods, r, config.seed) {
                Ok(row) => row,
                Err(e) => ReplicateRow {
                    scenario: scenario.label.clone(),
                    replicate: r,
                    seed: derive_seed(config.seed, r as u64, 0),
                    ise_beta0: None,
                    ise_beta1: None,
                    ise_gamma: None,
                    cov_beta1_analytic: None,
                    cov_gamma_analytic: None,
                    cov_beta1_cma: None,
                    cov_beta1_bootstrap: None,
                    cov_gamma_bootstrap: None,
                    elapsed_s: 0.0,
                    error: Some(e.to_string()),
                },
            };
            if let Some(writer) = &progress_writer {
                let mut f = writer.lock().expect("progress writer lock");
                let _ = writeln!(f, "{}", format_row(&row));
                let _ = f.flush();
            }
            Some(row)
        })
        .collect();

    let cancelled = slots.iter().any(|s| s.is_none());
    let rows: Vec<ReplicateRow> = slots.into_iter().flatten().collect();

    let mut aggregates = Vec::new();
    for scenario in &config.scenarios {
        let sc_rows: Vec<&ReplicateRow> = rows
            .iter()
            .filter(|r| r.scenario == scenario.label)
            .collect();
        let ok: Vec<&ReplicateRow> = sc_rows
            .iter()
            .copied()
            .filter(|r| r.error.is_none())
            .collect();
        let n_failed = sc_rows.len() - ok.len();
        if !cancelled && n_failed * 20 > sc_rows.len() {
            return Err(Error::BootstrapFailures {
                failed: n_failed,
                total: sc_rows.len(),
            });
        }
        aggregates.push(ScenarioAggregate {
            scenario: scenario.label.clone(),
            n_ok: ok.len(),
            n_failed,
            mise_beta0: mean_of(&ok, |r| r.ise_beta0),
            mise_beta1: mean_of(&ok, |r| r.ise_beta1),
            mise_gamma: mean_of(&ok, |r| r.ise_gamma),
            cov_beta1_analytic: mean_of(&ok, |r| r.cov_beta1_analytic),
            cov_gamma_analytic: mean_of(&ok, |r| r.cov_gamma_analytic),
            cov_beta1_cma: mean_of(&ok, |r| r.cov_beta1_cma),
            cov_beta1_bootstrap: mean_of(&ok, |r| r.cov_beta1_bootstrap),
            cov_gamma_bootstrap: mean_of(&ok, |r| r.cov_gamma_bootstrap),
            mean_elapsed_s: mean_of(&ok, |r| Some(r.elapsed_s)).unwrap_or(0.0),
        });
    }

    let report = StudyReport {
        name: config.name.clone(),
        rows,
        aggregates,
        cancelled,
    };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

impl StudyReport {
    /// Final ordered CSV artifacts.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("replicates.csv");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{ROW_HEADER}").map_err(|e| Error::io(&path, e))?;
        let mut ordered: Vec<&ReplicateRow> = self.rows.iter().collect();
        ordered.sort_by(|a, b| (&a.scenario, a.replicate).cmp(&(&b.scenario, b.replicate)));
        for row in ordered {
            writeln!(f, "{}", format_row(row)).map_err(|e| Error::io(&path, e))?;
        }

        let path = dir.join("summary.csv");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(
            f,
            "scenario,n_ok,n_failed,mise_beta0,mise_beta1,mise_gamma,cov_beta1_analytic,cov_gamma_analytic,cov_beta1_cma,cov_beta1_bootstrap,cov_gamma_bootstrap,mean_elapsed_s"
        )
        .map_err(|e| Error::io(&path, e))?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for a in &self.aggregates {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                a.scenario,
                a.n_ok,
                a.n_failed,
                opt(a.mise_beta0),
                opt(a.mise_beta1),
                opt(a.mise_gamma),
                opt(a.cov_beta1_analytic),
                opt(a.cov_gamma_analytic),
                opt(a.cov_beta1_cma),
                opt(a.cov_beta1_bootstrap),
                opt(a.cov_gamma_bootstrap),
                a.mean_elapsed_s
            )
            .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("study: {}\n", self.name));
        if self.cancelled {
            out.push_str("(cancelled: partial results)\n");
        }
        out.push_str(&format!(
            "{:<18} {:>5} {:>11} {:>11} {:>11} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8}\n",
            "scenario",
            "ok",
            "mise_b0",
            "mise_b1",
            "mise_gamma",
            "b1_ana",
            "g_ana",
            "b1_cma",
            "b1_boot",
            "g_boot",
            "sec/rep"
        ));
        let fmt = |v: Option<f64>, width: usize, prec: usize| match v {
            Some(x) => format!("{x:>width$.prec$}"),
            None => format!("{:>width$}", "-"),
        };
        for a in &self.aggregates {
            out.push_str(&format!(
                "{:<18} {:>5} {} {} {} {} {} {} {} {} {:>8.2}\n",
                a.scenario,
                a.n_ok,
                fmt(a.mise_beta0, 11, 6),
                fmt(a.mise_beta1, 11, 6),
                fmt(a.mise_gamma, 11, 6),
                fmt(a.cov_beta1_analytic, 9, 3),
                fmt(a.cov_gamma_analytic, 9, 3),
                fmt(a.cov_beta1_cma, 9, 3),
                fmt(a.cov_beta1_bootstrap, 9, 3),
                fmt(a.cov_gamma_bootstrap, 9, 3),
                a.mean_elapsed_s
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config() -> StudyConfig {
        StudyConfig {
            name: "smoke".to_string(),
            n_sims: 1,
            seed: 11,
            methods: MethodsConfig {
                analytic: true,
                bootstrap_b: Some(3),
                cma: true,
                cma_samples: 500,
                cma_joint: true,
                level: 0.95,
            },
            scenarios: vec![ScenarioConfig {
                label: "tiny".to_string(),
                subjects: 15,
                mean_visits: 3,
                grid_s: 10,
                grid_u: 10,
                snr_b: 0.5,
                snr_eps: 1.5,
                poisson_visits: false,
                k_w: 4,
                k_g: 5,
                knots_beta: 3,
                knots_s: 3,
                knots_u: 3,
                g_method: GMethod::Marginal,
                g_knots: 3,
                fixed_lambda: None,
            }],
        }
    }

    #[test]
    fn smoke_run_emits_all_columns() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_study(&smoke_config(), Some(dir.path()), None).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert!(row.error.is_none(), "replicate failed: {:?}", row.error);
        assert!(row.ise_beta0.is_some());
        assert!(row.ise_gamma.is_some());
        assert!(row.cov_beta1_analytic.is_some());
        assert!(row.cov_gamma_analytic.is_some());
        assert!(row.cov_beta1_cma.is_some());
        assert!(row.cov_gamma_bootstrap.is_some());
        assert!(dir.path().join("replicates.csv").exists());
        assert!(dir.path().join("summary.csv").exists());
        let text = fs::read_to_string(dir.path().join("replicates.csv")).unwrap();
        assert!(text.lines().count() == 2);
        assert!(!report.table().is_empty());
    }

    #[test]
    fn toml_round_trip_and_unknown_key_rejection() {
        let cfg = smoke_config();
        let text = toml::to_string(&cfg).unwrap();
        let parsed: StudyConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.scenarios[0].label, "tiny");

        let bad = format!("{text}\nunknown_key = 3\n");
        assert!(toml::from_str::<StudyConfig>(&bad).is_err());
    }

    #[test]
    fn cancel_before_start_yields_empty_partial_report() {
        let flag = AtomicBool::new(true);
        let report = run_study(&smoke_config(), None, Some(&flag)).unwrap();
        assert!(report.cancelled);
        assert!(report.rows.is_empty());
    }

    #[test]
    fn replicate_seeds_shared_across_scenarios() {
        assert_eq!(derive_seed(5, 3, 0), derive_seed(5, 3, 0));
        assert_ne!(derive_seed(5, 3, 0), derive_seed(5, 3, 1));
        assert_ne!(derive_seed(5, 3, 0), derive_seed(5, 4, 0));
    }
}
