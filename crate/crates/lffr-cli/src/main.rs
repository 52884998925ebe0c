//! Command-line front end: simulate datasets, fit the pipeline, run
//! inference, and execute simulation studies.
//!
//! Data always goes to files; stdout carries only summary tables and
//! progress goes to stderr. Exit codes: 0 success, 1 i/o failure, 2
//! configuration or validation error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use lffr::data::{
    load_dataset_dir, load_fit_result, read_json, save_dataset, save_fit_result, write_json,
    DatasetManifest, DATASET_MANIFEST_FILE,
};
use lffr::inference::{write_bands_csv, BandKind, ConfidenceBand};
use lffr::pipeline::{self, FitConfig, GMethod};
use lffr::pointwise::{LambdaSelection, PointwiseModelConfig};
use lffr::simulation::{generate_dataset, load_study_config, run_study, SimConfig};
use lffr::Error;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Parser)]
#[command(name = "lffr", version, about = "Longitudinal function-on-function regression")]
struct Cli {
    /// Worker threads (default: all cores; env LFFR_WORKERS overrides).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic longitudinal functional dataset.
    Simulate(SimulateArgs),
    /// Fit the pointwise-and-smooth pipeline on a dataset directory.
    Fit(FitArgs),
    /// Compute confidence bands from a fitted model.
    Infer(InferArgs),
    /// Run a multi-scenario simulation study from a TOML config.
    Study(StudyArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    subjects: usize,
    /// Visits per subject (mean with --poisson-visits).
    #[arg(long, default_value_t = 5)]
    visits: usize,
    /// Outcome grid length.
    #[arg(long = "grid-l", default_value_t = 25)]
    grid_l: usize,
    /// Predictor grid length.
    #[arg(long = "grid-u", default_value_t = 25)]
    grid_u: usize,
    #[arg(long = "snr-b", default_value_t = 0.5)]
    snr_b: f64,
    #[arg(long = "snr-eps", default_value_t = 1.5)]
    snr_eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    poisson_visits: bool,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset directory written by `simulate` (or following its layout).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of principal components for the functional predictors.
    #[arg(long = "Kw", default_value_t = 15)]
    k_w: usize,
    /// Coefficient-function spline dimension.
    #[arg(long = "Kg", default_value_t = 15)]
    k_g: usize,
    #[arg(long = "knots-beta", default_value_t = 8)]
    knots_beta: usize,
    #[arg(long = "knots-s", default_value_t = 10)]
    knots_s: usize,
    #[arg(long = "knots-u", default_value_t = 5)]
    knots_u: usize,
    /// Pin the smoothing parameter instead of selecting it.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "g-method", value_enum, default_value_t = GMethodArg::Marginal)]
    g_method: GMethodArg,
    /// Smooth each predictor curve before the component analysis.
    #[arg(long)]
    presmooth: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    /// Fit directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    method: Method,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = 300)]
    b: usize,
    /// Also compute correlation-and-multiplicity-adjusted bands.
    #[arg(long)]
    cma: bool,
    /// Monte Carlo samples for analytic CMA quantiles.
    #[arg(long = "cma-N", default_value_t = 10_000)]
    cma_n: usize,
    /// Sample CMA statistics from independent marginals instead of the
    /// joint cross-location normal.
    #[arg(long)]
    cma_marginal: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the estimated covariance field for diagnostics.
    #[arg(long)]
    save_g: bool,
}

#[derive(Args)]
struct StudyArgs {
    /// Study definition (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the master seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Analytic,
    Bootstrap,
}

#[derive(Clone, Copy, ValueEnum)]
enum GMethodArg {
    Marginal,
    Mom,
    MomRaw,
}

impl From<GMethodArg> for GMethod {
    fn from(v: GMethodArg) -> Self {
        match v {
            GMethodArg::Marginal => GMethod::Marginal,
            GMethodArg::Mom => GMethod::MomResiduals,
            GMethodArg::MomRaw => GMethod::MomRawOutcome,
        }
    }
}

static CANCEL: AtomicBool = AtomicBool::new(false);

extern "C" fn handle_sigint(_: libc::c_int) {
    CANCEL.store(true, Ordering::SeqCst);
}

fn install_sigint_handler() {
    unsafe {
        libc::signal(libc::SIGINT, handle_sigint as extern "C" fn(libc::c_int) as usize as libc::sighandler_t);
    }
}

fn main() {
    let cli = Cli::parse();

    let workers = cli
        .workers
        .or_else(|| std::env::var("LFFR_WORKERS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("lffr: could not configure {n} workers: {e}");
            std::process::exit(2);
        }
    }

    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Study(args) => cmd_study(args),
    };
    if let Err(e) = result {
        eprintln!("lffr: {e}");
        std::process::exit(if e.is_config_error() { 2 } else { 1 });
    }
}

fn write_truth_csvs(
    dir: &Path,
    truth: &lffr::simulation::GroundTruth,
) -> Result<(), Error> {
    use std::io::Write;
    let path = dir.join("truth_beta.csv");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "beta_0,beta_1").map_err(|e| Error::io(&path, e))?;
    for l in 0..truth.beta0.len() {
        writeln!(f, "{},{}", truth.beta0[l], truth.beta1[l]).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("truth_gamma.csv");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let header: Vec<String> = (0..truth.gamma.ncols()).map(|l| format!("s_{l}")).collect();
    writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(&path, e))?;
    for r in 0..truth.gamma.nrows() {
        let row: Vec<String> = (0..truth.gamma.ncols())
            .map(|c| format!("{}", truth.gamma[(r, c)]))
            .collect();
        writeln!(f, "{}", row.join(",")).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("truth_random_effects.csv");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let header: Vec<String> = (0..truth.random_effects.ncols())
        .map(|l| format!("s_{l}"))
        .collect();
    writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(&path, e))?;
    for r in 0..truth.random_effects.nrows() {
        let row: Vec<String> = (0..truth.random_effects.ncols())
            .map(|c| format!("{}", truth.random_effects[(r, c)]))
            .collect();
        writeln!(f, "{}", row.join(",")).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Error> {
    let cfg = SimConfig {
        subjects: args.subjects,
        mean_visits: args.visits,
        grid_s: args.grid_l,
        grid_u: args.grid_u,
        snr_b: args.snr_b,
        snr_eps: args.snr_eps,
        seed: args.seed,
        poisson_visits: args.poisson_visits,
        ..SimConfig::default()
    };
    cfg.validate()?;
    eprintln!(
        "simulating {} subjects x {} visits on a {}x{} grid (seed {})",
        cfg.subjects, cfg.mean_visits, cfg.grid_s, cfg.grid_u, cfg.seed
    );
    let (dataset, truth) = generate_dataset(&cfg)?;
    save_dataset(&dataset, &args.out)?;
    write_truth_csvs(&args.out, &truth)?;
    let mut manifest = DatasetManifest::for_dataset(&dataset, Some(cfg.seed));
    manifest.config = Some(serde_json::to_value(&cfg).expect("serializable config"));
    write_json(&args.out.join(DATASET_MANIFEST_FILE), &manifest)?;
    println!(
        "wrote dataset ({} rows, {} locations) to {}",
        dataset.n_obs(),
        dataset.n_locations(),
        args.out.display()
    );
    Ok(())
}

fn fit_config_from(args: &FitArgs) -> FitConfig {
    FitConfig {
        pointwise: PointwiseModelConfig {
            k_w: args.k_w,
            k_g: args.k_g,
            lambda_selection: match args.lambda {
                Some(l) => LambdaSelection::FixedValue(l),
                None => LambdaSelection::MixedModelReml,
            },
            presmooth_predictors: args.presmooth,
            ..PointwiseModelConfig::default()
        },
        knots_beta: args.knots_beta,
        knots_s: args.knots_s,
        knots_u: args.knots_u,
        g_method: args.g_method.into(),
        g_knots: args.knots_s,
    }
}

fn cmd_fit(args: FitArgs) -> Result<(), Error> {
    let dataset = load_dataset_dir(&args.data)?;
    let cfg = fit_config_from(&args);
    eprintln!(
        "fitting {} locations on {} observations",
        dataset.n_locations(),
        dataset.n_obs()
    );
    let started = std::time::Instant::now();
    let model = pipeline::fit_model(&dataset, &cfg)?;
    let elapsed = started.elapsed().as_secs_f64();
    save_fit_result(&model.result, &model.manifest(), &args.out)?;

    println!("fit finished in {elapsed:.2}s");
    println!("{:>4} {:>12} {:>10} {:>10}", "l", "lambda", "sigma2_eps", "edf_beta");
    for l in 0..model.n_locations() {
        let lambda = if model.result.lambda.nrows() > 0 {
            model.result.lambda[(0, l)]
        } else {
            f64::NAN
        };
        println!(
            "{:>4} {:>12.4e} {:>10.4} {:>10.2}",
            l,
            lambda,
            model.result.var_components[l].1,
            model.s_beta[0].edf
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct InferManifest {
    method: String,
    level: f64,
    cma: bool,
    cma_samples: usize,
    cma_joint: bool,
    bootstrap_b: Option<usize>,
    seed: u64,
    bootstrap_failures: Option<usize>,
}

fn cmd_infer(args: InferArgs) -> Result<(), Error> {
    let dataset = load_dataset_dir(&args.data)?;
    // the dataset manifest (when present) declares the outcome family
    let family = read_json::<DatasetManifest>(&args.data.join(DATASET_MANIFEST_FILE))
        .map(|m| m.family)
        .unwrap_or_else(|_| "gaussian".to_string());
    if matches!(args.method, Method::Analytic) && family != "gaussian" {
        return Err(Error::InvalidConfig(format!(
            "analytic inference requires a Gaussian outcome family, dataset declares `{family}`; \
             use --method bootstrap"
        )));
    }
    let (fit_result, fit_manifest) = load_fit_result(&args.fit)?;
    let cfg: FitConfig = serde_json::from_value(fit_manifest.config.clone())
        .map_err(|e| Error::InvalidConfig(format!("unreadable fit config: {e}")))?;
    let model = pipeline::rebuild_model(&dataset, &fit_result, &cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let mut bands: Vec<ConfidenceBand> = Vec::new();
    let mut boot_failures = None;
    match args.method {
        Method::Analytic => {
            eprintln!("analytic inference over {} locations", model.n_locations());
            let (mut pw_bands, pairwise, field) =
                pipeline::analytic_inference(&model, &dataset, args.level)?;
            bands.append(&mut pw_bands);
            if args.save_g {
                field.save_csv(&args.out.join("g_field.csv"))?;
            }
            if args.cma {
                for i in 0..model.ctx.p {
                    bands.push(pipeline::cma_band_scalar(
                        &model,
                        &pairwise,
                        i,
                        args.level,
                        args.cma_n,
                        args.seed ^ (i as u64),
                        !args.cma_marginal,
                    )?);
                }
                for k in 0..model.ctx.blocks.len() {
                    bands.push(pipeline::cma_band_surface(
                        &model,
                        &pairwise,
                        k,
                        args.level,
                        args.cma_n,
                        args.seed ^ (0x8000 + k as u64),
                        !args.cma_marginal,
                    )?);
                }
            }
        }
        Method::Bootstrap => {
            eprintln!("bootstrap inference with B = {}", args.b);
            let reps = lffr::inference::bootstrap(&dataset, &cfg, args.b, args.seed)?;
            boot_failures = Some(reps.failures);
            bands.append(&mut bootstrap_bands(&model, &reps, args.level, args.cma)?);
        }
    }

    write_bands_csv(
        &args.out.join("bands.csv"),
        &bands,
        &model.ctx.grid_s,
        &dataset.grid_u,
    )?;
    write_json(
        &args.out.join("infer_manifest.json"),
        &InferManifest {
            method: match args.method {
                Method::Analytic => "analytic".to_string(),
                Method::Bootstrap => "bootstrap".to_string(),
            },
            level: args.level,
            cma: args.cma,
            cma_samples: args.cma_n,
            cma_joint: !args.cma_marginal,
            bootstrap_b: matches!(args.method, Method::Bootstrap).then_some(args.b),
            seed: args.seed,
            bootstrap_failures: boot_failures,
        },
    )?;
    println!(
        "wrote {} bands to {}",
        bands.len(),
        args.out.join("bands.csv").display()
    );
    Ok(())
}

fn bootstrap_bands(
    model: &pipeline::FittedModel,
    reps: &lffr::inference::BootstrapEstimates,
    level: f64,
    cma: bool,
) -> Result<Vec<ConfidenceBand>, Error> {
    use lffr::inference::{
        bootstrap_variance, cma_bands, cma_critical_value, pointwise_bands, BandData, CmaSource,
    };
    use nalgebra::{DMatrix, DVector};

    let l_len = model.n_locations();
    let mut bands = Vec::new();
    let var_beta = bootstrap_variance(&reps.beta_smooth_reps);
    for i in 0..model.ctx.p {
        let est = DVector::from_fn(l_len, |l, _| model.result.beta_smooth[(i, l)]);
        let var = DVector::from_fn(l_len, |l, _| var_beta[(i, l)].max(0.0));
        bands.push(pointwise_bands(
            &format!("beta_{i}"),
            &BandData::Curve(est.clone()),
            &BandData::Curve(var.clone()),
            level,
            BandKind::PointwiseBootstrap,
        )?);
        if cma {
            let replicates: Vec<DVector<f64>> = reps
                .beta_smooth_reps
                .iter()
                .map(|m| DVector::from_fn(l_len, |l, _| m[(i, l)]))
                .collect();
            let q = cma_critical_value(
                &est,
                &var,
                CmaSource::Bootstrap {
                    replicates: &replicates,
                },
                level,
            )?;
            bands.push(cma_bands(
                &format!("beta_{i}"),
                &BandData::Curve(est),
                &BandData::Curve(var),
                q,
                level,
                BandKind::CmaBootstrap,
            )?);
        }
    }
    for k in 0..model.ctx.blocks.len() {
        let gamma_reps: Vec<DMatrix<f64>> = reps
            .gamma_smooth_reps
            .iter()
            .map(|per_k| per_k[k].clone())
            .collect();
        let var = bootstrap_variance(&gamma_reps).map(|v| v.max(0.0));
        let est = model.result.gamma_smooth[k].clone();
        bands.push(pointwise_bands(
            &format!("gamma_{}", k + 1),
            &BandData::Surface(est.clone()),
            &BandData::Surface(var.clone()),
            level,
            BandKind::PointwiseBootstrap,
        )?);
        if cma {
            let (r, l_cols) = est.shape();
            let est_vec = DVector::from_fn(r * l_cols, |idx, _| est[(idx % r, idx / r)]);
            let var_vec = DVector::from_fn(r * l_cols, |idx, _| var[(idx % r, idx / r)]);
            let replicates: Vec<DVector<f64>> = gamma_reps
                .iter()
                .map(|m| DVector::from_fn(r * l_cols, |idx, _| m[(idx % r, idx / r)]))
                .collect();
            let q = cma_critical_value(
                &est_vec,
                &var_vec,
                CmaSource::Bootstrap {
                    replicates: &replicates,
                },
                level,
            )?;
            bands.push(cma_bands(
                &format!("gamma_{}", k + 1),
                &BandData::Surface(est),
                &BandData::Surface(var),
                q,
                level,
                BandKind::CmaBootstrap,
            )?);
        }
    }
    Ok(bands)
}

fn cmd_study(args: StudyArgs) -> Result<(), Error> {
    let mut config = load_study_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    install_sigint_handler();
    eprintln!(
        "study `{}`: {} scenario(s) x {} replicates (seed {})",
        config.name,
        config.scenarios.len(),
        config.n_sims,
        config.seed
    );
    let report = run_study(&config, Some(&args.out), Some(&CANCEL))?;
    print!("{}", report.table());
    if report.cancelled {
        println!("study interrupted: partial replicate rows flushed to {}", args.out.display());
    }
    Ok(())
}
