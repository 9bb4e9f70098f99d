//! `nbscreen`: estimate, benchmark, train and plot from the command line.

mod input;
mod plot;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use nbscreen::bench::{
    self, AccuracyConfig, CalibrationConfig, DesignSpec, ExperimentConfig, Manifest, MethodsConfig, PowerConfig,
    Results, WeightsRef,
};
use nbscreen::estimators::{Estimator, Method, MleEstimator, MleOptions, MomEstimator};
use nbscreen::inference::test_effect;
use nbscreen::transformer::{load_weights, save_weights, Precision, RunConfig, TrainManifest, TransformerEstimator};
use nbscreen::{rng, Error, Priors};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "nbscreen", version, about = "Negative binomial regression for two-group count experiments")]
struct Cli {
    /// Seed for every random draw; a fresh one is chosen (and recorded) when absent.
    #[arg(long, global = true, env = "NBSCREEN_SEED")]
    seed: Option<u64>,

    /// Worker threads; 1 gives a strictly serial run. Defaults to all cores.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,

    /// Prior specification (TOML); the built-in priors are used when absent.
    #[arg(long, global = true)]
    priors: Option<PathBuf>,

    /// Output location: directory for `bench`, weight file for `train`, SVG file for `plot`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate one problem and test β = 0.
    Estimate(EstimateArgs),
    /// Run a benchmark sweep and write its CSVs and manifest.
    Bench {
        #[command(subcommand)]
        experiment: BenchCommand,
    },
    /// Train the set transformer on simulated problems.
    Train(TrainArgs),
    /// Draw a figure from a benchmark CSV.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_design(s: &str) -> Result<DesignSpec, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// mom, mle or transformer.
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// NBTF weight file; required for the transformer.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Problem CSV with header `y,l,x`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "single")]
    precision: PrecisionArg,
}

#[derive(Debug, Args)]
struct MethodArgs {
    /// Comma-separated subset of mom, mle, transformer.
    #[arg(long, value_parser = parse_method, value_delimiter = ',', default_value = "mom,mle")]
    methods: Vec<Method>,
    /// NBTF weight file; required when the transformer is listed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "single")]
    precision: PrecisionArg,
    /// Problems per estimator call.
    #[arg(long, default_value_t = bench::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// Replay a previous run: every setting except --out and --threads comes from this manifest.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Estimation error and runtime on problems drawn from the priors.
    Accuracy {
        /// Number of problems.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, value_parser = parse_design, default_value = "3v3")]
        design: DesignSpec,
        /// Dispersion estimates below this count as this value on the ln φ scale.
        #[arg(long, default_value_t = bench::DEFAULT_PHI_FLOOR)]
        phi_floor: f64,
        #[command(flatten)]
        methods: MethodArgs,
    },
    /// Null p-value distribution (β = 0).
    Calibration {
        /// Number of null simulations.
        #[arg(long, default_value_t = 1_000)]
        n: usize,
        #[arg(long, value_parser = parse_design, default_value = "3v3")]
        design: DesignSpec,
        /// Rejection threshold for p-values.
        #[arg(long, default_value_t = bench::DEFAULT_LEVEL)]
        level: f64,
        #[command(flatten)]
        methods: MethodArgs,
    },
    /// Rejection rates over known effect sizes and designs.
    Power {
        /// Simulations per (design, β) cell.
        #[arg(long, default_value_t = 1_000)]
        n: usize,
        /// Comma-separated effect sizes; ten values evenly spaced on [0, 2.5] by default.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        betas: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_design, value_delimiter = ',', default_value = "3v3,5v5,7v7,9v9")]
        designs: Vec<DesignSpec>,
        /// Rejection threshold for p-values.
        #[arg(long, default_value_t = bench::DEFAULT_LEVEL)]
        level: f64,
        #[command(flatten)]
        methods: MethodArgs,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training config (TOML with optional [model] and [train] tables); desk preset when absent.
    #[arg(long, conflicts_with = "from_manifest")]
    config: Option<PathBuf>,
    /// Replay a previous training run from its manifest.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long, value_enum)]
    experiment: plot::Experiment,
    /// Benchmark CSV to draw.
    #[arg(long = "in")]
    input: PathBuf,
}

fn usage_error(kind: clap::error::ErrorKind, msg: &str) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn load_priors(path: Option<&Path>) -> Result<Priors> {
    match path {
        Some(p) => Priors::load(p).with_context(|| format!("loading priors from {}", p.display())),
        None => Ok(Priors::default()),
    }
}

fn seed_or_fresh(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(rng::fresh_seed)
}

#[derive(Serialize)]
struct EstimateRecord {
    method: Method,
    mu_hat: f64,
    beta_hat: f64,
    phi_hat: f64,
    se_beta: Option<f64>,
    z: Option<f64>,
    p_value: Option<f64>,
    converged: bool,
    iterations: usize,
}

fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    if args.method == Method::Transformer && args.weights.is_none() {
        usage_error(clap::error::ErrorKind::MissingRequiredArgument, "--weights <FILE> is required with --method transformer");
    }
    let problem = input::load_problem(&args.input)?;
    let estimator: Box<dyn Estimator> = match args.method {
        Method::Mom => Box::new(MomEstimator),
        Method::Mle => Box::new(MleEstimator::new(MleOptions::default())),
        Method::Transformer => {
            let path = args.weights.as_ref().expect("checked above");
            let w = load_weights(path).with_context(|| format!("loading weights from {}", path.display()))?;
            Box::new(TransformerEstimator::with_precision(w, args.precision.into()))
        }
    };
    let est = estimator.estimate(&problem)?;
    let wald = test_effect(&problem, &est.theta).ok();
    let rec = EstimateRecord {
        method: est.method,
        mu_hat: est.theta.mu,
        beta_hat: est.theta.beta,
        phi_hat: est.theta.phi,
        se_beta: wald.map(|w| w.se_beta),
        z: wald.map(|w| w.z),
        p_value: wald.map(|w| w.p),
        converged: est.converged,
        iterations: est.iterations,
    };
    println!("{}", serde_json::to_string(&rec)?);
    Ok(())
}

fn methods_config(m: &MethodArgs) -> Result<MethodsConfig> {
    if m.methods.contains(&Method::Transformer) && m.weights.is_none() {
        usage_error(clap::error::ErrorKind::MissingRequiredArgument, "--weights <FILE> is required when --methods lists transformer");
    }
    let weights = match &m.weights {
        Some(path) if m.methods.contains(&Method::Transformer) => {
            let abs = std::fs::canonicalize(path).with_context(|| format!("weights file {}", path.display()))?;
            Some(WeightsRef::pin(&abs, m.precision.into())?.0)
        }
        _ => None,
    };
    Ok(MethodsConfig { methods: m.methods.clone(), mle: MleOptions::default(), weights })
}

fn cmd_bench(cli: &Cli, experiment: &BenchCommand) -> Result<()> {
    let (config, methods) = match experiment {
        BenchCommand::Accuracy { n, design, phi_floor, methods } => (
            ExperimentConfig::Accuracy(AccuracyConfig { n_problems: *n, design: *design, batch_size: methods.batch_size, phi_floor: *phi_floor }),
            methods,
        ),
        BenchCommand::Calibration { n, design, level, methods } => (
            ExperimentConfig::Calibration(CalibrationConfig { n_sims: *n, design: *design, level: *level, batch_size: methods.batch_size }),
            methods,
        ),
        BenchCommand::Power { n, betas, designs, level, methods } => (
            ExperimentConfig::Power(PowerConfig {
                betas: betas.clone().unwrap_or_else(|| PowerConfig::default().betas),
                designs: designs.clone(),
                n_sims: *n,
                level: *level,
                batch_size: methods.batch_size,
            }),
            methods,
        ),
    };
    let manifest = match &methods.from_manifest {
        Some(path) => {
            let m = Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
            if m.config.name() != config.name() {
                bail!("manifest {} describes a {} run, not {}", path.display(), m.config.name(), config.name());
            }
            m
        }
        None => Manifest::new(seed_or_fresh(cli.seed), load_priors(cli.priors.as_deref())?, config, methods_config(methods)?),
    };
    let report = bench::run(&manifest)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let files = report.write(&dir).with_context(|| format!("writing results to {}", dir.display()))?;
    print_summary(&report.results);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn print_summary(results: &Results) {
    match results {
        Results::Accuracy(r) => {
            println!("method       n  failed  nonconv  rmse_mu  rmse_beta  rmse_alpha  mean_runtime_us");
            for s in &r.summary {
                println!(
                    "{:<11} {:>6} {:>6} {:>8} {:>8.4} {:>10.4} {:>11.4} {:>16.3}",
                    s.method.as_str(),
                    s.n_problems,
                    s.n_failed,
                    s.n_nonconverged,
                    s.rmse_mu,
                    s.rmse_beta,
                    s.rmse_alpha,
                    s.mean_runtime_ns / 1e3
                );
            }
        }
        Results::Calibration(r) => {
            for s in &r.summary {
                println!("{:<11} rejection rate {:.4} ({} of {}, {} failed fits)", s.method.as_str(), s.rejection_rate, s.n_reject, s.n_sims, s.n_failed);
            }
        }
        Results::Power(r) => {
            for row in &r.rows {
                println!("{:<11} {:>5} beta={:<8} power={:.3}", row.method.as_str(), row.design.to_string(), row.beta, row.power);
            }
        }
    }
}

/// `<dir>/<stem>_<suffix>` next to the weight file.
fn sibling(weights: &Path, suffix: &str) -> PathBuf {
    let stem = weights.file_stem().map_or_else(|| "weights".into(), |s| s.to_string_lossy().into_owned());
    weights.with_file_name(format!("{stem}_{suffix}"))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let manifest = match &args.from_manifest {
        Some(path) => TrainManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?,
        None => {
            let run = match &args.config {
                Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
                None => RunConfig::default(),
            };
            TrainManifest::new(seed_or_fresh(cli.seed), load_priors(cli.priors.as_deref())?, run)
        }
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("weights.nbtf"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let log_path = sibling(&out, "log.csv");
    std::fs::write(sibling(&out, "manifest.json"), manifest.to_json() + "\n")?;
    let trained = match manifest.run() {
        Ok(t) => t,
        Err(Error::Divergence { epoch, message, log }) => {
            std::fs::write(&log_path, log)?;
            bail!("training diverged at epoch {epoch}: {message}; partial log in {}", log_path.display());
        }
        Err(e) => return Err(e.into()),
    };
    save_weights(&trained.weights, &out)?;
    std::fs::write(&log_path, trained.log.to_csv())?;
    println!(
        "validation loss {:.6} -> {:.6} (best epoch {}); wrote {}, {}",
        trained.log.initial_val_loss,
        trained.log.best_val_loss(),
        trained.log.best_epoch,
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_plot(cli: &Cli, args: &PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let svg = plot::render(args.experiment, &text).with_context(|| format!("plotting {}", args.input.display()))?;
    let out = cli.out.clone().unwrap_or_else(|| args.input.with_extension("svg"));
    std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global().context("configuring threads")?;
    }
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Bench { experiment } => cmd_bench(&cli, experiment),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Plot(a) => cmd_plot(&cli, a),
    }
}
