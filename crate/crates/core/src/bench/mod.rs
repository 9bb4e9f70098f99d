//! The accuracy/runtime, calibration and power sweeps.
//!
//! Every simulated problem is drawn from its own substream addressed by
//! `(experiment tag, ..., problem index)` under the run seed, and estimators
//! are applied to fixed-size batches of problems in problem order. Rayon
//! parallelism runs across batches only, so the rows of a report do not
//! depend on the thread count; only the runtime columns do.

mod accuracy;
mod report;
mod testing;

pub use accuracy::{bench_accuracy, AccuracyReport, AccuracyRow, AccuracySummary};
pub use report::{strip_runtime_columns, BenchReport, Results};
pub use testing::{
    bench_calibration, bench_power, CalibrationReport, CalibrationRow, CalibrationSummary, PowerReport, PowerRow,
};

use crate::error::{Error, Result};
use crate::estimators::{Estimate, Estimator, Method, MleEstimator, MleOptions, MomEstimator};
use crate::model::Problem;
use crate::synth::{fixed_design, generate_problem, ExposureMode, Priors};
use crate::transformer::{load_weights, ModelConfig, Precision, TransformerEstimator};
use crate::rng::{substream, tag};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

/// Problems handed to an estimator per `estimate_batch` call.
pub const DEFAULT_BATCH_SIZE: usize = 64;
/// Dispersion estimates below this are clamped before taking `ln φ̂`.
pub const DEFAULT_PHI_FLOOR: f64 = 1e-6;
pub const DEFAULT_LEVEL: f64 = 0.05;

/// Group sizes written `"<control>v<treatment>"`, e.g. `3v3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DesignSpec {
    pub control: usize,
    pub treatment: usize,
}

impl DesignSpec {
    pub const fn new(control: usize, treatment: usize) -> Self {
        Self { control, treatment }
    }

    pub const fn balanced(n: usize) -> Self {
        Self::new(n, n)
    }
}

impl fmt::Display for DesignSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}v{}", self.control, self.treatment)
    }
}

impl FromStr for DesignSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("design `{s}` is not of the form <n>v<n>, e.g. 3v3"));
        let (a, b) = s.trim().split_once(['v', 'V']).ok_or_else(bad)?;
        let control = a.parse().map_err(|_| bad())?;
        let treatment = b.parse().map_err(|_| bad())?;
        Ok(Self { control, treatment })
    }
}

impl TryFrom<String> for DesignSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DesignSpec> for String {
    fn from(d: DesignSpec) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracyConfig {
    pub n_problems: usize,
    pub design: DesignSpec,
    pub batch_size: usize,
    pub phi_floor: f64,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            n_problems: 10_000,
            design: DesignSpec::balanced(3),
            batch_size: DEFAULT_BATCH_SIZE,
            phi_floor: DEFAULT_PHI_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_sims: usize,
    pub design: DesignSpec,
    pub level: f64,
    pub batch_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { n_sims: 1_000, design: DesignSpec::balanced(3), level: DEFAULT_LEVEL, batch_size: DEFAULT_BATCH_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerConfig {
    pub betas: Vec<f64>,
    pub designs: Vec<DesignSpec>,
    pub n_sims: usize,
    pub level: f64,
    pub batch_size: usize,
}

impl Default for PowerConfig {
    /// Ten equally spaced effects on `[0, 2.5]` and four balanced designs.
    fn default() -> Self {
        Self {
            betas: linspace(0.0, 2.5, 10),
            designs: [3, 5, 7, 9].map(DesignSpec::balanced).to_vec(),
            n_sims: 1_000,
            level: DEFAULT_LEVEL,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

/// `n` equally spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn check_count(name: &str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config(format!("{name} must be at least 1")));
    }
    Ok(())
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("significance level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

fn check_design(d: DesignSpec) -> Result<()> {
    // fixed_design owns the size bounds; probe it with constant exposures.
    fixed_design(d.control, d.treatment, ExposureMode::Constant, &Priors::default(), &mut crate::rng::stream(0))
        .map(|_| ())
        .map_err(|e| Error::Config(format!("design {d}: {e}")))
}

impl AccuracyConfig {
    pub fn validate(&self) -> Result<()> {
        check_count("n_problems", self.n_problems)?;
        check_count("batch_size", self.batch_size)?;
        check_design(self.design)?;
        if !(self.phi_floor > 0.0 && self.phi_floor.is_finite()) {
            return Err(Error::Config(format!("phi_floor must be finite and > 0, got {}", self.phi_floor)));
        }
        Ok(())
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        check_count("n_sims", self.n_sims)?;
        check_count("batch_size", self.batch_size)?;
        check_level(self.level)?;
        check_design(self.design)
    }
}

impl PowerConfig {
    pub fn validate(&self) -> Result<()> {
        check_count("n_sims", self.n_sims)?;
        check_count("batch_size", self.batch_size)?;
        check_count("number of betas", self.betas.len())?;
        check_count("number of designs", self.designs.len())?;
        check_level(self.level)?;
        if let Some(b) = self.betas.iter().find(|b| !b.is_finite()) {
            return Err(Error::Config(format!("effect sizes must be finite, got {b}")));
        }
        for &d in &self.designs {
            check_design(d)?;
        }
        Ok(())
    }
}

/// One experiment with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "lowercase")]
pub enum ExperimentConfig {
    Accuracy(AccuracyConfig),
    Calibration(CalibrationConfig),
    Power(PowerConfig),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Accuracy(_) => "accuracy",
            ExperimentConfig::Calibration(_) => "calibration",
            ExperimentConfig::Power(_) => "power",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ExperimentConfig::Accuracy(c) => c.validate(),
            ExperimentConfig::Calibration(c) => c.validate(),
            ExperimentConfig::Power(c) => c.validate(),
        }
    }
}

/// A weight file pinned by content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsRef {
    pub path: PathBuf,
    /// FNV-1a checksum of the tensors, 16 hex digits.
    pub checksum: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub precision: Precision,
}

impl WeightsRef {
    /// Loads the file and records its checksum.
    pub fn pin(path: &Path, precision: Precision) -> Result<(Self, TransformerEstimator)> {
        let w = load_weights(path)?;
        let r = Self { path: path.to_path_buf(), checksum: format!("{:016x}", w.checksum()), model: w.config.clone(), precision };
        Ok((r, TransformerEstimator::with_precision(w, precision)))
    }

    /// Loads the file and checks it still matches the recorded checksum.
    pub fn load(&self) -> Result<TransformerEstimator> {
        let w = load_weights(&self.path)?;
        let sum = format!("{:016x}", w.checksum());
        if sum != self.checksum {
            return Err(Error::Config(format!(
                "weights at {} have checksum {sum}, the manifest expects {}",
                self.path.display(),
                self.checksum
            )));
        }
        Ok(TransformerEstimator::with_precision(w, self.precision))
    }
}

/// Which estimators run and how they are configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodsConfig {
    pub methods: Vec<Method>,
    pub mle: MleOptions,
    pub weights: Option<WeightsRef>,
}

impl MethodsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method {m} is listed twice")));
            }
        }
        if self.methods.contains(&Method::Transformer) && self.weights.is_none() {
            return Err(Error::Config("the transformer method needs a weight file".into()));
        }
        self.mle.validate()
    }

    /// Instantiates the estimators in listed order; the transformer's weights
    /// are loaded and checked against their checksum.
    pub fn build(&self) -> Result<Vec<Box<dyn Estimator>>> {
        self.validate()?;
        self.methods
            .iter()
            .map(|m| -> Result<Box<dyn Estimator>> {
                Ok(match m {
                    Method::Mom => Box::new(MomEstimator),
                    Method::Mle => Box::new(MleEstimator::new(self.mle)),
                    Method::Transformer => Box::new(self.weights.as_ref().expect("validated").load()?),
                })
            })
            .collect()
    }
}

/// Everything needed to replay a benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub priors: Priors,
    pub config: ExperimentConfig,
    pub methods: MethodsConfig,
}

impl Manifest {
    pub fn new(seed: u64, priors: Priors, config: ExperimentConfig, methods: MethodsConfig) -> Self {
        Self { tool: env!("CARGO_PKG_NAME").into(), version: env!("CARGO_PKG_VERSION").into(), seed, priors, config, methods }
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        self.config.validate()?;
        self.methods.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Runs the experiment a manifest describes.
pub fn run(manifest: &Manifest) -> Result<BenchReport> {
    manifest.validate()?;
    let owned = manifest.methods.build()?;
    let estimators: Vec<&dyn Estimator> = owned.iter().map(|e| e.as_ref()).collect();
    let (seed, priors) = (manifest.seed, &manifest.priors);
    let results = match &manifest.config {
        ExperimentConfig::Accuracy(c) => Results::Accuracy(bench_accuracy(c, priors, &estimators, seed)?),
        ExperimentConfig::Calibration(c) => Results::Calibration(bench_calibration(c, priors, &estimators, seed)?),
        ExperimentConfig::Power(c) => Results::Power(bench_power(c, priors, &estimators, seed)?),
    };
    Ok(BenchReport { manifest: manifest.clone(), results })
}

fn check_estimators(estimators: &[&dyn Estimator]) -> Result<Vec<Method>> {
    if estimators.is_empty() {
        return Err(Error::Config("at least one method is required".into()));
    }
    let methods: Vec<Method> = estimators.iter().map(|e| e.method()).collect();
    for (i, m) in methods.iter().enumerate() {
        if methods[..i].contains(m) {
            return Err(Error::Config(format!("method {m} is listed twice")));
        }
    }
    Ok(methods)
}

/// Draws one problem with the given design from `path`'s substream: `(μ, α)`
/// and, unless `beta` is given, β from the priors; exposures from the prior.
fn simulate(priors: &Priors, design: DesignSpec, beta: Option<f64>, seed: u64, path: &[u64]) -> Result<(crate::model::Theta, Problem)> {
    let mut rng = substream(seed, path);
    let mut theta = priors.sample_parameters(&mut rng);
    if let Some(b) = beta {
        theta.beta = b;
    }
    let d = fixed_design(design.control, design.treatment, ExposureMode::Prior, priors, &mut rng)?;
    let p = generate_problem(&theta, &d, &mut rng)?;
    Ok((theta, p))
}

/// The problems of an accuracy sweep, in problem order.
pub fn accuracy_problems(
    n: usize,
    design: DesignSpec,
    priors: &Priors,
    seed: u64,
) -> Result<Vec<(crate::model::Theta, Problem)>> {
    (0..n)
        .into_par_iter()
        .map(|i| simulate(priors, design, None, seed, &[tag::BENCH_ACCURACY, i as u64]))
        .collect()
}

/// The simulations of one `(design, β)` cell of the calibration/power sweeps.
pub fn testing_problems(
    n: usize,
    design: DesignSpec,
    beta: f64,
    priors: &Priors,
    seed: u64,
) -> Result<Vec<(crate::model::Theta, Problem)>> {
    let (c, t, b) = (design.control as u64, design.treatment as u64, beta.to_bits());
    (0..n)
        .into_par_iter()
        .map(|i| simulate(priors, design, Some(beta), seed, &[tag::BENCH_TESTING, c, t, b, i as u64]))
        .collect()
}

/// Applies `est` to consecutive batches, in parallel across batches.
pub fn estimate_all(est: &dyn Estimator, problems: &[Problem], batch_size: usize) -> Vec<Result<Estimate>> {
    problems.par_chunks(batch_size.max(1)).flat_map_iter(|c| est.estimate_batch(c)).collect()
}

/// Mean wall time per problem of each estimator over `problems`, processed in
/// batches on the calling thread. Passes over the methods are interleaved and
/// repeated, and each method's fastest pass is reported, which suppresses
/// interference from other load on the machine.
pub fn time_methods(estimators: &[&dyn Estimator], problems: &[Problem], batch_size: usize, repeats: usize) -> Vec<Duration> {
    let mut best = vec![Duration::MAX; estimators.len()];
    if problems.is_empty() {
        return vec![Duration::ZERO; estimators.len()];
    }
    for _ in 0..repeats.max(1) {
        for (slot, est) in best.iter_mut().zip(estimators) {
            let start = Instant::now();
            for chunk in problems.chunks(batch_size.max(1)) {
                std::hint::black_box(est.estimate_batch(chunk));
            }
            *slot = (*slot).min(start.elapsed() / problems.len() as u32);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_specs_parse_and_print() {
        let d: DesignSpec = "3v5".parse().unwrap();
        assert_eq!(d, DesignSpec::new(3, 5));
        assert_eq!(d.to_string(), "3v5");
        assert_eq!(serde_json::to_string(&d).unwrap(), "\"3v5\"");
        for bad in ["3", "v3", "3v", "3x3", "-1v2"] {
            assert!(bad.parse::<DesignSpec>().is_err(), "{bad}");
        }
        assert!(check_design(DesignSpec::new(1, 3)).is_err());
        assert!(check_design(DesignSpec::new(3, 11)).is_err());
    }

    #[test]
    fn default_beta_grid_is_evenly_spaced() {
        let g = PowerConfig::default().betas;
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[9], 2.5);
        for w in g.windows(2) {
            assert!((w[1] - w[0] - 2.5 / 9.0).abs() < 1e-12);
        }
        assert_eq!(linspace(1.0, 2.0, 1), vec![1.0]);
        assert!(linspace(1.0, 2.0, 0).is_empty());
    }

    #[test]
    fn configs_are_validated() {
        assert!(AccuracyConfig::default().validate().is_ok());
        assert!(AccuracyConfig { n_problems: 0, ..Default::default() }.validate().is_err());
        assert!(AccuracyConfig { phi_floor: 0.0, ..Default::default() }.validate().is_err());
        assert!(CalibrationConfig { level: 1.0, ..Default::default() }.validate().is_err());
        assert!(PowerConfig { betas: vec![], ..Default::default() }.validate().is_err());
        assert!(PowerConfig { betas: vec![f64::NAN], ..Default::default() }.validate().is_err());
        assert!(PowerConfig::default().validate().is_ok());
    }

    #[test]
    fn method_sets_are_validated() {
        let base = MethodsConfig { methods: vec![Method::Mom], mle: MleOptions::default(), weights: None };
        assert!(base.validate().is_ok());
        assert!(MethodsConfig { methods: vec![], ..base.clone() }.validate().is_err());
        assert!(MethodsConfig { methods: vec![Method::Mom, Method::Mom], ..base.clone() }.validate().is_err());
        let err = MethodsConfig { methods: vec![Method::Transformer], ..base.clone() }.validate().unwrap_err();
        assert!(err.to_string().contains("weight"));
        assert_eq!(base.build().unwrap()[0].method(), Method::Mom);
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let m = Manifest::new(
            42,
            Priors::default(),
            ExperimentConfig::Power(PowerConfig::default()),
            MethodsConfig { methods: vec![Method::Mom, Method::Mle], mle: MleOptions::default(), weights: None },
        );
        let json = m.to_json();
        assert!(json.contains("\"experiment\": \"power\""));
        assert!(json.contains("\"3v3\""));
        assert_eq!(Manifest::from_json(&json).unwrap(), m);
        assert!(Manifest::from_json("{\"seed\": 1}").is_err());
    }

    #[test]
    fn simulations_depend_only_on_their_address() {
        let pr = Priors::default();
        let a = accuracy_problems(5, DesignSpec::balanced(3), &pr, 9).unwrap();
        let b = accuracy_problems(3, DesignSpec::balanced(3), &pr, 9).unwrap();
        assert_eq!(&a[..3], &b[..]);
        let s = testing_problems(4, DesignSpec::balanced(4), 1.5, &pr, 9).unwrap();
        assert!(s.iter().all(|(t, p)| t.beta == 1.5 && p.group_sizes() == (4, 4)));
        let other = testing_problems(4, DesignSpec::balanced(4), 1.0, &pr, 9).unwrap();
        assert_ne!(s[0].1, other[0].1);
    }

    #[test]
    fn timing_reports_one_duration_per_method() {
        let pr = Priors::default();
        let ps: Vec<Problem> = accuracy_problems(20, DesignSpec::balanced(3), &pr, 1).unwrap().into_iter().map(|x| x.1).collect();
        let mom = MomEstimator;
        let t = time_methods(&[&mom], &ps, 8, 2);
        assert_eq!(t.len(), 1);
        assert!(t[0] > Duration::ZERO && t[0] < Duration::from_millis(1));
    }
}
