use super::{AccuracyReport, CalibrationReport, Manifest, PowerReport};
use crate::error::{Error, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub enum Results {
    Accuracy(AccuracyReport),
    Calibration(CalibrationReport),
    Power(PowerReport),
}

/// A finished experiment and the manifest that reproduces it.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub manifest: Manifest,
    pub results: Results,
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub const ACCURACY_HEADER: [&str; 10] = [
    "problem_id", "method", "mu_true", "beta_true", "alpha_true", "mu_hat", "beta_hat", "alpha_hat", "converged", "runtime_ns",
];
pub const ACCURACY_SUMMARY_HEADER: [&str; 12] = [
    "method", "n_problems", "n_failed", "n_nonconverged", "n_compared", "rmse_mu", "mae_mu", "rmse_beta", "mae_beta",
    "rmse_alpha", "mae_alpha", "mean_runtime_ns",
];
pub const CALIBRATION_HEADER: [&str; 4] = ["method", "rank", "p_value", "expected_quantile"];
pub const CALIBRATION_SUMMARY_HEADER: [&str; 5] = ["method", "n_sims", "n_failed", "n_reject", "rejection_rate"];
pub const POWER_HEADER: [&str; 6] = ["method", "design", "beta", "n_sims", "n_reject", "power"];

impl BenchReport {
    /// `(file name, contents)` of every table, per-row table first.
    pub fn tables(&self) -> Result<Vec<(&'static str, String)>> {
        Ok(match &self.results {
            Results::Accuracy(r) => vec![
                ("accuracy.csv", to_csv(&r.rows, &ACCURACY_HEADER)?),
                ("accuracy_summary.csv", to_csv(&r.summary, &ACCURACY_SUMMARY_HEADER)?),
            ],
            Results::Calibration(r) => vec![
                ("calibration.csv", to_csv(&r.rows, &CALIBRATION_HEADER)?),
                ("calibration_summary.csv", to_csv(&r.summary, &CALIBRATION_SUMMARY_HEADER)?),
            ],
            Results::Power(r) => vec![("power.csv", to_csv(&r.rows, &POWER_HEADER)?)],
        })
    }

    /// Writes the tables and `manifest.json` into `dir` (created if needed)
    /// and returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (name, body) in self.tables()? {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            written.push(path);
        }
        let path = dir.join("manifest.json");
        std::fs::write(&path, self.manifest.to_json() + "\n")?;
        written.push(path);
        Ok(written)
    }
}

/// Drops wall-clock columns (`runtime_ns`, `mean_runtime_ns`) from CSV text,
/// leaving the part of a report that is fully determined by seed and configs.
pub fn strip_runtime_columns(csv_text: &str) -> String {
    let mut lines = csv_text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let keep: Vec<bool> = header.split(',').map(|c| !c.ends_with("runtime_ns")).collect();
    let mut out = String::with_capacity(csv_text.len());
    for line in std::iter::once(header).chain(lines) {
        let fields: Vec<&str> = line.split(',').zip(&keep).filter(|(_, k)| **k).map(|(f, _)| f).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{run, AccuracyConfig, CalibrationConfig, DesignSpec, ExperimentConfig, MethodsConfig, PowerConfig};
    use crate::estimators::{Method, MleOptions};
    use crate::synth::Priors;

    fn manifest(config: ExperimentConfig) -> Manifest {
        let methods = MethodsConfig { methods: vec![Method::Mom, Method::Mle], mle: MleOptions::default(), weights: None };
        Manifest::new(17, Priors::default(), config, methods)
    }

    #[test]
    fn accuracy_tables_follow_the_schema() {
        let m = manifest(ExperimentConfig::Accuracy(AccuracyConfig { n_problems: 30, ..Default::default() }));
        let tables = run(&m).unwrap().tables().unwrap();
        let (name, body) = &tables[0];
        assert_eq!(*name, "accuracy.csv");
        let mut lines = body.lines();
        assert_eq!(
            lines.next().unwrap(),
            "problem_id,method,mu_true,beta_true,alpha_true,mu_hat,beta_hat,alpha_hat,converged,runtime_ns"
        );
        assert_eq!(lines.count(), 60);
        let first = body.lines().nth(1).unwrap();
        assert!(first.starts_with("0,mom,"), "{first}");
        assert_eq!(tables[1].1.lines().count(), 3);
    }

    #[test]
    fn power_table_has_one_row_per_cell() {
        let cfg = PowerConfig { betas: vec![0.0, 2.5], designs: vec![DesignSpec::balanced(3)], n_sims: 20, ..Default::default() };
        let tables = run(&manifest(ExperimentConfig::Power(cfg))).unwrap().tables().unwrap();
        let body = &tables[0].1;
        assert_eq!(body.lines().next().unwrap(), "method,design,beta,n_sims,n_reject,power");
        assert_eq!(body.lines().count(), 1 + 2 * 2);
        assert!(body.lines().nth(2).unwrap().starts_with("mom,3v3,2.5,20,"));
    }

    #[test]
    fn writing_creates_tables_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(ExperimentConfig::Calibration(CalibrationConfig { n_sims: 25, ..Default::default() }));
        let report = run(&m).unwrap();
        let out = dir.path().join("nested");
        let files = report.write(&out).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["calibration.csv", "calibration_summary.csv", "manifest.json"]);
        assert_eq!(Manifest::load(&out.join("manifest.json")).unwrap(), m);
        let rows = std::fs::read_to_string(out.join("calibration.csv")).unwrap();
        assert_eq!(rows.lines().count(), 1 + 2 * 25);
    }

    #[test]
    fn runtime_columns_are_stripped() {
        let text = "a,runtime_ns,b\n1,99,2\n3,7,4\n";
        assert_eq!(strip_runtime_columns(text), "a,b\n1,2\n3,4\n");
        assert_eq!(strip_runtime_columns("x,mean_runtime_ns\n1,2\n"), "x\n1\n");
        assert_eq!(strip_runtime_columns(""), "");
    }

    #[test]
    fn replay_reproduces_everything_but_runtimes() {
        let m = manifest(ExperimentConfig::Accuracy(AccuracyConfig { n_problems: 40, ..Default::default() }));
        let a = run(&m).unwrap().tables().unwrap();
        let b = run(&m).unwrap().tables().unwrap();
        for ((_, x), (_, y)) in a.iter().zip(&b) {
            assert_eq!(strip_runtime_columns(x), strip_runtime_columns(y));
        }
    }
}
