use super::{accuracy_problems, check_estimators, estimate_all, AccuracyConfig};
use crate::error::Result;
use crate::estimators::{Estimator, Method};
use crate::model::Problem;
use crate::synth::Priors;
use serde::{Deserialize, Serialize};

/// One estimate of one problem. Failed fits carry NaN estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub problem_id: usize,
    pub method: Method,
    pub mu_true: f64,
    pub beta_true: f64,
    pub alpha_true: f64,
    pub mu_hat: f64,
    pub beta_hat: f64,
    /// `ln(max(φ̂, phi_floor))`.
    pub alpha_hat: f64,
    pub converged: bool,
    pub runtime_ns: u64,
}

impl AccuracyRow {
    pub fn failed(&self) -> bool {
        self.mu_hat.is_nan()
    }
}

/// Errors of one method over the problems every method could estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub method: Method,
    pub n_problems: usize,
    /// Problems this method could not estimate.
    pub n_failed: usize,
    /// Fits that stopped before meeting the convergence test (included in the errors).
    pub n_nonconverged: usize,
    /// Problems entering the error columns.
    pub n_compared: usize,
    pub rmse_mu: f64,
    pub mae_mu: f64,
    pub rmse_beta: f64,
    pub mae_beta: f64,
    pub rmse_alpha: f64,
    pub mae_alpha: f64,
    /// Mean over successful fits.
    pub mean_runtime_ns: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub methods: Vec<Method>,
    /// Problem-major, methods in the order given.
    pub rows: Vec<AccuracyRow>,
    pub summary: Vec<AccuracySummary>,
}

/// Estimates `n_problems` problems drawn from the priors with every method.
pub fn bench_accuracy(cfg: &AccuracyConfig, priors: &Priors, estimators: &[&dyn Estimator], seed: u64) -> Result<AccuracyReport> {
    cfg.validate()?;
    priors.validate()?;
    let methods = check_estimators(estimators)?;
    let sims = accuracy_problems(cfg.n_problems, cfg.design, priors, seed)?;
    let problems: Vec<Problem> = sims.iter().map(|(_, p)| p.clone()).collect();
    let per_method: Vec<_> = estimators.iter().map(|e| estimate_all(*e, &problems, cfg.batch_size)).collect();

    let mut rows = Vec::with_capacity(problems.len() * methods.len());
    for (i, (theta, _)) in sims.iter().enumerate() {
        for (&method, estimates) in methods.iter().zip(&per_method) {
            let base = AccuracyRow {
                problem_id: i,
                method,
                mu_true: theta.mu,
                beta_true: theta.beta,
                alpha_true: theta.alpha(),
                mu_hat: f64::NAN,
                beta_hat: f64::NAN,
                alpha_hat: f64::NAN,
                converged: false,
                runtime_ns: 0,
            };
            rows.push(match &estimates[i] {
                Ok(e) => AccuracyRow {
                    mu_hat: e.theta.mu,
                    beta_hat: e.theta.beta,
                    alpha_hat: e.theta.phi.max(cfg.phi_floor).ln(),
                    converged: e.converged,
                    runtime_ns: e.runtime.as_nanos() as u64,
                    ..base
                },
                Err(_) => base,
            });
        }
    }
    let summary = summarize(&rows, &methods);
    Ok(AccuracyReport { methods, rows, summary })
}

fn rmse_mae(errors: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut sq, mut abs, mut n) = (0.0, 0.0, 0usize);
    for e in errors {
        sq += e * e;
        abs += e.abs();
        n += 1;
    }
    ((sq / n as f64).sqrt(), abs / n as f64)
}

/// Per-method aggregates of problem-major rows.
pub(crate) fn summarize(rows: &[AccuracyRow], methods: &[Method]) -> Vec<AccuracySummary> {
    let k = methods.len();
    let problems: Vec<&[AccuracyRow]> = rows.chunks(k).collect();
    let common: Vec<&&[AccuracyRow]> = problems.iter().filter(|r| r.iter().all(|x| !x.failed())).collect();
    methods
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            let mine: Vec<&AccuracyRow> = problems.iter().map(|r| &r[j]).collect();
            let ok: Vec<&&AccuracyRow> = mine.iter().filter(|r| !r.failed()).collect();
            let compared: Vec<&AccuracyRow> = common.iter().map(|r| &r[j]).collect();
            let (rmse_mu, mae_mu) = rmse_mae(compared.iter().map(|r| r.mu_hat - r.mu_true));
            let (rmse_beta, mae_beta) = rmse_mae(compared.iter().map(|r| r.beta_hat - r.beta_true));
            let (rmse_alpha, mae_alpha) = rmse_mae(compared.iter().map(|r| r.alpha_hat - r.alpha_true));
            AccuracySummary {
                method,
                n_problems: mine.len(),
                n_failed: mine.len() - ok.len(),
                n_nonconverged: ok.iter().filter(|r| !r.converged).count(),
                n_compared: compared.len(),
                rmse_mu,
                mae_mu,
                rmse_beta,
                mae_beta,
                rmse_alpha,
                mae_alpha,
                mean_runtime_ns: ok.iter().map(|r| r.runtime_ns as f64).sum::<f64>() / ok.len() as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::DesignSpec;
    use crate::estimators::{MleEstimator, MomEstimator};

    fn row(id: usize, method: Method, err: f64) -> AccuracyRow {
        AccuracyRow {
            problem_id: id,
            method,
            mu_true: 0.0,
            beta_true: 0.0,
            alpha_true: 0.0,
            mu_hat: err,
            beta_hat: -err,
            alpha_hat: 2.0 * err,
            converged: true,
            runtime_ns: 10,
        }
    }

    #[test]
    fn summary_uses_common_problems_only() {
        let methods = [Method::Mom, Method::Transformer];
        let mut failed = row(1, Method::Mom, f64::NAN);
        failed.runtime_ns = 0;
        let rows = vec![
            row(0, Method::Mom, 3.0),
            row(0, Method::Transformer, 1.0),
            failed,
            row(1, Method::Transformer, 100.0),
            row(2, Method::Mom, -4.0),
            row(2, Method::Transformer, 1.0),
        ];
        let s = summarize(&rows, &methods);
        assert_eq!((s[0].n_failed, s[0].n_compared, s[1].n_failed), (1, 2, 0));
        assert!((s[0].rmse_mu - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[0].mae_mu, 3.5);
        assert_eq!(s[0].mae_alpha, 7.0);
        assert_eq!(s[1].rmse_beta, 1.0);
        assert_eq!(s[0].mean_runtime_ns, 10.0);
    }

    #[test]
    fn one_problem_gives_one_row_per_method() {
        let cfg = AccuracyConfig { n_problems: 1, ..Default::default() };
        let (mom, mle) = (MomEstimator, MleEstimator::default());
        let r = bench_accuracy(&cfg, &Priors::default(), &[&mom, &mle], 5).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].method, Method::Mom);
        assert_eq!(r.rows[1].method, Method::Mle);
        assert_eq!(r.rows[0].mu_true, r.rows[1].mu_true);
    }

    #[test]
    fn rows_carry_floored_dispersion_and_failures() {
        let cfg = AccuracyConfig { n_problems: 400, design: DesignSpec::balanced(2), ..Default::default() };
        let r = bench_accuracy(&cfg, &Priors::default(), &[&MomEstimator], 3).unwrap();
        assert_eq!(r.rows.len(), 400);
        let floor = 1e-6f64.ln();
        assert!(r.rows.iter().any(|x| x.alpha_hat == floor), "some 2v2 fit has zero dispersion");
        assert!(r.rows.iter().all(|x| x.failed() || x.alpha_hat >= floor));
        let failed = r.rows.iter().filter(|x| x.failed()).count();
        assert_eq!(r.summary[0].n_failed, failed);
        assert!(r.rows.iter().filter(|x| x.failed()).all(|x| x.beta_hat.is_nan() && !x.converged));
    }

    #[test]
    fn duplicate_or_missing_methods_are_rejected() {
        let cfg = AccuracyConfig { n_problems: 2, ..Default::default() };
        assert!(bench_accuracy(&cfg, &Priors::default(), &[], 1).is_err());
        assert!(bench_accuracy(&cfg, &Priors::default(), &[&MomEstimator, &MomEstimator], 1).is_err());
    }
}
