//! Calibration and power: simulate, estimate, Wald-test.

use super::{check_estimators, estimate_all, testing_problems, CalibrationConfig, DesignSpec, PowerConfig};
use crate::error::Result;
use crate::estimators::{Estimator, Method};
use crate::inference::test_effect;
use crate::model::Problem;
use crate::synth::Priors;
use serde::{Deserialize, Serialize};

/// Two-sided Wald p-value of each simulation; `None` where the fit or the
/// test failed. Failures count as no evidence (p = 1) downstream.
fn p_values(est: &dyn Estimator, problems: &[Problem], batch_size: usize) -> Vec<Option<f64>> {
    estimate_all(est, problems, batch_size)
        .iter()
        .zip(problems)
        .map(|(e, p)| e.as_ref().ok().and_then(|e| test_effect(p, &e.theta).ok()).map(|w| w.p))
        .collect()
}

fn rejections(ps: &[Option<f64>], level: f64) -> usize {
    ps.iter().filter(|p| p.is_some_and(|p| p < level)).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub method: Method,
    /// 1-based rank of the p-value among this method's.
    pub rank: usize,
    pub p_value: f64,
    /// `(rank - 0.5)/n`, the matching uniform quantile.
    pub expected_quantile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub method: Method,
    pub n_sims: usize,
    /// Simulations whose fit or test failed (recorded as p = 1).
    pub n_failed: usize,
    pub n_reject: usize,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub methods: Vec<Method>,
    /// Per method (in the order given), p-values ascending.
    pub rows: Vec<CalibrationRow>,
    pub summary: Vec<CalibrationSummary>,
}

/// Null simulations (β = 0, everything else from the priors).
pub fn bench_calibration(
    cfg: &CalibrationConfig,
    priors: &Priors,
    estimators: &[&dyn Estimator],
    seed: u64,
) -> Result<CalibrationReport> {
    cfg.validate()?;
    priors.validate()?;
    let methods = check_estimators(estimators)?;
    let problems: Vec<Problem> =
        testing_problems(cfg.n_sims, cfg.design, 0.0, priors, seed)?.into_iter().map(|(_, p)| p).collect();
    let n = problems.len();
    let mut rows = Vec::with_capacity(n * methods.len());
    let mut summary = Vec::with_capacity(methods.len());
    for (&method, est) in methods.iter().zip(estimators) {
        let outcomes = p_values(*est, &problems, cfg.batch_size);
        let n_failed = outcomes.iter().filter(|p| p.is_none()).count();
        let n_reject = rejections(&outcomes, cfg.level);
        let mut ps: Vec<f64> = outcomes.iter().map(|p| p.unwrap_or(1.0)).collect();
        ps.sort_by(f64::total_cmp);
        summary.push(CalibrationSummary { method, n_sims: n, n_failed, n_reject, rejection_rate: n_reject as f64 / n as f64 });
        rows.extend(ps.into_iter().enumerate().map(|(i, p_value)| CalibrationRow {
            method,
            rank: i + 1,
            p_value,
            expected_quantile: (i as f64 + 0.5) / n as f64,
        }));
    }
    Ok(CalibrationReport { methods, rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub method: Method,
    pub design: DesignSpec,
    pub beta: f64,
    pub n_sims: usize,
    pub n_reject: usize,
    pub power: f64,
}

impl PowerRow {
    /// Monte-Carlo standard error of `power`.
    pub fn standard_error(&self) -> f64 {
        (self.power * (1.0 - self.power) / self.n_sims as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerReport {
    pub methods: Vec<Method>,
    /// Method-major, then design, then β, each in the order given.
    pub rows: Vec<PowerRow>,
}

impl PowerReport {
    pub fn get(&self, method: Method, design: DesignSpec, beta: f64) -> Option<&PowerRow> {
        self.rows.iter().find(|r| r.method == method && r.design == design && r.beta == beta)
    }
}

/// Rejection rates over a grid of known effects and designs.
pub fn bench_power(cfg: &PowerConfig, priors: &Priors, estimators: &[&dyn Estimator], seed: u64) -> Result<PowerReport> {
    cfg.validate()?;
    priors.validate()?;
    let methods = check_estimators(estimators)?;
    // cells[design][beta][method] = rejections
    let mut cells = Vec::with_capacity(cfg.designs.len());
    for &design in &cfg.designs {
        let mut per_beta = Vec::with_capacity(cfg.betas.len());
        for &beta in &cfg.betas {
            let problems: Vec<Problem> =
                testing_problems(cfg.n_sims, design, beta, priors, seed)?.into_iter().map(|(_, p)| p).collect();
            let counts: Vec<usize> = estimators
                .iter()
                .map(|e| rejections(&p_values(*e, &problems, cfg.batch_size), cfg.level))
                .collect();
            per_beta.push(counts);
        }
        cells.push(per_beta);
    }
    let mut rows = Vec::with_capacity(methods.len() * cfg.designs.len() * cfg.betas.len());
    for (j, &method) in methods.iter().enumerate() {
        for (di, &design) in cfg.designs.iter().enumerate() {
            for (bi, &beta) in cfg.betas.iter().enumerate() {
                let n_reject = cells[di][bi][j];
                rows.push(PowerRow {
                    method,
                    design,
                    beta,
                    n_sims: cfg.n_sims,
                    n_reject,
                    power: n_reject as f64 / cfg.n_sims as f64,
                });
            }
        }
    }
    Ok(PowerReport { methods, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{MleEstimator, MomEstimator};

    #[test]
    fn calibration_rows_are_sorted_quantile_pairs() {
        let cfg = CalibrationConfig { n_sims: 200, ..Default::default() };
        let mle = MleEstimator::default();
        let r = bench_calibration(&cfg, &Priors::default(), &[&MomEstimator, &mle], 4).unwrap();
        assert_eq!(r.rows.len(), 400);
        for m in r.rows.chunks(200) {
            assert!(m.windows(2).all(|w| w[0].p_value <= w[1].p_value));
            assert!(m.iter().all(|x| (0.0..=1.0).contains(&x.p_value)));
            assert_eq!(m[0].rank, 1);
            assert_eq!(m[0].expected_quantile, 0.5 / 200.0);
            assert_eq!(m[199].expected_quantile, 199.5 / 200.0);
        }
        assert_eq!(r.summary[0].n_reject, r.rows[..200].iter().filter(|x| x.p_value < 0.05).count());
    }

    #[test]
    fn null_power_equals_calibration() {
        let design = DesignSpec::balanced(4);
        let cal = CalibrationConfig { n_sims: 150, design, ..Default::default() };
        let pow = PowerConfig { betas: vec![0.0, 1.0], designs: vec![design], n_sims: 150, ..Default::default() };
        let pr = Priors::default();
        let c = bench_calibration(&cal, &pr, &[&MomEstimator], 8).unwrap();
        let p = bench_power(&pow, &pr, &[&MomEstimator], 8).unwrap();
        assert_eq!(p.get(Method::Mom, design, 0.0).unwrap().n_reject, c.summary[0].n_reject);
    }

    #[test]
    fn power_table_shape_and_order() {
        let designs = vec![DesignSpec::balanced(3), DesignSpec::balanced(6)];
        let cfg = PowerConfig { betas: vec![0.0, 2.5], designs: designs.clone(), n_sims: 50, ..Default::default() };
        let mle = MleEstimator::default();
        let r = bench_power(&cfg, &Priors::default(), &[&MomEstimator, &mle], 2).unwrap();
        assert_eq!(r.rows.len(), 2 * 2 * 2);
        assert_eq!((r.rows[0].method, r.rows[0].design, r.rows[0].beta), (Method::Mom, designs[0], 0.0));
        assert_eq!((r.rows[3].method, r.rows[3].design, r.rows[3].beta), (Method::Mom, designs[1], 2.5));
        assert_eq!(r.rows[4].method, Method::Mle);
        for row in &r.rows {
            assert_eq!(row.power, row.n_reject as f64 / 50.0);
        }
        // a large effect in 6v6 is detected far more often than no effect
        assert!(r.get(Method::Mom, designs[1], 2.5).unwrap().power > r.get(Method::Mom, designs[1], 0.0).unwrap().power);
    }

    #[test]
    fn standard_error_of_a_proportion() {
        let row = PowerRow { method: Method::Mom, design: DesignSpec::balanced(3), beta: 0.0, n_sims: 100, n_reject: 50, power: 0.5 };
        assert_eq!(row.standard_error(), 0.05);
    }
}
