//! Estimators for `(μ, β, φ)` behind a common contract.

mod mle;
mod mom;

pub use mle::{estimate_mle, MleEstimator};
pub use mom::{estimate_mom, MomEstimator};

use crate::error::{Error, Result};
use crate::model::{mean_unchecked, Problem, Theta};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mom,
    Mle,
    Transformer,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mom => "mom",
            Method::Mle => "mle",
            Method::Transformer => "transformer",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mom" => Ok(Method::Mom),
            "mle" => Ok(Method::Mle),
            "transformer" => Ok(Method::Transformer),
            other => Err(Error::Config(format!("unknown method `{other}` (expected mom, mle or transformer)"))),
        }
    }
}

/// Output of any estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub theta: Theta,
    /// Always true for non-iterative methods.
    pub converged: bool,
    /// Optimizer iterations; zero for non-iterative methods.
    pub iterations: usize,
    /// Wall-clock time of the estimation call.
    pub runtime: Duration,
    pub method: Method,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MleInit {
    FromMoM,
    Provided(Theta),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOptions {
    pub max_iterations: usize,
    /// Convergence when the ∞-norm of the (μ, β, ln φ) gradient drops below this.
    pub grad_tolerance: f64,
    pub init: MleInit,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { max_iterations: 100, grad_tolerance: 1e-8, init: MleInit::FromMoM }
    }
}

impl MleOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        if !(self.grad_tolerance > 0.0) {
            return Err(Error::Config("grad_tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// The likelihood's internal coordinates: `a = 1/φ`, `m_i`, `r_i = a/(a + m_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalParams {
    pub a: f64,
    pub m: Vec<f64>,
    pub r: Vec<f64>,
}

impl InternalParams {
    pub fn new(p: &Problem, t: &Theta) -> Result<Self> {
        if !(t.phi > 0.0) || !t.phi.is_finite() {
            return Err(Error::domain(format!("internal parameters need finite phi > 0, got {}", t.phi)));
        }
        let a = 1.0 / t.phi;
        let m: Vec<f64> = p.observations().map(|(_, l, x)| mean_unchecked(l, t.mu, t.beta, x)).collect();
        if m.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::domain("means must be positive and finite"));
        }
        let r = m.iter().map(|m| a / (a + m)).collect();
        Ok(Self { a, m, r })
    }
}

/// Anything that maps a [`Problem`] to an [`Estimate`].
pub trait Estimator: Send + Sync {
    fn method(&self) -> Method;

    fn estimate(&self, p: &Problem) -> Result<Estimate>;

    /// Estimates a batch of problems. Implementations that vectorize across
    /// problems override this and split the batch time evenly over its members.
    fn estimate_batch(&self, problems: &[Problem]) -> Vec<Result<Estimate>> {
        problems.iter().map(|p| self.estimate(p)).collect()
    }
}

/// Per-group summaries shared by both classical estimators.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupMoments {
    pub n: usize,
    pub mean_y: f64,
    pub mean_l: f64,
    /// Unbiased sample variance of the raw counts; NaN when `n < 2`.
    pub var_y: f64,
}

pub(crate) fn group_moments(p: &Problem, treatment: bool) -> GroupMoments {
    let mut n = 0usize;
    let (mut sy, mut sl) = (0.0, 0.0);
    for (y, l, x) in p.observations() {
        if x == treatment {
            n += 1;
            sy += y as f64;
            sl += l;
        }
    }
    let mean_y = sy / n as f64;
    let mean_l = sl / n as f64;
    let var_y = if n < 2 {
        f64::NAN
    } else {
        p.observations()
            .filter(|&(_, _, x)| x == treatment)
            .map(|(y, _, _)| (y as f64 - mean_y).powi(2))
            .sum::<f64>()
            / (n - 1) as f64
    };
    GroupMoments { n, mean_y, mean_l, var_y }
}

/// `(μ̂, β̂)` from ratios of group means. This is also the Poisson MLE.
pub(crate) fn ratio_of_means(g1: &GroupMoments, g2: &GroupMoments) -> (f64, f64) {
    let mu = (g1.mean_y / g1.mean_l).ln();
    let beta = (g2.mean_y / g2.mean_l).ln() - mu;
    (mu, beta)
}

/// Rejects problems without usable counts in both groups.
pub(crate) fn check_groups(g1: &GroupMoments, g2: &GroupMoments) -> Result<()> {
    for (name, g) in [("control (x=0)", g1), ("treatment (x=1)", g2)] {
        if g.n == 0 {
            return Err(Error::precondition(format!("the {name} group is empty")));
        }
        if g.mean_y == 0.0 {
            return Err(Error::Estimation(format!("all counts in the {name} group are zero")));
        }
    }
    Ok(())
}
