//! Closed-form method of moments.
//!
//! `μ̂ = ln(Ȳ₁/L̄₁)`, `β̂ = ln(Ȳ₂/L̄₂) - μ̂`, and per group
//! `φ̂_g = (S²_g - Ȳ_g)/Ȳ_g²` (unbiased variance of the raw counts), pooled as
//! `φ̂ = max(0, (φ̂₁ + φ̂₂)/2)`.

use super::{check_groups, group_moments, ratio_of_means, Estimate, Estimator, GroupMoments, Method};
use crate::error::{Error, Result};
use crate::model::{Problem, Theta};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, Default)]
pub struct MomEstimator;

impl Estimator for MomEstimator {
    fn method(&self) -> Method {
        Method::Mom
    }

    fn estimate(&self, p: &Problem) -> Result<Estimate> {
        estimate_mom(p)
    }
}

pub fn estimate_mom(p: &Problem) -> Result<Estimate> {
    let start = Instant::now();
    let theta = mom_theta(p)?;
    let runtime = start.elapsed().max(Duration::from_nanos(1));
    Ok(Estimate { theta, converged: true, iterations: 0, runtime, method: Method::Mom })
}

pub(crate) fn mom_theta(p: &Problem) -> Result<Theta> {
    let g1 = group_moments(p, false);
    let g2 = group_moments(p, true);
    for (name, g) in [("control (x=0)", &g1), ("treatment (x=1)", &g2)] {
        if g.n < 2 {
            return Err(Error::precondition(format!(
                "method of moments needs at least 2 observations in the {name} group, got {}",
                g.n
            )));
        }
    }
    check_groups(&g1, &g2)?;
    let (mu, beta) = ratio_of_means(&g1, &g2);
    Ok(Theta { mu, beta, phi: pooled_dispersion(&g1, &g2) })
}

fn group_dispersion(g: &GroupMoments) -> f64 {
    (g.var_y - g.mean_y) / (g.mean_y * g.mean_y)
}

pub(crate) fn pooled_dispersion(g1: &GroupMoments, g2: &GroupMoments) -> f64 {
    let phi = 0.5 * (group_dispersion(g1) + group_dispersion(g2));
    phi.max(0.0)
}
