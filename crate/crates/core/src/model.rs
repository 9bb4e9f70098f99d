//! The negative binomial regression model for two-group experiments.
//!
//! `y_i ~ NB(m_i, φ)` with mean `m_i = l_i·exp(μ + x_i·β)` and variance
//! `m_i + φ·m_i²`. `φ = 0` is the Poisson limit and is admitted everywhere.
//!
//! Internally the likelihood uses `a = 1/φ` and `r_i = a/(a + m_i)`. The
//! per-observation log-probability is assembled as
//!
//! ```text
//! log P(y) = [lnΓ(a+y) - lnΓ(a) - y ln a] - lnΓ(y+1) + y ln m - (a+y)·ln(1 + m/a)
//! ```
//!
//! which equals the textbook `lnΓ(y+a) - lnΓ(a) - lnΓ(y+1) + a ln r + y ln(1-r)`
//! but keeps full precision as `a → ∞`.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::special::{digamma_shift, ln_gamma, ln_gamma_shift};
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

/// Generative parameters of one two-group problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    /// Log base rate (per unit exposure) of the control group.
    pub mu: f64,
    /// Log fold change of the treatment group.
    pub beta: f64,
    /// Over-dispersion; zero is the Poisson limit.
    pub phi: f64,
}

impl Theta {
    pub fn new(mu: f64, beta: f64, phi: f64) -> Result<Self> {
        if !(phi >= 0.0) {
            return Err(Error::domain(format!("phi must be >= 0, got {phi}")));
        }
        Ok(Self { mu, beta, phi })
    }

    pub fn from_alpha(mu: f64, beta: f64, alpha: f64) -> Self {
        Self { mu, beta, phi: alpha.exp() }
    }

    /// `ln φ`; negative infinity at the Poisson limit.
    pub fn alpha(&self) -> f64 {
        self.phi.ln()
    }
}

/// Observed data of one experiment. `labels[i] == true` marks treatment (x = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    counts: Vec<u64>,
    exposures: Vec<f64>,
    labels: Vec<bool>,
}

/// The observations of a [`Problem`] split by label.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupView {
    pub y1: Vec<u64>,
    pub l1: Vec<f64>,
    pub y2: Vec<u64>,
    pub l2: Vec<f64>,
}

impl Problem {
    pub fn new(counts: Vec<u64>, exposures: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        let n = counts.len();
        if exposures.len() != n || labels.len() != n {
            return Err(Error::precondition(format!(
                "counts, exposures and labels must have equal length (got {}, {}, {})",
                n,
                exposures.len(),
                labels.len()
            )));
        }
        if n < 2 {
            return Err(Error::precondition(format!("a problem needs at least 2 observations, got {n}")));
        }
        if let Some((i, l)) = exposures.iter().enumerate().find(|(_, l)| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::domain(format!("exposure l[{i}] must be finite and > 0, got {l}")));
        }
        Ok(Self { counts, exposures, labels })
    }

    /// Builds a problem with the control observations first.
    pub fn from_groups(y1: &[u64], l1: &[f64], y2: &[u64], l2: &[f64]) -> Result<Self> {
        if y1.len() != l1.len() || y2.len() != l2.len() {
            return Err(Error::precondition("each group needs one exposure per count"));
        }
        let counts = y1.iter().chain(y2).copied().collect();
        let exposures = l1.iter().chain(l2).copied().collect();
        let labels = std::iter::repeat(false)
            .take(y1.len())
            .chain(std::iter::repeat(true).take(y2.len()))
            .collect();
        Self::new(counts, exposures, labels)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn exposures(&self) -> &[f64] {
        &self.exposures
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    /// Iterator over `(y, l, x)` triples.
    pub fn observations(&self) -> impl Iterator<Item = (u64, f64, bool)> + '_ {
        self.counts
            .iter()
            .zip(&self.exposures)
            .zip(&self.labels)
            .map(|((&y, &l), &x)| (y, l, x))
    }

    /// Sizes of the control and treatment groups.
    pub fn group_sizes(&self) -> (usize, usize) {
        let n2 = self.labels.iter().filter(|&&x| x).count();
        (self.len() - n2, n2)
    }

    pub fn groups(&self) -> GroupView {
        let mut view = GroupView { y1: Vec::new(), l1: Vec::new(), y2: Vec::new(), l2: Vec::new() };
        for (y, l, x) in self.observations() {
            if x {
                view.y2.push(y);
                view.l2.push(l);
            } else {
                view.y1.push(y);
                view.l1.push(l);
            }
        }
        view
    }

    /// The same data with the labels swapped.
    pub fn relabeled(&self) -> Self {
        Self {
            counts: self.counts.clone(),
            exposures: self.exposures.clone(),
            labels: self.labels.iter().map(|x| !x).collect(),
        }
    }
}

/// `l·exp(μ + x·β)`.
pub fn mean_function(l: f64, mu: f64, beta: f64, x: bool) -> Result<f64> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::domain(format!("exposure must be finite and > 0, got {l}")));
    }
    let m = mean_unchecked(l, mu, beta, x);
    if !m.is_finite() || m <= 0.0 {
        return Err(Error::domain(format!("mean l·exp(μ + xβ) is not a positive finite number (μ={mu}, β={beta}, l={l})")));
    }
    Ok(m)
}

#[inline]
pub(crate) fn mean_unchecked(l: f64, mu: f64, beta: f64, x: bool) -> f64 {
    let eta = if x { mu + beta } else { mu };
    l * eta.exp()
}

/// Poisson log-probability of `y` at mean `m`.
pub fn poisson_log_pmf(y: u64, m: f64) -> f64 {
    let y = y as f64;
    if y == 0.0 {
        return -m;
    }
    y * m.ln() - m - ln_gamma(y + 1.0)
}

/// Negative binomial log-probability of `y` at mean `m` and dispersion `phi`.
pub fn nb_log_pmf(y: u64, m: f64, phi: f64) -> Result<f64> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::domain(format!("mean must be finite and > 0, got {m}")));
    }
    if !(phi >= 0.0) || !phi.is_finite() {
        return Err(Error::domain(format!("phi must be finite and >= 0, got {phi}")));
    }
    Ok(log_pmf_unchecked(y, m, phi))
}

#[inline]
pub(crate) fn log_pmf_unchecked(y: u64, m: f64, phi: f64) -> f64 {
    let a = 1.0 / phi;
    if phi == 0.0 || !a.is_finite() {
        return poisson_log_pmf(y, m);
    }
    let yf = y as f64;
    let base = -(a + yf) * (m / a).ln_1p();
    if y == 0 {
        return base;
    }
    ln_gamma_shift(a, yf) - ln_gamma(yf + 1.0) + yf * m.ln() + base
}

/// Log-likelihood of `theta` given the observations in `p`.
pub fn log_likelihood(p: &Problem, t: &Theta) -> Result<f64> {
    let mut total = 0.0;
    for (y, l, x) in p.observations() {
        let m = mean_function(l, t.mu, t.beta, x)?;
        total += nb_log_pmf(y, m, t.phi)?;
    }
    Ok(total)
}

/// Per-observation log-likelihood without validation; callers guarantee
/// finite parameters and `phi >= 0`. Non-finite means yield NaN/-inf.
pub(crate) fn log_likelihood_unchecked(p: &Problem, mu: f64, beta: f64, phi: f64) -> f64 {
    p.observations()
        .map(|(y, l, x)| {
            let m = mean_unchecked(l, mu, beta, x);
            if !(m > 0.0) || !m.is_finite() {
                return f64::NEG_INFINITY;
            }
            log_pmf_unchecked(y, m, phi)
        })
        .sum()
}

/// Gradient of the log-likelihood with respect to `(μ, β, φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gradient {
    pub dmu: f64,
    pub dbeta: f64,
    pub dphi: f64,
}

/// Exact gradient of [`log_likelihood`] for `phi > 0`.
///
/// * `∂ℓ/∂μ = Σ (y_i - m_i)/(1 + φ m_i)`
/// * `∂ℓ/∂β = Σ_{x_i=1} (y_i - m_i)/(1 + φ m_i)`
/// * `∂ℓ/∂φ = -a² Σ [ψ(y_i+a) - ψ(a) + ln r_i + (m_i - y_i)/(a + m_i)]`
pub fn grad_log_likelihood(p: &Problem, t: &Theta) -> Result<Gradient> {
    if !(t.phi > 0.0) || !t.phi.is_finite() {
        return Err(Error::domain(format!("the gradient requires phi > 0, got {}", t.phi)));
    }
    for (_, l, x) in p.observations() {
        mean_function(l, t.mu, t.beta, x)?;
    }
    let (dmu, dbeta, da) = mean_and_shape_scores(p, t.mu, t.beta, t.phi);
    let a = 1.0 / t.phi;
    Ok(Gradient { dmu, dbeta, dphi: -a * a * da })
}

/// `(∂ℓ/∂μ, ∂ℓ/∂β, ∂ℓ/∂a)` with `a = 1/φ`; `φ` must be positive.
fn mean_and_shape_scores(p: &Problem, mu: f64, beta: f64, phi: f64) -> (f64, f64, f64) {
    let a = 1.0 / phi;
    let (mut dmu, mut dbeta, mut da) = (0.0, 0.0, 0.0);
    for (y, l, x) in p.observations() {
        let m = mean_unchecked(l, mu, beta, x);
        let yf = y as f64;
        let s = (yf - m) / (1.0 + phi * m);
        dmu += s;
        if x {
            dbeta += s;
        }
        da += digamma_shift(a, yf) - (m / a).ln_1p() + (m - yf) / (a + m);
    }
    (dmu, dbeta, da)
}

/// Gradient in the optimizer's coordinates `(μ, β, α = ln φ)`.
///
/// At `φ = 0` the α-component is exactly zero (it carries a factor φ) and the
/// mean components reduce to the Poisson scores.
pub(crate) fn grad_alpha_coords(p: &Problem, mu: f64, beta: f64, phi: f64) -> [f64; 3] {
    if phi == 0.0 || !(1.0 / phi).is_finite() {
        let (dmu, dbeta) = poisson_scores(p, mu, beta);
        return [dmu, dbeta, 0.0];
    }
    let (dmu, dbeta, da) = mean_and_shape_scores(p, mu, beta, phi);
    // ∂ℓ/∂α = φ ∂ℓ/∂φ = -a ∂ℓ/∂a
    [dmu, dbeta, -da / phi]
}

fn poisson_scores(p: &Problem, mu: f64, beta: f64) -> (f64, f64) {
    let (mut dmu, mut dbeta) = (0.0, 0.0);
    for (y, l, x) in p.observations() {
        let s = y as f64 - mean_unchecked(l, mu, beta, x);
        dmu += s;
        if x {
            dbeta += s;
        }
    }
    (dmu, dbeta)
}

/// `∂ℓ/∂φ` at the Poisson boundary `φ = 0`: `Σ ((y - m)² - y) / 2`.
pub(crate) fn dispersion_score_at_zero(p: &Problem, mu: f64, beta: f64) -> f64 {
    p.observations()
        .map(|(y, l, x)| {
            let y = y as f64;
            let r = y - mean_unchecked(l, mu, beta, x);
            0.5 * (r * r - y)
        })
        .sum()
}

/// Draws one count from NB(m, φ) as a Poisson–gamma mixture.
pub fn nb_sample(m: f64, phi: f64, rng: &mut Stream) -> Result<u64> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::domain(format!("mean must be finite and > 0, got {m}")));
    }
    if !(phi >= 0.0) || !phi.is_finite() {
        return Err(Error::domain(format!("phi must be finite and >= 0, got {phi}")));
    }
    let rate = if phi == 0.0 {
        m
    } else {
        let gamma = Gamma::new(1.0 / phi, phi * m)
            .map_err(|e| Error::domain(format!("gamma(1/{phi}, {phi}·{m}): {e}")))?;
        gamma.sample(rng)
    };
    if !(rate > 0.0) {
        return Ok(0);
    }
    let poisson = Poisson::new(rate).map_err(|e| Error::domain(format!("poisson({rate}): {e}")))?;
    Ok(poisson.sample(rng) as u64)
}

/// Network input transform `log10(10⁴·y/l + 1)`.
pub fn transform_input(y: u64, l: f64) -> Result<f64> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::domain(format!("exposure must be finite and > 0, got {l}")));
    }
    Ok(transform_unchecked(y, l))
}

#[inline]
pub(crate) fn transform_unchecked(y: u64, l: f64) -> f64 {
    (1e4 * y as f64 / l).ln_1p() / std::f64::consts::LN_10
}
