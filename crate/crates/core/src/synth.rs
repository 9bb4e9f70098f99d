//! Synthetic parameters and problems drawn from the generative priors.
//!
//! One [`Priors`] value feeds both transformer training and every benchmark.
//! All second parameters of the Normal and LogNormal priors are variances.

use crate::error::{Error, Result};
use crate::model::{mean_function, nb_sample, Problem, Theta};
use crate::rng::Stream;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Largest set size the transformer supports.
pub const MAX_SET_SIZE: usize = 10;
/// Smallest set size the transformer supports.
pub const MIN_SET_SIZE: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub mu_mean: f64,
    pub mu_var: f64,
    pub alpha_mean: f64,
    pub alpha_var: f64,
    /// Probability that the effect is non-zero.
    pub delta_prob: f64,
    pub beta_mean: f64,
    pub beta_var: f64,
    pub exposure_log_mean: f64,
    pub exposure_log_var: f64,
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for Priors {
    fn default() -> Self {
        let log_var = 1.09f64.ln();
        Self {
            mu_mean: -1.0,
            mu_var: 2.0,
            alpha_mean: -2.0,
            alpha_var: 1.0,
            delta_prob: 0.3,
            beta_mean: 0.0,
            beta_var: 1.0,
            exposure_log_mean: 1e4f64.ln() - log_var / 2.0,
            exposure_log_var: log_var,
            n_min: 2,
            n_max: 10,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mu_var", self.mu_var),
            ("alpha_var", self.alpha_var),
            ("beta_var", self.beta_var),
            ("exposure_log_var", self.exposure_log_var),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a positive variance, got {v}")));
            }
        }
        for (name, v) in [("mu_mean", self.mu_mean), ("alpha_mean", self.alpha_mean), ("beta_mean", self.beta_mean), ("exposure_log_mean", self.exposure_log_mean)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.delta_prob) {
            return Err(Error::Config(format!("delta_prob must lie in [0, 1], got {}", self.delta_prob)));
        }
        if !(MIN_SET_SIZE <= self.n_min && self.n_min <= self.n_max && self.n_max <= MAX_SET_SIZE) {
            return Err(Error::Config(format!(
                "need {MIN_SET_SIZE} <= n_min <= n_max <= {MAX_SET_SIZE}, got n_min = {}, n_max = {}",
                self.n_min, self.n_max
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let priors: Self = toml::from_str(s).map_err(|e| Error::Config(format!("priors: {e}")))?;
        priors.validate()?;
        Ok(priors)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("priors serialize to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    fn normal(mean: f64, var: f64) -> Normal<f64> {
        Normal::new(mean, var.sqrt()).expect("validated prior")
    }

    /// Draws `(μ, β, φ)`; β is exactly zero with probability `1 - delta_prob`.
    pub fn sample_parameters(&self, rng: &mut Stream) -> Theta {
        let mu = Self::normal(self.mu_mean, self.mu_var).sample(rng);
        let alpha = Self::normal(self.alpha_mean, self.alpha_var).sample(rng);
        let delta = rng.random::<f64>() < self.delta_prob;
        let slab = Self::normal(self.beta_mean, self.beta_var).sample(rng);
        let beta = if delta { slab } else { 0.0 };
        Theta { mu, beta, phi: alpha.exp() }
    }

    pub fn sample_exposures(&self, n: usize, rng: &mut Stream) -> Vec<f64> {
        let d = LogNormal::new(self.exposure_log_mean, self.exposure_log_var.sqrt()).expect("validated prior");
        (0..n).map(|_| d.sample(rng)).collect()
    }

    pub fn sample_set_size(&self, rng: &mut Stream) -> usize {
        rng.random_range(self.n_min..=self.n_max)
    }
}

/// Group sizes and one exposure per observation (control first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub n1: usize,
    pub n2: usize,
    pub exposures: Vec<f64>,
}

impl Design {
    pub fn new(n1: usize, n2: usize, exposures: Vec<f64>) -> Result<Self> {
        check_size(n1)?;
        check_size(n2)?;
        if exposures.len() != n1 + n2 {
            return Err(Error::precondition(format!(
                "design {n1}v{n2} needs {} exposures, got {}",
                n1 + n2,
                exposures.len()
            )));
        }
        if exposures.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::domain("design exposures must be finite and > 0"));
        }
        Ok(Self { n1, n2, exposures })
    }
}

fn check_size(n: usize) -> Result<()> {
    if !(MIN_SET_SIZE..=MAX_SET_SIZE).contains(&n) {
        return Err(Error::precondition(format!(
            "group size must lie in [{MIN_SET_SIZE}, {MAX_SET_SIZE}], got {n}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExposureMode {
    /// Exposures drawn from the exposure prior.
    Prior,
    /// Every exposure equals 10⁴.
    Constant,
}

/// Draws parameters, group sizes and exposures.
pub fn sample_theta(priors: &Priors, rng: &mut Stream) -> (Theta, Design) {
    let theta = priors.sample_parameters(rng);
    let n1 = priors.sample_set_size(rng);
    let n2 = priors.sample_set_size(rng);
    let exposures = priors.sample_exposures(n1 + n2, rng);
    (theta, Design { n1, n2, exposures })
}

/// A design with fixed group sizes, as used by the benchmark sweeps.
pub fn fixed_design(n1: usize, n2: usize, mode: ExposureMode, priors: &Priors, rng: &mut Stream) -> Result<Design> {
    check_size(n1)?;
    check_size(n2)?;
    let exposures = match mode {
        ExposureMode::Constant => vec![1e4; n1 + n2],
        ExposureMode::Prior => priors.sample_exposures(n1 + n2, rng),
    };
    Ok(Design { n1, n2, exposures })
}

/// Draws counts for a design: the first `n1` observations are controls.
pub fn generate_problem(t: &Theta, d: &Design, rng: &mut Stream) -> Result<Problem> {
    let mut counts = Vec::with_capacity(d.n1 + d.n2);
    let mut labels = Vec::with_capacity(d.n1 + d.n2);
    for (i, &l) in d.exposures.iter().enumerate() {
        let x = i >= d.n1;
        let m = mean_function(l, t.mu, t.beta, x)?;
        counts.push(nb_sample(m, t.phi, rng)?);
        labels.push(x);
    }
    Problem::new(counts, d.exposures.clone(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn partial_priors_file_keeps_other_defaults() {
        let p = Priors::from_toml_str("mu_mean = 0.5\n").unwrap();
        assert_eq!(p, Priors { mu_mean: 0.5, ..Priors::default() });
        assert!(Priors::from_toml_str("mu_mena = 0.5\n").is_err());
    }

    #[test]
    fn default_priors_are_valid_and_round_trip() {
        let p = Priors::default();
        p.validate().unwrap();
        let text = p.to_toml_string();
        for key in ["mu_mean", "mu_var", "alpha_mean", "alpha_var", "delta_prob", "beta_mean", "beta_var", "exposure_log_mean", "exposure_log_var", "n_min", "n_max"] {
            assert!(text.contains(key), "missing {key}");
        }
        assert_eq!(Priors::from_toml_str(&text).unwrap(), p);
    }

    #[test]
    fn invalid_priors_are_rejected() {
        let bad = Priors { mu_var: 0.0, ..Priors::default() };
        assert!(bad.validate().is_err());
        let bad = Priors { delta_prob: 1.5, ..Priors::default() };
        assert!(bad.validate().is_err());
        let bad = Priors { n_min: 1, ..Priors::default() };
        assert!(bad.validate().is_err());
        let bad = Priors { n_max: 11, ..Priors::default() };
        assert!(bad.validate().is_err());
        assert!(Priors::from_toml_str("mu_mean = 1.0\nunknown = 3").is_err());
    }

    #[test]
    fn fixed_designs() {
        let pr = Priors::default();
        let mut s = rng::stream(1);
        let d = fixed_design(3, 3, ExposureMode::Constant, &pr, &mut s).unwrap();
        assert_eq!(d.exposures, vec![1e4; 6]);
        assert_eq!(d, fixed_design(3, 3, ExposureMode::Constant, &pr, &mut s).unwrap());
        let d = fixed_design(9, 9, ExposureMode::Prior, &pr, &mut s).unwrap();
        assert_eq!(d.exposures.len(), 18);
        assert!(d.exposures.iter().all(|&l| l > 0.0));
        assert!(fixed_design(1, 3, ExposureMode::Constant, &pr, &mut s).is_err());
        assert!(fixed_design(3, 11, ExposureMode::Constant, &pr, &mut s).is_err());
    }

    #[test]
    fn generated_problem_layout() {
        let pr = Priors::default();
        let mut s = rng::stream(5);
        let (t, d) = sample_theta(&pr, &mut s);
        let p = generate_problem(&t, &d, &mut s).unwrap();
        assert_eq!(p.group_sizes(), (d.n1, d.n2));
        assert!(p.labels()[..d.n1].iter().all(|x| !x));
        assert!(p.labels()[d.n1..].iter().all(|&x| x));
        let again = {
            let mut s = rng::stream(5);
            let (t, d) = sample_theta(&pr, &mut s);
            generate_problem(&t, &d, &mut s).unwrap()
        };
        assert_eq!(p, again);
    }

    #[test]
    fn poisson_limit_group_means() {
        let t = Theta { mu: 5f64.ln(), beta: 0.0, phi: 0.0 };
        let mut s = rng::stream(9);
        let design = Design::new(5, 5, vec![1.0; 10]).unwrap();
        let n = 4000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let p = generate_problem(&t, &design, &mut s).unwrap();
            let g = p.groups();
            s1 += g.y1.iter().sum::<u64>() as f64 / 5.0;
            s2 += g.y2.iter().sum::<u64>() as f64 / 5.0;
        }
        // SE of each grand mean: sqrt(5 / (5 n))
        let se = (1.0 / n as f64).sqrt();
        assert!((s1 / n as f64 - 5.0).abs() < 5.0 * se);
        assert!((s2 / n as f64 - 5.0).abs() < 5.0 * se);
    }

    #[test]
    fn fold_change_is_recovered() {
        let pr = Priors::default();
        let t = Theta { mu: -1.0, beta: 2f64.ln(), phi: 0.1 };
        let mut s = rng::stream(10);
        let (mut y1, mut l1, mut y2, mut l2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..10_000 {
            let d = fixed_design(3, 3, ExposureMode::Prior, &pr, &mut s).unwrap();
            let p = generate_problem(&t, &d, &mut s).unwrap();
            let g = p.groups();
            y1 += g.y1.iter().sum::<u64>() as f64;
            y2 += g.y2.iter().sum::<u64>() as f64;
            l1 += g.l1.iter().sum::<f64>();
            l2 += g.l2.iter().sum::<f64>();
        }
        let ratio = (y2 / l2) / (y1 / l1);
        assert!((ratio - 2.0).abs() < 0.04, "ratio {ratio}");
    }
}
