//! Wald tests for the effect size from any estimator's parameters.
//!
//! With weights `w_i = m_i/(1 + φ m_i)` and group totals `S₀`, `S₁`, the Fisher
//! information of `(μ, β)` is `[[S₀+S₁, S₁], [S₁, S₁]]`, whose inverse has
//! `(2,2)` element `1/S₀ + 1/S₁`.

use crate::error::{Error, Result};
use crate::model::{mean_function, Problem, Theta};
use crate::special::{chi2_1_sf, normal_two_sided_p};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub se_beta: f64,
    pub z: f64,
    /// Two-sided p-value in [0, 1].
    pub p: f64,
}

/// IRLS weight `m/(1 + φ m)`.
pub fn observation_weight(m: f64, phi: f64) -> Result<f64> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::domain(format!("mean must be finite and > 0, got {m}")));
    }
    if !(phi >= 0.0) || !phi.is_finite() {
        return Err(Error::domain(format!("phi must be finite and >= 0, got {phi}")));
    }
    Ok(m / (1.0 + phi * m))
}

/// Group weight totals `(S₀, S₁)` at parameters `t`.
pub fn group_weights(p: &Problem, t: &Theta) -> Result<(f64, f64)> {
    let (mut s0, mut s1) = (0.0, 0.0);
    for (_, l, x) in p.observations() {
        let w = observation_weight(mean_function(l, t.mu, t.beta, x)?, t.phi)?;
        if x {
            s1 += w;
        } else {
            s0 += w;
        }
    }
    Ok((s0, s1))
}

/// Standard error of `β̂` from the inverse Fisher information.
pub fn se_beta(p: &Problem, t: &Theta) -> Result<f64> {
    let (s0, s1) = group_weights(p, t)?;
    if !(s0 > 0.0) || !(s1 > 0.0) {
        return Err(Error::Inference(format!(
            "both groups need positive total weight (S0 = {s0}, S1 = {s1})"
        )));
    }
    let se = (1.0 / s0 + 1.0 / s1).sqrt();
    if !se.is_finite() {
        return Err(Error::Inference(format!("standard error is not finite (S0 = {s0}, S1 = {s1})")));
    }
    Ok(se)
}

/// Wald test of `β = 0`; the p-value is the χ²(1) survival function at `z²`.
pub fn wald_test(beta_hat: f64, se: f64) -> Result<WaldResult> {
    if !(se > 0.0) || !se.is_finite() {
        return Err(Error::Inference(format!("standard error must be finite and > 0, got {se}")));
    }
    if !beta_hat.is_finite() {
        return Err(Error::Inference(format!("effect estimate is not finite: {beta_hat}")));
    }
    let z = beta_hat / se;
    let p = chi2_1_sf(z * z).clamp(0.0, 1.0);
    Ok(WaldResult { se_beta: se, z, p })
}

/// Two-sided normal form `2·(1 - Φ(|z|))`; equal to [`wald_test`]'s p-value.
pub fn two_sided_normal_p(z: f64) -> f64 {
    normal_two_sided_p(z)
}

/// Estimate → standard error → Wald test in one call.
pub fn test_effect(p: &Problem, t: &Theta) -> Result<WaldResult> {
    wald_test(t.beta, se_beta(p, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Builds XᵀWX explicitly from the design and inverts it by cofactors.
    fn explicit_inverse_se(p: &Problem, t: &Theta) -> f64 {
        let mut xtwx = [[0.0; 2]; 2];
        for (_, l, x) in p.observations() {
            let m = l * (t.mu + if x { t.beta } else { 0.0 }).exp();
            let w = m / (1.0 + t.phi * m);
            let row = [1.0, if x { 1.0 } else { 0.0 }];
            for i in 0..2 {
                for j in 0..2 {
                    xtwx[i][j] += row[i] * w * row[j];
                }
            }
        }
        let det = xtwx[0][0] * xtwx[1][1] - xtwx[0][1] * xtwx[1][0];
        (xtwx[0][0] / det).sqrt()
    }

    #[test]
    fn weight_examples() {
        assert_eq!(observation_weight(10.0, 0.0).unwrap(), 10.0);
        assert_eq!(observation_weight(10.0, 0.1).unwrap(), 5.0);
        assert!(observation_weight(10.0, 0.2).unwrap() < observation_weight(10.0, 0.1).unwrap());
        assert!(observation_weight(0.0, 0.1).is_err());
        assert!(observation_weight(1.0, -0.1).is_err());
    }

    #[test]
    fn poisson_three_by_three() {
        let p = Problem::from_groups(&[0; 3], &[3.0; 3], &[0; 3], &[3.0; 3]).unwrap();
        let se = se_beta(&p, &Theta::new(0.0, 0.0, 0.0).unwrap()).unwrap();
        assert!((se - 0.471_404_520_791_031_7).abs() < 1e-15);
    }

    #[test]
    fn doubling_weights_shrinks_se_by_sqrt2() {
        let p = Problem::from_groups(&[1, 2], &[1.0, 2.0], &[3, 4], &[0.5, 1.5]).unwrap();
        let q = Problem::from_groups(&[1, 2], &[2.0, 4.0], &[3, 4], &[1.0, 3.0]).unwrap();
        let t = Theta::new(0.3, -0.2, 0.0).unwrap();
        let ratio = se_beta(&q, &t).unwrap() / se_beta(&p, &t).unwrap();
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn poisson_glm_standard_error() {
        let p = Problem::from_groups(&[1, 2, 3], &[1.0, 2.0, 1.0], &[3, 4], &[0.5, 1.5]).unwrap();
        let t = Theta::new(0.4, 0.9, 0.0).unwrap();
        let sum0: f64 = [1.0, 2.0, 1.0].iter().map(|l| l * 0.4f64.exp()).sum();
        let sum1: f64 = [0.5, 1.5].iter().map(|l| l * 1.3f64.exp()).sum();
        assert!((se_beta(&p, &t).unwrap() - (1.0 / sum0 + 1.0 / sum1).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn wald_examples() {
        assert_eq!(wald_test(0.0, 0.3).unwrap().p, 1.0);
        let r = wald_test(1.959_964, 1.0).unwrap();
        assert!((r.p - 0.05).abs() < 1e-6);
        let r = wald_test(2.0, 1.0).unwrap();
        assert!((r.p - 0.045_500_263_896_358_41).abs() < 1e-12);
        assert!((r.p - two_sided_normal_p(2.0)).abs() < 1e-12);
        assert!(wald_test(1.0, 0.0).is_err());
        assert!(wald_test(1.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn se_matches_explicit_inversion(
            mu in -3.0f64..3.0, beta in -2.0f64..2.0, phi in 0.0f64..3.0,
            l in prop::collection::vec(0.2f64..5.0, 4..12), split in 1usize..3,
        ) {
            let n1 = split.min(l.len() - 1).max(1);
            let labels: Vec<bool> = (0..l.len()).map(|i| i >= n1).collect();
            let p = Problem::new(vec![0; l.len()], l, labels).unwrap();
            let t = Theta::new(mu, beta, phi).unwrap();
            let se = se_beta(&p, &t).unwrap();
            let oracle = explicit_inverse_se(&p, &t);
            prop_assert!((se - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }

        #[test]
        fn se_invariant_under_within_group_permutation(seed in 0u64..1000) {
            let y1 = [3u64, 8, 1, 5];
            let l1 = [1.0, 2.0, 0.5, 1.5];
            let mut order: Vec<usize> = (0..4).collect();
            order.rotate_left((seed % 4) as usize);
            order.swap(0, (seed as usize / 4) % 4);
            let py: Vec<u64> = order.iter().map(|&i| y1[i]).collect();
            let pl: Vec<f64> = order.iter().map(|&i| l1[i]).collect();
            let t = Theta::new(0.2, 0.5, 0.4).unwrap();
            let a = se_beta(&Problem::from_groups(&y1, &l1, &[2, 9], &[1.0, 1.0]).unwrap(), &t).unwrap();
            let b = se_beta(&Problem::from_groups(&py, &pl, &[2, 9], &[1.0, 1.0]).unwrap(), &t).unwrap();
            prop_assert!((a - b).abs() < 1e-15 * a);
        }

        #[test]
        fn p_is_monotone_in_abs_z(z1 in 0.0f64..10.0, dz in 1e-3f64..2.0) {
            let a = wald_test(z1, 1.0).unwrap().p;
            let b = wald_test(-(z1 + dz), 1.0).unwrap().p;
            prop_assert!(b <= a);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
