//! Maximum likelihood by BFGS ascent in `(μ, β, α = ln φ)`.
//!
//! The inverse Hessian starts from the inverse Fisher information of the mean
//! parameters (block-diagonal with a fixed guess for α) and is refined by BFGS
//! updates along a backtracking line search. Close to the optimum the
//! likelihood differences fall below floating-point resolution, so a step that
//! leaves the likelihood unchanged within rounding is still accepted when it
//! shrinks the gradient.
//!
//! When the dispersion score at `φ = 0` is non-positive the Poisson boundary
//! is a Karush–Kuhn–Tucker point. The ascent then typically drives α towards
//! −∞; once it crosses `ALPHA_BOUNDARY` the fit is resolved exactly at the
//! boundary (`φ̂ = 0` with the closed-form Poisson means).

use super::mom::pooled_dispersion;
use super::{check_groups, group_moments, ratio_of_means, Estimate, Estimator, MleInit, MleOptions, Method};
use crate::error::Result;
use crate::model::{dispersion_score_at_zero, grad_alpha_coords, log_likelihood_unchecked, mean_unchecked, Problem, Theta};
use std::time::{Duration, Instant};

const INIT_PHI_FLOOR: f64 = 1e-4;
const ALPHA_BOUNDARY: f64 = -20.0;
const ALPHA_CEILING: f64 = 25.0;
const MAX_STEP: f64 = 5.0;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;

#[derive(Debug, Clone, Copy, Default)]
pub struct MleEstimator {
    pub options: MleOptions,
}

impl MleEstimator {
    pub fn new(options: MleOptions) -> Self {
        Self { options }
    }
}

impl Estimator for MleEstimator {
    fn method(&self) -> Method {
        Method::Mle
    }

    fn estimate(&self, p: &Problem) -> Result<Estimate> {
        estimate_mle(p, &self.options)
    }
}

pub fn estimate_mle(p: &Problem, opts: &MleOptions) -> Result<Estimate> {
    opts.validate()?;
    let start = Instant::now();
    let fit = fit(p, opts)?;
    let runtime = start.elapsed().max(Duration::from_nanos(1));
    Ok(Estimate {
        theta: fit.theta,
        converged: fit.converged,
        iterations: fit.iterations,
        runtime,
        method: Method::Mle,
    })
}

struct Fit {
    theta: Theta,
    converged: bool,
    iterations: usize,
}

fn norm_inf(v: &[f64; 3]) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn mat_vec(h: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [dot(&h[0], v), dot(&h[1], v), dot(&h[2], v)]
}

/// Objective `-ℓ` and its gradient in `(μ, β, α)`.
fn objective(p: &Problem, z: &[f64; 3]) -> (f64, [f64; 3]) {
    let phi = z[2].exp();
    let f = -log_likelihood_unchecked(p, z[0], z[1], phi);
    if !f.is_finite() {
        return (f64::INFINITY, [f64::NAN; 3]);
    }
    let g = grad_alpha_coords(p, z[0], z[1], phi);
    (f, [-g[0], -g[1], -g[2]])
}

/// Inverse expected information of `(μ, β)` with a fixed α entry.
fn initial_inverse_hessian(p: &Problem, z: &[f64; 3]) -> [[f64; 3]; 3] {
    let phi = z[2].exp();
    let (mut s0, mut s1) = (0.0, 0.0);
    for (_, l, x) in p.observations() {
        let m = mean_unchecked(l, z[0], z[1], x);
        let w = m / (1.0 + phi * m);
        if x {
            s1 += w;
        } else {
            s0 += w;
        }
    }
    let mut h = [[0.0; 3]; 3];
    if s0 > 0.0 && s1 > 0.0 && (s0 * s1).is_finite() {
        h[0][0] = 1.0 / s0;
        h[0][1] = -1.0 / s0;
        h[1][0] = -1.0 / s0;
        h[1][1] = 1.0 / s0 + 1.0 / s1;
    } else {
        h[0][0] = 1.0;
        h[1][1] = 1.0;
    }
    h[2][2] = 2.0 / p.len() as f64;
    h
}

/// Magnitude of rounding noise in `-ℓ`, from the size of its largest terms.
fn objective_noise(p: &Problem, z: &[f64; 3]) -> f64 {
    let scale: f64 = p
        .observations()
        .map(|(y, l, x)| {
            let y = y as f64;
            let m = mean_unchecked(l, z[0], z[1], x);
            (y + 1.0) * (y + 2.0).ln() + y * m.ln().abs() + m
        })
        .sum();
    64.0 * f64::EPSILON * (1.0 + scale)
}

fn fit(p: &Problem, opts: &MleOptions) -> Result<Fit> {
    let g1 = group_moments(p, false);
    let g2 = group_moments(p, true);
    check_groups(&g1, &g2)?;
    let (mu_b, beta_b) = ratio_of_means(&g1, &g2);

    let init = match opts.init {
        MleInit::FromMoM => {
            let phi = if g1.n >= 2 && g2.n >= 2 { pooled_dispersion(&g1, &g2) } else { 0.0 };
            Theta { mu: mu_b, beta: beta_b, phi }
        }
        MleInit::Provided(t) => t,
    };
    let phi0 = if init.phi > INIT_PHI_FLOOR { init.phi } else { INIT_PHI_FLOOR };
    let mut z = [init.mu, init.beta, phi0.ln()];

    let boundary_is_kkt = dispersion_score_at_zero(p, mu_b, beta_b) <= 0.0;
    let noise = objective_noise(p, &z);

    let h0 = initial_inverse_hessian(p, &z);
    let mut h = h0;
    let (mut f, mut g) = objective(p, &z);
    let mut iterations = 0;
    let mut converged = false;
    let mut reached_boundary = false;

    if f.is_finite() {
        while iterations < opts.max_iterations {
            if norm_inf(&g) < opts.grad_tolerance {
                converged = true;
                break;
            }
            if boundary_is_kkt && z[2] < ALPHA_BOUNDARY && g[2] > 0.0 {
                reached_boundary = true;
                break;
            }
            iterations += 1;

            let mut d = mat_vec(&h, &g).map(|v| -v);
            if !(dot(&g, &d) < 0.0) {
                h = initial_inverse_hessian(p, &z);
                d = mat_vec(&h, &g).map(|v| -v);
            }
            let longest = norm_inf(&d);
            if longest > MAX_STEP {
                d = d.map(|v| v * MAX_STEP / longest);
            }
            if z[2] + d[2] > ALPHA_CEILING {
                let t = (ALPHA_CEILING - z[2]) / d[2];
                d = d.map(|v| v * t.max(0.0));
            }
            let slope = dot(&g, &d);
            let gnorm = norm_inf(&g);

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial = [z[0] + step * d[0], z[1] + step * d[1], z[2] + step * d[2]];
                let (ft, gt) = objective(p, &trial);
                if ft.is_finite() {
                    let armijo = ft <= f + ARMIJO_C1 * step * slope;
                    let flat = ft <= f + noise && norm_inf(&gt) < gnorm;
                    if armijo || flat {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((z_new, f_new, g_new)) = accepted else {
                if h != h0 {
                    // Retry from a fresh curvature model before giving up.
                    h = h0;
                    continue;
                }
                break;
            };

            let s = [z_new[0] - z[0], z_new[1] - z[1], z_new[2] - z[2]];
            let y = [g_new[0] - g[0], g_new[1] - g[1], g_new[2] - g[2]];
            let sy = dot(&s, &y);
            if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                bfgs_update(&mut h, &s, &y, sy);
            }
            z = z_new;
            f = f_new;
            g = g_new;
        }
        if !converged && !reached_boundary && norm_inf(&g) < opts.grad_tolerance {
            converged = true;
        }
    }

    let interior = Fit { theta: Theta { mu: z[0], beta: z[1], phi: z[2].exp() }, converged, iterations };
    if !boundary_is_kkt {
        return Ok(interior);
    }

    let boundary_ll = log_likelihood_unchecked(p, mu_b, beta_b, 0.0);
    let interior_ll = if f.is_finite() { -f } else { f64::NEG_INFINITY };
    if reached_boundary || boundary_ll >= interior_ll {
        let scores = grad_alpha_coords(p, mu_b, beta_b, 0.0);
        return Ok(Fit {
            theta: Theta { mu: mu_b, beta: beta_b, phi: 0.0 },
            converged: norm_inf(&scores) < opts.grad_tolerance,
            iterations,
        });
    }
    Ok(interior)
}

/// `H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ` with `ρ = 1/(yᵀs)`.
fn bfgs_update(h: &mut [[f64; 3]; 3], s: &[f64; 3], y: &[f64; 3], sy: f64) {
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let mut next = *h;
    for i in 0..3 {
        for j in 0..3 {
            next[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
    *h = next;
}
