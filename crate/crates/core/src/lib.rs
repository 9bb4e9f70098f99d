//! Negative binomial regression for two-group count experiments.
//!
//! Three interchangeable estimators share one contract ([`estimators::Estimator`]):
//! closed-form method of moments, quasi-Newton maximum likelihood, and an
//! amortized set-transformer trained on synthetic data. Any of their outputs can
//! be turned into a Wald test of `beta = 0` through [`inference`], and the
//! [`bench`] module runs the accuracy/runtime, calibration and power sweeps.

pub mod bench;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod model;
pub mod rng;
pub mod special;
pub mod synth;
pub mod transformer;

pub use error::{Error, Result};
pub use estimators::{Estimate, Estimator, Method, MleOptions};
pub use model::{GroupView, Problem, Theta};
pub use synth::{Design, Priors};
