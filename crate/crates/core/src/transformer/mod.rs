//! Amortized estimator: a set transformer mapping a two-group problem straight
//! to `(μ̂, β̂, α̂ = ln φ̂)` in one non-iterative pass.
//!
//! Pipeline per problem: transformed counts `log10(1 + 10⁴·y/l)` → learned
//! scalar affine → linear embedding `1 → d` → `L` pre-norm self-attention
//! blocks within each set → `cross_blocks` bidirectional cross-attention blocks
//! → final layer norm → mean pooling to `ϕ₁, ϕ₂` → `ξ = [ϕ₁; ϕ₂; ϕ₁−ϕ₂; ϕ₁⊙ϕ₂]`
//! → MLP head `4d → 2d → 2d → 3` → learned per-target affine.

mod estimator;
mod io;
mod network;
pub mod tensor;
mod train;
mod weights;

pub use estimator::{Precision, TransformerEstimator};
pub use io::{load_weights, read_weights, save_weights, write_weights, FORMAT_VERSION, MAGIC};
pub use tensor::{Real, Tensor};
pub use train::{train, LogRow, RunConfig, TrainConfig, TrainManifest, Trained, TrainingLog};
pub use weights::{
    init_model, Attention, Block, FeedForward, Gradients, LayerNorm, Linear, Pathway, TransformerWeights,
};

use crate::error::{Error, Result};
use crate::model::{Problem, Theta};
use crate::rng::Stream;
use network::{backward_impl, batch_loss, forward_batch_impl, Dropout};
use serde::{Deserialize, Serialize};

/// Fields missing from a config file take their [`ModelConfig::desk`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Attention heads; must divide `d`.
    pub h: usize,
    /// Self-attention blocks per set pathway.
    #[serde(rename = "L")]
    pub layers: usize,
    /// Dropout rate, active in training only.
    pub dropout: f64,
    pub ff_mult: usize,
    pub cross_blocks: usize,
    /// One pathway serves both sets when true.
    pub share_set_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-size model: 2.58M parameters with separate weights per set.
    pub fn full() -> Self {
        Self {
            d: 128,
            h: 8,
            layers: 3,
            dropout: 0.1,
            ff_mult: 4,
            cross_blocks: 3,
            share_set_weights: false,
        }
    }

    /// Laptop-scale model.
    pub fn desk() -> Self {
        Self {
            d: 32,
            h: 4,
            layers: 2,
            dropout: 0.1,
            ff_mult: 4,
            cross_blocks: 1,
            share_set_weights: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.d % self.h != 0 {
            return Err(Error::Config(format!("d = {} must be a positive multiple of h = {}", self.d, self.h)));
        }
        if self.layers < 1 {
            return Err(Error::Config("L must be >= 1".into()));
        }
        if self.ff_mult < 1 {
            return Err(Error::Config("ff_mult must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Network output (or training target) on the `(μ, β, α = ln φ)` scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mu: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl Prediction {
    pub fn from_theta(t: &Theta) -> Self {
        Self { mu: t.mu, beta: t.beta, alpha: t.alpha() }
    }

    pub fn phi(&self) -> f64 {
        self.alpha.exp()
    }

    pub fn to_theta(&self) -> Result<Theta> {
        Theta::new(self.mu, self.beta, self.phi())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mu: f64,
    pub beta: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mu: 1.0, beta: 1.0, alpha: 2.0 }
    }
}

/// `w_μ(μ−μ̂)² + w_β(β−β̂)² + w_α(α−α̂)²`.
pub fn loss(pred: &Prediction, target: &Prediction, w: &LossWeights) -> f64 {
    w.mu * (target.mu - pred.mu).powi(2)
        + w.beta * (target.beta - pred.beta).powi(2)
        + w.alpha * (target.alpha - pred.alpha).powi(2)
}

fn rows_to_predictions<T: Real>(out: &tensor::Mat<T>) -> Vec<Prediction> {
    (0..out.rows)
        .map(|i| {
            let r = out.row(i);
            Prediction {
                mu: r[0].to_f64().unwrap_or(f64::NAN),
                beta: r[1].to_f64().unwrap_or(f64::NAN),
                alpha: r[2].to_f64().unwrap_or(f64::NAN),
            }
        })
        .collect()
}

/// Inference-mode forward pass (dropout off) for one problem.
pub fn forward(w: &TransformerWeights, p: &Problem) -> Result<Prediction> {
    Ok(forward_batch(w, std::slice::from_ref(p))?.remove(0))
}

/// Inference-mode forward pass over a batch, in the weights' scalar type.
pub fn forward_batch<T: Real>(w: &TransformerWeights<T>, problems: &[Problem]) -> Result<Vec<Prediction>> {
    let refs: Vec<&Problem> = problems.iter().collect();
    let (out, _) = forward_batch_impl(w, &refs, None)?;
    Ok(rows_to_predictions(&out))
}

/// The pooled comparison vector `ξ ∈ R^{4d}` for one problem.
pub fn features(w: &TransformerWeights, p: &Problem) -> Result<Vec<f64>> {
    let (_, trace) = forward_batch_impl(w, &[p], None)?;
    Ok(trace.xi_row(0).to_vec())
}

/// Loss and its gradient for one problem, dropout off.
pub fn backward(w: &TransformerWeights, p: &Problem, target: &Prediction, lw: &LossWeights) -> Result<(f64, Gradients)> {
    backward_batch(w, &[p], std::slice::from_ref(target), lw, None)
}

/// Mean loss over a batch and its gradient. With `dropout = Some(rng)` the pass
/// runs in training mode at the configured rate.
pub fn backward_batch(
    w: &TransformerWeights,
    problems: &[&Problem],
    targets: &[Prediction],
    lw: &LossWeights,
    dropout: Option<&mut Stream>,
) -> Result<(f64, Gradients)> {
    if problems.len() != targets.len() || problems.is_empty() {
        return Err(Error::precondition(format!(
            "need one target per problem and a non-empty batch, got {} problems and {} targets",
            problems.len(),
            targets.len()
        )));
    }
    let drop = dropout.map(|rng| Dropout { rate: w.config.dropout, rng });
    let (out, trace) = forward_batch_impl(w, problems, drop)?;
    let (value, dout) = batch_loss(&out, targets, lw);
    let mut g = w.zeros_like();
    backward_impl(w, &trace, &dout, &mut g);
    Ok((value, g))
}

#[cfg(test)]
mod tests;
