//! Parameter layout of the set transformer.
//!
//! Tensors are addressed by stable dotted names (`pathway0.self1.attn.q.weight`,
//! `head2.bias`, ...). The same structure doubles as the gradient and optimizer
//! state container.

use super::tensor::{Real, Tensor};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Stream;
use rand::Rng;

/// Initial input affine: maps the transformed counts of a typical experiment
/// to roughly zero mean and unit spread.
pub const INPUT_SCALE: f64 = 1.25;
pub const INPUT_SHIFT: f64 = -4.4;
/// Initial output affine for `(μ, β, α)`: the prior spread and location of each target.
pub const TARGET_SCALE: [f64; 3] = [std::f64::consts::SQRT_2, 0.547_722_557_505_166_1, 1.0];
pub const TARGET_SHIFT: [f64; 3] = [-1.0, 0.0, -2.0];
/// The last head layer starts small so initial predictions sit near the prior means.
const HEAD_OUTPUT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f64> {
    /// `in × out`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T = f64> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T = f64> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

/// Pre-norm residual block: `h += attn(ln_attn(h), ·)`, then `h += ff(ln_ff(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T = f64> {
    pub ln_attn: LayerNorm<T>,
    pub attn: Attention<T>,
    pub ln_ff: LayerNorm<T>,
    pub ff: FeedForward<T>,
}

/// Everything that processes one of the two sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Pathway<T = f64> {
    pub self_blocks: Vec<Block<T>>,
    pub cross_blocks: Vec<Block<T>>,
    pub ln_final: LayerNorm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights<T = f64> {
    pub config: ModelConfig,
    /// `[scale, shift]` applied to each transformed count.
    pub input_affine: Tensor<T>,
    /// Projection `1 → d`.
    pub embed: Linear<T>,
    /// One pathway when set weights are shared, else one per set.
    pub pathways: Vec<Pathway<T>>,
    /// `4d → 2d → 2d → 3`.
    pub head: Vec<Linear<T>>,
    pub target_scale: Tensor<T>,
    pub target_shift: Tensor<T>,
}

pub type Gradients = TransformerWeights<f64>;

type Named<'a, T> = Vec<(String, &'a Tensor<T>)>;
type NamedMut<'a, T> = Vec<(String, &'a mut Tensor<T>)>;

impl<T> Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

impl<T> Block<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Named<'a, T>) {
        self.ln_attn.collect(&format!("{prefix}.ln_attn"), out);
        let a = &self.attn;
        for (name, l) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o)] {
            l.collect(&format!("{prefix}.attn.{name}"), out);
        }
        self.ln_ff.collect(&format!("{prefix}.ln_ff"), out);
        self.ff.up.collect(&format!("{prefix}.ff.up"), out);
        self.ff.down.collect(&format!("{prefix}.ff.down"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, T>) {
        self.ln_attn.collect_mut(&format!("{prefix}.ln_attn"), out);
        let a = &mut self.attn;
        for (name, l) in [("q", &mut a.q), ("k", &mut a.k), ("v", &mut a.v), ("o", &mut a.o)] {
            l.collect_mut(&format!("{prefix}.attn.{name}"), out);
        }
        self.ln_ff.collect_mut(&format!("{prefix}.ln_ff"), out);
        self.ff.up.collect_mut(&format!("{prefix}.ff.up"), out);
        self.ff.down.collect_mut(&format!("{prefix}.ff.down"), out);
    }
}

impl<T: Real> Linear<T> {
    fn zeros(inp: usize, out: usize) -> Self {
        Self { weight: Tensor::zeros(&[inp, out]), bias: Tensor::zeros(&[out]) }
    }
}

impl<T: Real> LayerNorm<T> {
    fn identity(d: usize) -> Self {
        Self { gamma: Tensor::from_vec(&[d], vec![T::one(); d]), beta: Tensor::zeros(&[d]) }
    }
}

impl<T: Real> Block<T> {
    fn zeros(d: usize, ff: usize) -> Self {
        Self {
            ln_attn: LayerNorm::identity(d),
            attn: Attention { q: Linear::zeros(d, d), k: Linear::zeros(d, d), v: Linear::zeros(d, d), o: Linear::zeros(d, d) },
            ln_ff: LayerNorm::identity(d),
            ff: FeedForward { up: Linear::zeros(d, ff), down: Linear::zeros(ff, d) },
        }
    }
}

impl<T: Real> TransformerWeights<T> {
    /// Correctly shaped weights with identity layer norms, unit affines and zero matrices.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let ff = config.ff_mult * d;
        let pathway = Pathway {
            self_blocks: (0..config.layers).map(|_| Block::zeros(d, ff)).collect(),
            cross_blocks: (0..config.cross_blocks).map(|_| Block::zeros(d, ff)).collect(),
            ln_final: LayerNorm::identity(d),
        };
        let n_pathways = if config.share_set_weights { 1 } else { 2 };
        Ok(Self {
            config: config.clone(),
            input_affine: Tensor::from_vec(&[2], vec![T::one(), T::zero()]),
            embed: Linear::zeros(1, d),
            pathways: vec![pathway; n_pathways],
            head: vec![Linear::zeros(4 * d, 2 * d), Linear::zeros(2 * d, 2 * d), Linear::zeros(2 * d, 3)],
            target_scale: Tensor::from_vec(&[3], vec![T::one(); 3]),
            target_shift: Tensor::zeros(&[3]),
        })
    }

    /// A structure of the same shape with every value zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    /// The pathway used for set `s` (0 = control, 1 = treatment).
    #[inline]
    pub fn pathway(&self, s: usize) -> &Pathway<T> {
        &self.pathways[s.min(self.pathways.len() - 1)]
    }

    #[inline]
    pub fn pathway_mut(&mut self, s: usize) -> &mut Pathway<T> {
        let i = s.min(self.pathways.len() - 1);
        &mut self.pathways[i]
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn named_tensors(&self) -> Named<'_, T> {
        let mut out = Vec::new();
        out.push(("input.affine".to_string(), &self.input_affine));
        self.embed.collect("embed", &mut out);
        for (p, pw) in self.pathways.iter().enumerate() {
            for (i, b) in pw.self_blocks.iter().enumerate() {
                b.collect(&format!("pathway{p}.self{i}"), &mut out);
            }
            for (i, b) in pw.cross_blocks.iter().enumerate() {
                b.collect(&format!("pathway{p}.cross{i}"), &mut out);
            }
            pw.ln_final.collect(&format!("pathway{p}.ln_final"), &mut out);
        }
        for (i, l) in self.head.iter().enumerate() {
            l.collect(&format!("head{i}"), &mut out);
        }
        out.push(("target.scale".to_string(), &self.target_scale));
        out.push(("target.shift".to_string(), &self.target_shift));
        out
    }

    /// Mutable counterpart of [`Self::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> NamedMut<'_, T> {
        let mut out = Vec::new();
        out.push(("input.affine".to_string(), &mut self.input_affine));
        self.embed.collect_mut("embed", &mut out);
        for (p, pw) in self.pathways.iter_mut().enumerate() {
            for (i, b) in pw.self_blocks.iter_mut().enumerate() {
                b.collect_mut(&format!("pathway{p}.self{i}"), &mut out);
            }
            for (i, b) in pw.cross_blocks.iter_mut().enumerate() {
                b.collect_mut(&format!("pathway{p}.cross{i}"), &mut out);
            }
            pw.ln_final.collect_mut(&format!("pathway{p}.ln_final"), &mut out);
        }
        for (i, l) in self.head.iter_mut().enumerate() {
            l.collect_mut(&format!("head{i}"), &mut out);
        }
        out.push(("target.scale".to_string(), &mut self.target_scale));
        out.push(("target.shift".to_string(), &mut self.target_shift));
        out
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.named_tensors_mut().into_iter().map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Real>(&self) -> TransformerWeights<U> {
        let mut out = TransformerWeights::<U>::zeros(&self.config).expect("config already validated");
        for (dst, src) in out.tensors_mut().zip(self.tensors()) {
            dst.data = src.data.iter().map(|v| U::of(v.to_f64().unwrap_or(f64::NAN))).collect();
        }
        out
    }
}

impl TransformerWeights<f64> {
    /// `self += scale·other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.tensors_mut().zip(other.tensors()) {
            for (a, b) in dst.data.iter_mut().zip(&src.data) {
                *a += scale * b;
            }
        }
    }

    pub fn round_to_f32(&mut self) {
        self.tensors_mut().for_each(Tensor::round_to_f32);
    }

    /// Sum of squares over all tensors.
    pub fn squared_norm(&self) -> f64 {
        self.tensors().map(|t| t.data.iter().map(|v| v * v).sum::<f64>()).sum()
    }
}

fn init_linear(l: &mut Linear<f64>, gain: f64, rng: &mut Stream) {
    let fan_in = l.weight.shape[0] as f64;
    let bound = gain / fan_in.sqrt();
    for v in &mut l.weight.data {
        *v = rng.random_range(-bound..bound);
    }
    for v in &mut l.bias.data {
        *v = rng.random_range(-bound..bound);
    }
}

fn init_block(b: &mut Block<f64>, rng: &mut Stream) {
    for l in [&mut b.attn.q, &mut b.attn.k, &mut b.attn.v, &mut b.attn.o, &mut b.ff.up, &mut b.ff.down] {
        init_linear(l, 1.0, rng);
    }
}

/// Scaled-uniform initialization: every matrix and bias entry is drawn from
/// `U(-g/√fan_in, g/√fan_in)`. Layer norms start at identity and the affines at
/// the constants above. Values are rounded to `f32`.
pub fn init_model(config: &ModelConfig, rng: &mut Stream) -> Result<TransformerWeights<f64>> {
    let mut w = TransformerWeights::<f64>::zeros(config)?;
    w.input_affine.data = vec![INPUT_SCALE, INPUT_SHIFT];
    init_linear(&mut w.embed, 1.0, rng);
    for pw in &mut w.pathways {
        for b in pw.self_blocks.iter_mut().chain(pw.cross_blocks.iter_mut()) {
            init_block(b, rng);
        }
    }
    let last = w.head.len() - 1;
    for (i, l) in w.head.iter_mut().enumerate() {
        init_linear(l, if i == last { HEAD_OUTPUT_GAIN } else { 1.0 }, rng);
    }
    w.target_scale.data = TARGET_SCALE.to_vec();
    w.target_shift.data = TARGET_SHIFT.to_vec();
    w.round_to_f32();
    if !w.all_finite() {
        return Err(Error::Config("initialization produced non-finite weights".into()));
    }
    Ok(w)
}
