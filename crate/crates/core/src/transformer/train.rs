//! Simulation-based training.
//!
//! Every epoch draws fresh `(θ, problem)` pairs from the priors; a fixed
//! validation set is drawn once up front. Each problem and each batch's dropout
//! mask come from their own substream, so the data do not depend on how many
//! threads generate them. Gradient steps run on one thread.

use super::network::{backward_impl, batch_loss, forward_batch_impl, Dropout};
use super::weights::{init_model, Gradients, TransformerWeights};
use super::{LossWeights, ModelConfig, Prediction};
use crate::error::{Error, Result};
use crate::model::Problem;
use crate::rng::{substream, tag, Stream};
use crate::synth::{generate_problem, sample_theta, Priors};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Fields missing from a config file take their [`TrainConfig::desk`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_epoch_problems: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub loss_weights: LossWeights,
    pub validation_size: usize,
}

impl TrainConfig {
    /// The full schedule of the reference model (10⁷ problems).
    pub fn full() -> Self {
        Self {
            n_epoch_problems: 100_000,
            batch_size: 32,
            epochs: 100,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 3,
            loss_weights: LossWeights::default(),
            validation_size: 2_000,
        }
    }

    /// 200,000 problems; a larger step size compensates for the shorter run.
    pub fn desk() -> Self {
        Self { n_epoch_problems: 10_000, epochs: 20, learning_rate: 1e-3, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_epoch_problems", self.n_epoch_problems as f64),
            ("batch_size", self.batch_size as f64),
            ("epochs", self.epochs as f64),
            ("learning_rate", self.learning_rate),
            ("validation_size", self.validation_size as f64),
            ("plateau_patience", self.plateau_patience as f64 + 1.0),
            ("loss_weights.mu", self.loss_weights.mu),
            ("loss_weights.beta", self.loss_weights.beta),
            ("loss_weights.alpha", self.loss_weights.alpha),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (dropout on).
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Validation loss of the initial weights.
    pub initial_val_loss: f64,
    /// One row per completed epoch, starting at epoch 1.
    pub rows: Vec<LogRow>,
    /// Epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
}

impl TrainingLog {
    pub fn best_val_loss(&self) -> f64 {
        match self.best_epoch {
            0 => self.initial_val_loss,
            e => self.rows.iter().find(|r| r.epoch == e).map_or(f64::NAN, |r| r.val_loss),
        }
    }

    /// `epoch,train_loss,val_loss,lr` with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        s
    }
}

pub struct Trained {
    pub weights: TransformerWeights,
    pub log: TrainingLog,
}

/// Decoupled-weight-decay Adam.
struct AdamW {
    m: Gradients,
    v: Gradients,
    step: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Relative improvement the plateau schedule counts as progress.
const PLATEAU_THRESHOLD: f64 = 1e-4;
const VALIDATION_BATCH: usize = 256;

impl AdamW {
    fn new(w: &TransformerWeights) -> Self {
        Self { m: w.zeros_like(), v: w.zeros_like(), step: 0 }
    }

    fn update(&mut self, w: &mut TransformerWeights, g: &Gradients, lr: f64, decay: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let params = w.tensors_mut();
        let moments = self.m.tensors_mut().zip(self.v.tensors_mut());
        for ((p, (m, v)), g) in params.zip(moments).zip(g.tensors()) {
            let matrix = p.shape.len() == 2;
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                let step = (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + ADAM_EPS);
                let mut x = p.data[i];
                if matrix {
                    x -= lr * decay * x;
                }
                x -= lr * step;
                p.data[i] = x as f32 as f64;
            }
        }
    }
}

/// Halves (by `factor`) the rate after `patience` epochs without relative
/// improvement of the validation loss.
struct Plateau {
    best: f64,
    bad_epochs: usize,
    factor: f64,
    patience: usize,
}

impl Plateau {
    fn observe(&mut self, val: f64, lr: f64) -> f64 {
        if val < self.best * (1.0 - PLATEAU_THRESHOLD) {
            self.best = val;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return lr * self.factor;
        }
        lr
    }
}

fn sample_pair(priors: &Priors, rng: &mut Stream) -> Result<(Problem, Prediction)> {
    let (theta, design) = sample_theta(priors, rng);
    let p = generate_problem(&theta, &design, rng)?;
    Ok((p, Prediction::from_theta(&theta)))
}

fn sample_set(priors: &Priors, base: u64, stream_tag: &[u64], n: usize) -> Result<(Vec<Problem>, Vec<Prediction>)> {
    let pairs: Result<Vec<_>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut path = stream_tag.to_vec();
            path.push(i as u64);
            sample_pair(priors, &mut substream(base, &path))
        })
        .collect();
    Ok(pairs?.into_iter().unzip())
}

/// Mean loss over a fixed set, dropout off. Chunk losses are combined in order.
pub(crate) fn evaluate(w: &TransformerWeights, problems: &[Problem], targets: &[Prediction], lw: &LossWeights) -> Result<f64> {
    let chunks: Vec<(usize, &[Problem])> = problems.chunks(VALIDATION_BATCH).enumerate().collect();
    let sums: Result<Vec<f64>> = chunks
        .par_iter()
        .map(|(ci, ps)| {
            let refs: Vec<&Problem> = ps.iter().collect();
            let (out, _) = forward_batch_impl(w, &refs, None)?;
            let t = &targets[ci * VALIDATION_BATCH..ci * VALIDATION_BATCH + ps.len()];
            Ok(batch_loss(&out, t, lw).0 * ps.len() as f64)
        })
        .collect();
    Ok(sums?.iter().sum::<f64>() / problems.len() as f64)
}

fn divergence(epoch: usize, what: &str, log: &TrainingLog) -> Error {
    Error::Divergence { epoch, message: format!("{what} is not finite"), log: log.to_csv() }
}

/// Contents of a training config file: optional `[model]` and `[train]`
/// tables, each defaulting to the desk preset field by field.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Everything needed to replay a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub priors: Priors,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl TrainManifest {
    pub fn new(seed: u64, priors: Priors, run: RunConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            priors,
            model: run.model,
            train: run.train,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("training manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Trains with the manifest's seed.
    pub fn run(&self) -> Result<Trained> {
        train(&self.model, &self.train, &self.priors, &mut crate::rng::stream(self.seed))
    }
}

/// Trains a fresh model. All randomness derives from one draw of `rng`.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, priors: &Priors, rng: &mut Stream) -> Result<Trained> {
    model.validate()?;
    cfg.validate()?;
    priors.validate()?;
    let base: u64 = rng.random();
    let lw = cfg.loss_weights;

    let mut w = init_model(model, &mut substream(base, &[tag::INIT]))?;
    let (val_p, val_t) = sample_set(priors, base, &[tag::TRAIN_VALIDATION], cfg.validation_size)?;

    let mut lr = cfg.learning_rate;
    let val0 = evaluate(&w, &val_p, &val_t, &lw)?;
    let mut log = TrainingLog { initial_val_loss: val0, ..Default::default() };
    if !val0.is_finite() {
        return Err(divergence(0, "initial validation loss", &log));
    }
    let mut best = (w.clone(), val0);
    let mut plateau = Plateau { best: val0, bad_epochs: 0, factor: cfg.plateau_factor, patience: cfg.plateau_patience };
    let mut opt = AdamW::new(&w);

    for epoch in 1..=cfg.epochs {
        let (ps, ts) = sample_set(priors, base, &[tag::TRAIN_EPOCH, epoch as u64], cfg.n_epoch_problems)?;
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, (bp, bt)) in ps.chunks(cfg.batch_size).zip(ts.chunks(cfg.batch_size)).enumerate() {
            let refs: Vec<&Problem> = bp.iter().collect();
            let mut drop_rng = substream(base, &[tag::TRAIN_DROPOUT, epoch as u64, bi as u64]);
            let drop = Some(Dropout { rate: model.dropout, rng: &mut drop_rng });
            let (out, trace) = forward_batch_impl(&w, &refs, drop)?;
            let (value, dout) = batch_loss(&out, bt, &lw);
            if !value.is_finite() {
                return Err(divergence(epoch, &format!("training loss of batch {bi}"), &log));
            }
            let mut g = w.zeros_like();
            backward_impl(&w, &trace, &dout, &mut g);
            opt.update(&mut w, &g, lr, cfg.weight_decay);
            total += value;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val = evaluate(&w, &val_p, &val_t, &lw)?;
        if !val.is_finite() || !w.all_finite() {
            log.rows.push(LogRow { epoch, train_loss, val_loss: val, lr });
            return Err(divergence(epoch, "validation loss", &log));
        }
        log.rows.push(LogRow { epoch, train_loss, val_loss: val, lr });
        if val < best.1 {
            best = (w.clone(), val);
            log.best_epoch = epoch;
        }
        lr = plateau.observe(val, lr);
    }
    Ok(Trained { weights: best.0, log })
}
