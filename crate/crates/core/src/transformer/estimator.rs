use super::{forward_batch, Prediction, TransformerWeights};
use crate::error::{Error, Result};
use crate::estimators::{Estimate, Estimator, Method};
use crate::model::Problem;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Arithmetic precision of inference. Weights are `f32` values either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// `f32` arithmetic: the fast path used by default.
    #[default]
    Single,
    /// `f64` arithmetic, identical to [`super::forward`].
    Double,
}

/// Pretrained network behind the common estimator contract.
#[derive(Debug, Clone)]
pub struct TransformerEstimator {
    weights: Arc<TransformerWeights>,
    single: Arc<TransformerWeights<f32>>,
    precision: Precision,
}

impl TransformerEstimator {
    pub fn new(weights: TransformerWeights) -> Self {
        Self::with_precision(weights, Precision::default())
    }

    pub fn with_precision(weights: TransformerWeights, precision: Precision) -> Self {
        let single = Arc::new(weights.cast::<f32>());
        Self { weights: Arc::new(weights), single, precision }
    }

    pub fn weights(&self) -> &TransformerWeights {
        &self.weights
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn predict(&self, problems: &[Problem]) -> Result<Vec<Prediction>> {
        match self.precision {
            Precision::Single => forward_batch(&*self.single, problems),
            Precision::Double => forward_batch(&*self.weights, problems),
        }
    }
}

fn to_estimate(pred: &Prediction, runtime: Duration) -> Result<Estimate> {
    let theta = pred
        .to_theta()
        .map_err(|e| Error::Estimation(format!("network output is not a valid parameter: {e}")))?;
    Ok(Estimate { theta, converged: true, iterations: 0, runtime, method: Method::Transformer })
}

impl Estimator for TransformerEstimator {
    fn method(&self) -> Method {
        Method::Transformer
    }

    fn estimate(&self, p: &Problem) -> Result<Estimate> {
        let start = Instant::now();
        let pred = self.predict(std::slice::from_ref(p))?;
        let runtime = start.elapsed().max(Duration::from_nanos(1));
        to_estimate(&pred[0], runtime)
    }

    /// One batched pass. Problems the network cannot take (set sizes outside
    /// the trained range) are reported individually; the rest share the
    /// batch's wall time evenly.
    fn estimate_batch(&self, problems: &[Problem]) -> Vec<Result<Estimate>> {
        let mut out: Vec<Option<Result<Estimate>>> = problems
            .iter()
            .map(|p| super::network::check_problem(p).err().map(Err))
            .collect();
        let valid: Vec<Problem> = problems
            .iter()
            .zip(&out)
            .filter(|(_, o)| o.is_none())
            .map(|(p, _)| p.clone())
            .collect();
        if !valid.is_empty() {
            let start = Instant::now();
            let preds = self.predict(&valid);
            let per = (start.elapsed() / valid.len() as u32).max(Duration::from_nanos(1));
            match preds {
                Ok(preds) => {
                    let mut it = preds.iter();
                    for slot in out.iter_mut().filter(|o| o.is_none()) {
                        *slot = Some(to_estimate(it.next().expect("one prediction per problem"), per));
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    for slot in out.iter_mut().filter(|o| o.is_none()) {
                        *slot = Some(Err(Error::Estimation(msg.clone())));
                    }
                }
            }
        }
        out.into_iter().map(|o| o.expect("every slot filled")).collect()
    }
}
