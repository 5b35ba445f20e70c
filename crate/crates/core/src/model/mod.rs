//! The learnable classifier: residual transduction network, flow network,
//! pooled-residual head, the regularized objective and its training loop.

mod checkpoint;
mod network;
mod params;
mod threshold;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use network::{flow, forward, logit, prefix_scores, residuals, score, sigmoid, softplus, ForwardOutput, Mode};
pub use params::{Architecture, BlockOffsets, FlowOffsets, ModelParams};
pub use threshold::{balanced_accuracy, classify, classify_batch, classify_prefix, select_threshold, youden_counts, Threshold};
pub use train::{train, EpochLog, TrainOutcome};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::seed::derive_seed;
use crate::statespace::{Label, StateTrace};
use network::{trace_terms_and_grad, TraceTerms, TraceWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Flow-residual regularizer weight.
    pub alpha: f64,
    /// Prediction-loss weight (benign traces only).
    pub beta: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_window: usize,
    pub blocks: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            beta: 1.0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            dropout_p: 0.1,
            epochs: 30,
            batch_size: 16,
            max_window: 256,
            blocks: 3,
            width: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NestError::InvalidConfig(m.to_string()));
        let nonneg = |x: f64| x >= 0.0 && x.is_finite();
        if !nonneg(self.alpha) || !nonneg(self.beta) || !nonneg(self.weight_decay) {
            return bad("alpha, beta and weight_decay must be finite and >= 0");
        }
        if !nonneg(self.learning_rate) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must be in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must be in [0, 1)");
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if self.max_window < 2 {
            return bad("max_window must be >= 2");
        }
        if self.width < 1 {
            return bad("width must be >= 1");
        }
        Ok(())
    }
}

/// Loss terms, already weighted. `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub bce: f64,
    pub prediction: f64,
    pub regularizer: f64,
    pub weight_decay: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        [self.total, self.bce, self.prediction, self.regularizer, self.weight_decay]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn batch_counts(batch: &[StateTrace]) -> Result<(usize, usize)> {
    if batch.is_empty() {
        return Err(NestError::InvalidDataset("loss needs a non-empty batch".into()));
    }
    let benign = batch.iter().filter(|t| t.label == Label::Benign).count();
    Ok((batch.len(), benign))
}

fn weights_for(trace: &StateTrace, n: usize, benign: usize, cfg: &TrainConfig) -> TraceWeights {
    TraceWeights {
        bce: 1.0 / n as f64,
        prediction: if trace.label == Label::Benign { cfg.beta / benign as f64 } else { 0.0 },
        flow_variation: cfg.alpha / n as f64,
    }
}

fn combine(terms: &[TraceTerms], batch: &[StateTrace], params: &ModelParams, cfg: &TrainConfig) -> LossComponents {
    let n = batch.len() as f64;
    let bce = terms.iter().map(|t| t.bce).sum::<f64>() / n;
    let benign: Vec<f64> = terms
        .iter()
        .zip(batch)
        .filter(|(_, tr)| tr.label == Label::Benign)
        .map(|(t, _)| t.prediction)
        .collect();
    let prediction = if benign.is_empty() {
        0.0
    } else {
        cfg.beta * benign.iter().sum::<f64>() / benign.len() as f64
    };
    let regularizer = cfg.alpha * terms.iter().map(|t| t.flow_variation).sum::<f64>() / n;
    let weight_decay = cfg.weight_decay * params.squared_norm();
    LossComponents {
        total: bce + prediction + regularizer + weight_decay,
        bce,
        prediction,
        regularizer,
        weight_decay,
    }
}

/// Eval-mode objective over a batch.
pub fn loss(batch: &[StateTrace], params: &ModelParams, cfg: &TrainConfig) -> Result<LossComponents> {
    loss_and_grad(batch, params, cfg).map(|(l, _)| l)
}

/// Eval-mode objective and its exact gradient.
pub fn loss_and_grad(batch: &[StateTrace], params: &ModelParams, cfg: &TrainConfig) -> Result<(LossComponents, Vec<f64>)> {
    batch_loss_and_grad(batch, params, cfg, None)
}

/// Objective and gradient with optional seeded dropout. Per-trace gradients
/// are computed in parallel and summed in batch order.
pub(crate) fn batch_loss_and_grad(
    batch: &[StateTrace],
    params: &ModelParams,
    cfg: &TrainConfig,
    dropout_seed: Option<u64>,
) -> Result<(LossComponents, Vec<f64>)> {
    let (n, benign) = batch_counts(batch)?;
    let per_trace: Vec<(TraceTerms, Vec<f64>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, tr)| {
            let mut g = vec![0.0; params.len()];
            let dropout = dropout_seed.map(|s| (cfg.dropout_p, derive_seed(s, "trace", i as u64)));
            let terms = trace_terms_and_grad(tr, params, weights_for(tr, n, benign, cfg), dropout, &mut g)?;
            Ok((terms, g))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut terms = Vec::with_capacity(n);
    for (t, g) in per_trace {
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
        terms.push(t);
    }
    for (g, v) in grad.iter_mut().zip(&params.values) {
        *g += 2.0 * cfg.weight_decay * v;
    }
    Ok((combine(&terms, batch, params, cfg), grad))
}
