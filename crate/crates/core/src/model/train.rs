use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{logit, sigmoid, softplus};
use super::params::{Architecture, ModelParams};
use super::threshold::{balanced_accuracy, select_threshold, Threshold};
use super::{batch_loss_and_grad, LossComponents, TrainConfig};
use crate::error::{NestError, Result};
use crate::seed::{derive_seed, rng_for};
use crate::statespace::{StateTrace, ACTION_ALPHABET_SIZE};

/// One row of the training log. Loss components are means over the epoch's
/// batches; validation figures use the epoch-end parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossComponents,
    pub val_bce: f64,
    pub val_balanced_accuracy: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub threshold: Threshold,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
}

fn crop(trace: &StateTrace, max_window: usize, rng: &mut impl Rng) -> StateTrace {
    let n = trace.len();
    if n <= max_window {
        return trace.clone();
    }
    let start = rng.random_range(0..=n - max_window);
    trace.window(start, start + max_window)
}

/// Validation logits, BCE and the Youden cutoff with its balanced accuracy.
fn validate(val: &[StateTrace], params: &ModelParams, provenance: &str) -> Result<(f64, Threshold, f64)> {
    let logits: Vec<f64> = val.par_iter().map(|t| logit(t, params)).collect::<Result<_>>()?;
    let labels: Vec<bool> = val.iter().map(|t| t.label.is_positive()).collect();
    let bce = logits
        .iter()
        .zip(&labels)
        .map(|(z, y)| softplus(*z) - if *y { *z } else { 0.0 })
        .sum::<f64>()
        / val.len() as f64;
    let scores: Vec<f64> = logits.iter().map(|z| sigmoid(*z)).collect();
    let threshold = select_threshold(&scores, &labels, provenance)?;
    let ba = balanced_accuracy(&scores, &labels, threshold.tau);
    Ok((bce, threshold, ba))
}

/// Seeded training. Each epoch shuffles the training traces, crops each to
/// `max_window` windows and takes one optimizer step per batch. The returned
/// parameters are those of the epoch with the highest validation balanced
/// accuracy (ties: lower validation BCE, then the earlier epoch).
pub fn train(train: &[StateTrace], val: &[StateTrace], cfg: &TrainConfig, provenance: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = train
        .first()
        .map(|t| t.dim)
        .ok_or_else(|| NestError::InvalidDataset("training split is empty".into()))?;
    if val.is_empty() {
        return Err(NestError::InvalidDataset("validation split is empty".into()));
    }
    if let Some(t) = train.iter().chain(val).find(|t| t.dim != d) {
        return Err(NestError::Shape(format!("trace {} has dimension {}, expected {d}", t.id, t.dim)));
    }
    let arch = Architecture::new(d, ACTION_ALPHABET_SIZE, cfg.blocks, cfg.width)?;
    let mut params = ModelParams::init(arch, derive_seed(cfg.seed, "init", 0));
    let mut adam = Adam::new(params.len());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, f64, usize, ModelParams, Threshold)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_for(cfg.seed, "epoch", epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = LossComponents::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<StateTrace> = chunk.iter().map(|&i| crop(&train[i], cfg.max_window, &mut rng)).collect();
            let dropout = (cfg.dropout_p > 0.0).then(|| derive_seed(cfg.seed, "dropout", step));
            let (l, g) = batch_loss_and_grad(&batch, &params, cfg, dropout)?;
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(NestError::TrainingDivergence { epoch });
            }
            adam.step(&mut params.values, &g, cfg);
            if !params.is_finite() {
                return Err(NestError::TrainingDivergence { epoch });
            }
            sum.total += l.total;
            sum.bce += l.bce;
            sum.prediction += l.prediction;
            sum.regularizer += l.regularizer;
            sum.weight_decay += l.weight_decay;
            batches += 1;
            step += 1;
        }
        let k = batches as f64;
        let mean = LossComponents {
            total: sum.total / k,
            bce: sum.bce / k,
            prediction: sum.prediction / k,
            regularizer: sum.regularizer / k,
            weight_decay: sum.weight_decay / k,
        };
        let (val_bce, threshold, ba) = validate(val, &params, provenance)?;
        if !val_bce.is_finite() {
            return Err(NestError::TrainingDivergence { epoch });
        }
        log.push(EpochLog {
            epoch,
            loss: mean,
            val_bce,
            val_balanced_accuracy: ba,
            tau: threshold.tau,
        });
        let better = match &best {
            None => true,
            Some((bba, bbce, _, _, _)) => ba > *bba || (ba == *bba && val_bce < *bbce),
        };
        if better {
            best = Some((ba, val_bce, epoch, params.clone(), threshold));
        }
    }
    let (_, _, best_epoch, params, threshold) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        params,
        threshold,
        best_epoch,
        log,
    })
}
