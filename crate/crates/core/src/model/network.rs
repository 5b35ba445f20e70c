//! Forward and backward passes of the transduction network.
//!
//! For each transition `t` the residual stream starts as `s_t ++ onehot(a_t)`
//! and every block adds `W2 * dropout(tanh(W1 h + b1)) + b2`. The predicted
//! next state is the state part of the final stream. Residual magnitudes are
//! pooled per channel (mean and max over time) and the head maps the `2d`
//! pooled values to a logit.
//!
//! The flow network `H(s) = F2 tanh(F1 s + c1) + c2` only enters training
//! through the flow-residual regularizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Architecture, ModelParams};
use crate::error::{NestError, Result};
use crate::seed::rng_for;
use crate::statespace::StateTrace;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Inverted dropout with probability `p`, masks drawn from `seed`.
    Train { dropout_p: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Predicted next states, `(n-1) x d` row-major.
    pub predictions: Vec<f64>,
    /// `s_{t+1} - prediction_t`, `(n-1) x d` row-major.
    pub residuals: Vec<f64>,
    /// Per-channel mean of `|r|` followed by per-channel max of `|r|`.
    pub pooled: Vec<f64>,
    pub logit: f64,
    pub score: f64,
}

/// Logistic function, kept strictly inside (0, 1) even where it would round
/// to an endpoint.
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn check_shapes(trace: &StateTrace, params: &ModelParams) -> Result<()> {
    let arch = &params.arch;
    if params.values.len() != arch.param_count() {
        return Err(NestError::Shape(format!(
            "parameter vector has {} values, architecture needs {}",
            params.values.len(),
            arch.param_count()
        )));
    }
    if trace.dim != arch.d {
        return Err(NestError::Shape(format!(
            "trace {} has dimension {}, model expects {}",
            trace.id, trace.dim, arch.d
        )));
    }
    if trace.len() < 2 || trace.actions.len() + 1 != trace.len() {
        return Err(NestError::Shape(format!("trace {} is not a valid transition sequence", trace.id)));
    }
    if let Some(a) = trace.actions.iter().find(|a| a.index() >= arch.actions) {
        return Err(NestError::Shape(format!(
            "action code {} outside the model's alphabet of {}",
            a.0, arch.actions
        )));
    }
    Ok(())
}

/// Scratch space and optional tape for one transition.
struct Workspace {
    h: Vec<f64>,
    z: Vec<f64>,
}

impl Workspace {
    fn new(arch: &Architecture) -> Self {
        Workspace {
            h: vec![0.0; arch.stream()],
            z: vec![0.0; arch.width],
        }
    }
}

/// Per-transition record needed for backpropagation: the stream entering each
/// block, its tanh activations and the dropout scale of each unit.
#[derive(Default)]
struct Tape {
    h_in: Vec<f64>,
    u: Vec<f64>,
    mask: Vec<f64>,
}

fn matvec_acc(out: &mut [f64], mat: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(mat.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// One transition through the residual stack. Writes the prediction into
/// `pred` and, when given, appends to the tape.
fn transition(
    params: &ModelParams,
    state: &[f64],
    action: usize,
    ws: &mut Workspace,
    pred: &mut [f64],
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    mut tape: Option<&mut Tape>,
) {
    let arch = &params.arch;
    let (d, w) = (arch.d, arch.width);
    let v = &params.values;
    ws.h.iter_mut().for_each(|x| *x = 0.0);
    ws.h[..d].copy_from_slice(state);
    ws.h[d + action] = 1.0;
    for r in 0..arch.blocks {
        let o = arch.block_offsets(r);
        if let Some(t) = tape.as_deref_mut() {
            t.h_in.extend_from_slice(&ws.h);
        }
        ws.z.copy_from_slice(&v[o.b1..o.b1 + w]);
        matvec_acc(&mut ws.z, &v[o.w1..o.b1], &ws.h);
        for k in 0..w {
            let u = ws.z[k].tanh();
            let scale = match dropout.as_mut() {
                Some((p, rng)) if *p > 0.0 => {
                    if rng.random::<f64>() < *p {
                        0.0
                    } else {
                        1.0 / (1.0 - *p)
                    }
                }
                _ => 1.0,
            };
            if let Some(t) = tape.as_deref_mut() {
                t.u.push(u);
                t.mask.push(scale);
            }
            ws.z[k] = u * scale;
        }
        let m = arch.stream();
        for (i, row) in v[o.w2..o.b2].chunks_exact(w).enumerate() {
            ws.h[i] += v[o.b2 + i] + row.iter().zip(&ws.z).map(|(a, b)| a * b).sum::<f64>();
        }
        debug_assert_eq!(v[o.w2..o.b2].len(), m * w);
    }
    pred.copy_from_slice(&ws.h[..d]);
}

fn pool(residuals: &[f64], d: usize) -> (Vec<f64>, Vec<usize>) {
    let steps = residuals.len() / d;
    let mut pooled = vec![0.0; 2 * d];
    let mut argmax = vec![0usize; d];
    for (t, r) in residuals.chunks_exact(d).enumerate() {
        for j in 0..d {
            let a = r[j].abs();
            pooled[j] += a;
            if t == 0 || a > pooled[d + j] {
                pooled[d + j] = a;
                argmax[j] = t;
            }
        }
    }
    for p in pooled.iter_mut().take(d) {
        *p /= steps as f64;
    }
    (pooled, argmax)
}

pub(crate) fn head_logit(params: &ModelParams, pooled: &[f64]) -> f64 {
    let (hw, hb) = params.arch.head_offsets();
    let v = &params.values;
    v[hb] + v[hw..hb].iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>()
}

/// Residuals `s_{t+1} - f(s_t, a_t)` for every transition, in eval mode.
pub fn residuals(trace: &StateTrace, params: &ModelParams) -> Result<Vec<f64>> {
    check_shapes(trace, params)?;
    let d = params.arch.d;
    let n = trace.len();
    let mut ws = Workspace::new(&params.arch);
    let mut out = vec![0.0; (n - 1) * d];
    let mut pred = vec![0.0; d];
    for t in 0..n - 1 {
        transition(params, trace.state(t), trace.actions[t].index(), &mut ws, &mut pred, None, None);
        let next = trace.state(t + 1);
        for j in 0..d {
            out[t * d + j] = next[j] - pred[j];
        }
    }
    Ok(out)
}

pub fn forward(trace: &StateTrace, params: &ModelParams, mode: Mode) -> Result<ForwardOutput> {
    check_shapes(trace, params)?;
    let d = params.arch.d;
    let n = trace.len();
    let mut ws = Workspace::new(&params.arch);
    let mut rng = match mode {
        Mode::Train { seed, .. } => Some(rng_for(seed, "dropout", 0)),
        Mode::Eval => None,
    };
    let p = match mode {
        Mode::Train { dropout_p, .. } => dropout_p,
        Mode::Eval => 0.0,
    };
    let mut predictions = vec![0.0; (n - 1) * d];
    let mut residuals = vec![0.0; (n - 1) * d];
    for t in 0..n - 1 {
        let pred = &mut predictions[t * d..(t + 1) * d];
        let dropout = rng.as_mut().map(|r| (p, r));
        transition(params, trace.state(t), trace.actions[t].index(), &mut ws, pred, dropout, None);
        let next = trace.state(t + 1);
        for j in 0..d {
            residuals[t * d + j] = next[j] - pred[j];
        }
    }
    let (pooled, _) = pool(&residuals, d);
    let logit = head_logit(params, &pooled);
    Ok(ForwardOutput {
        predictions,
        residuals,
        pooled,
        logit,
        score: sigmoid(logit),
    })
}

/// Eval-mode logit of a full trace.
pub fn logit(trace: &StateTrace, params: &ModelParams) -> Result<f64> {
    let r = residuals(trace, params)?;
    let (pooled, _) = pool(&r, params.arch.d);
    Ok(head_logit(params, &pooled))
}

/// Eval-mode score of a full trace.
pub fn score(trace: &StateTrace, params: &ModelParams) -> Result<f64> {
    logit(trace, params).map(sigmoid)
}

/// Scores of the prefixes ending at windows `stride, 2*stride, ...` (each
/// prefix holds states `0..=end`). Equal to [`score`] on the truncated trace.
pub fn prefix_scores(trace: &StateTrace, params: &ModelParams, stride: usize) -> Result<Vec<(usize, f64)>> {
    if stride == 0 {
        return Err(NestError::InvalidConfig("stride must be positive".into()));
    }
    let r = residuals(trace, params)?;
    let d = params.arch.d;
    let steps = r.len() / d;
    let mut sums = vec![0.0; d];
    let mut maxes = vec![0.0; d];
    let mut pooled = vec![0.0; 2 * d];
    let mut out = Vec::new();
    for (t, row) in r.chunks_exact(d).enumerate() {
        for j in 0..d {
            let a = row[j].abs();
            sums[j] += a;
            if t == 0 || a > maxes[j] {
                maxes[j] = a;
            }
        }
        let end = t + 1;
        if end % stride == 0 && end <= steps {
            for j in 0..d {
                pooled[j] = sums[j] / end as f64;
                pooled[d + j] = maxes[j];
            }
            out.push((end, sigmoid(head_logit(params, &pooled))));
        }
    }
    Ok(out)
}

/// Flow network output for one state.
pub fn flow(params: &ModelParams, state: &[f64]) -> Vec<f64> {
    let arch = &params.arch;
    let (d, w) = (arch.d, arch.width);
    let f = arch.flow_offsets();
    let v = &params.values;
    let mut q = v[f.c1..f.c1 + w].to_vec();
    matvec_acc(&mut q, &v[f.f1..f.c1], state);
    q.iter_mut().for_each(|x| *x = x.tanh());
    let mut out = v[f.c2..f.c2 + d].to_vec();
    matvec_acc(&mut out, &v[f.f2..f.c2], &q);
    out
}

/// Unweighted per-trace loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TraceTerms {
    /// `softplus(z) - y z`.
    pub bce: f64,
    /// `mean_t |r_t|^2`.
    pub prediction: f64,
    /// `mean_t |H(s_{t+1}) - H(s_t)|^2`.
    pub flow_variation: f64,
    pub score: f64,
}

/// Weights applied to one trace's terms inside a batch objective.
#[derive(Debug, Clone, Copy)]
pub struct TraceWeights {
    pub bce: f64,
    pub prediction: f64,
    pub flow_variation: f64,
}

/// Computes the trace terms and accumulates the gradient of
/// `w.bce * bce + w.prediction * prediction + w.flow_variation * flow_variation`
/// into `grad`.
pub fn trace_terms_and_grad(
    trace: &StateTrace,
    params: &ModelParams,
    weights: TraceWeights,
    dropout: Option<(f64, u64)>,
    grad: &mut [f64],
) -> Result<TraceTerms> {
    check_shapes(trace, params)?;
    let arch = params.arch;
    let (d, m, w) = (arch.d, arch.stream(), arch.width);
    let n = trace.len();
    let steps = n - 1;
    let v = &params.values;

    // forward with tape
    let mut ws = Workspace::new(&arch);
    let mut tape = Tape::default();
    tape.h_in.reserve(steps * arch.blocks * m);
    tape.u.reserve(steps * arch.blocks * w);
    tape.mask.reserve(steps * arch.blocks * w);
    let mut rng = dropout.map(|(_, seed)| rng_for(seed, "dropout", 0));
    let p = dropout.map_or(0.0, |(p, _)| p);
    let mut residuals = vec![0.0; steps * d];
    let mut pred = vec![0.0; d];
    for t in 0..steps {
        let dr = rng.as_mut().map(|r| (p, r));
        transition(params, trace.state(t), trace.actions[t].index(), &mut ws, &mut pred, dr, Some(&mut tape));
        let next = trace.state(t + 1);
        for j in 0..d {
            residuals[t * d + j] = next[j] - pred[j];
        }
    }
    let (pooled, argmax) = pool(&residuals, d);
    let logit = head_logit(params, &pooled);
    let y = trace.label.as_target();
    let score = sigmoid(logit);
    let bce = softplus(logit) - y * logit;
    let prediction = residuals.iter().map(|r| r * r).sum::<f64>() / steps as f64;

    // head
    let (hw, hb) = arch.head_offsets();
    let dlogit = weights.bce * (score - y);
    grad[hb] += dlogit;
    for k in 0..2 * d {
        grad[hw + k] += dlogit * pooled[k];
    }

    // d loss / d residual
    let mut dres = vec![0.0; steps * d];
    if weights.bce != 0.0 {
        for j in 0..d {
            let dmean = dlogit * v[hw + j] / steps as f64;
            let dmax = dlogit * v[hw + d + j];
            for t in 0..steps {
                let r = residuals[t * d + j];
                let sign = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let mut g = dmean;
                if t == argmax[j] {
                    g += dmax;
                }
                dres[t * d + j] += g * sign;
            }
        }
    }
    if weights.prediction != 0.0 {
        let c = weights.prediction * 2.0 / steps as f64;
        for (g, r) in dres.iter_mut().zip(&residuals) {
            *g += c * r;
        }
    }

    // backprop through the residual stack; d pred = -d residual
    let mut dh = vec![0.0; m];
    let mut du = vec![0.0; w];
    let per_t_h = arch.blocks * m;
    let per_t_u = arch.blocks * w;
    for t in 0..steps {
        if dres[t * d..(t + 1) * d].iter().all(|g| *g == 0.0) {
            continue;
        }
        dh.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..d {
            dh[j] = -dres[t * d + j];
        }
        for r in (0..arch.blocks).rev() {
            let o = arch.block_offsets(r);
            let h_in = &tape.h_in[t * per_t_h + r * m..t * per_t_h + (r + 1) * m];
            let u = &tape.u[t * per_t_u + r * w..t * per_t_u + (r + 1) * w];
            let mask = &tape.mask[t * per_t_u + r * w..t * per_t_u + (r + 1) * w];
            // h_out = h_in + W2 (u * mask) + b2
            du.iter_mut().for_each(|x| *x = 0.0);
            for i in 0..m {
                let g = dh[i];
                if g == 0.0 {
                    continue;
                }
                grad[o.b2 + i] += g;
                let row = o.w2 + i * w;
                for k in 0..w {
                    grad[row + k] += g * u[k] * mask[k];
                    du[k] += v[row + k] * g;
                }
            }
            for k in 0..w {
                let dz = du[k] * mask[k] * (1.0 - u[k] * u[k]);
                if dz == 0.0 {
                    continue;
                }
                grad[o.b1 + k] += dz;
                let row = o.w1 + k * m;
                for i in 0..m {
                    grad[row + i] += dz * h_in[i];
                    dh[i] += v[row + i] * dz;
                }
            }
        }
    }

    // flow-variation regularizer
    let mut flow_variation = 0.0;
    {
        let f = arch.flow_offsets();
        let mut qs = Vec::with_capacity(n * w);
        let mut hs = Vec::with_capacity(n * d);
        for t in 0..n {
            let s = trace.state(t);
            let mut q = v[f.c1..f.c1 + w].to_vec();
            matvec_acc(&mut q, &v[f.f1..f.c1], s);
            q.iter_mut().for_each(|x| *x = x.tanh());
            let mut hv = v[f.c2..f.c2 + d].to_vec();
            matvec_acc(&mut hv, &v[f.f2..f.c2], &q);
            qs.extend_from_slice(&q);
            hs.extend_from_slice(&hv);
        }
        let mut dhs = vec![0.0; n * d];
        let c = weights.flow_variation * 2.0 / steps as f64;
        for t in 0..steps {
            for j in 0..d {
                let diff = hs[(t + 1) * d + j] - hs[t * d + j];
                flow_variation += diff * diff;
                dhs[(t + 1) * d + j] += c * diff;
                dhs[t * d + j] -= c * diff;
            }
        }
        flow_variation /= steps as f64;
        if weights.flow_variation != 0.0 {
            let mut dq = vec![0.0; w];
            for t in 0..n {
                let s = trace.state(t);
                let q = &qs[t * w..(t + 1) * w];
                let g_h = &dhs[t * d..(t + 1) * d];
                dq.iter_mut().for_each(|x| *x = 0.0);
                for j in 0..d {
                    let g = g_h[j];
                    grad[f.c2 + j] += g;
                    let row = f.f2 + j * w;
                    for k in 0..w {
                        grad[row + k] += g * q[k];
                        dq[k] += v[row + k] * g;
                    }
                }
                for k in 0..w {
                    let dz = dq[k] * (1.0 - q[k] * q[k]);
                    grad[f.c1 + k] += dz;
                    let row = f.f1 + k * d;
                    for j in 0..d {
                        grad[row + j] += dz * s[j];
                    }
                }
            }
        }
    }

    Ok(TraceTerms {
        bce,
        prediction,
        flow_variation,
        score,
    })
}
