//! Metrics, the heuristic baseline detector and the experiment suite.
//!
//! The baseline flags a trace when either
//!
//! * the byte-entropy channel averaged over some run of `w` consecutive
//!   windows exceeds `theta`, or
//! * the trace's post-peak channel-mean vector (mean of every channel over
//!   the `signature_span` windows starting at the entropy peak, minus the
//!   benign training mean) has cosine similarity of at least `cosine` with a
//!   stored per-family signature.
//!
//! `(w, theta)` are fit by grid search for training balanced accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::fsutil;
use crate::generator::{FamilyTemplate, SpeedSet};
use crate::model::{classify, classify_prefix, ModelParams};
use crate::preprocess::Preprocessor;
use crate::statespace::{Channel, Label, StateTrace, BENIGN_FAMILY};

pub const NEST: &str = "nest";
pub const BASELINE: &str = "baseline";
pub const EVASIVE: &str = "evasive";
pub const NON_EVASIVE: &str = "non_evasive";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Counts with ransomware as the positive class.
pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<Confusion> {
    if predictions.len() != labels.len() {
        return Err(NestError::Shape(format!(
            "{} predictions, {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(NestError::InvalidDataset("confusion needs at least one prediction".into()));
    }
    let mut c = Confusion::default();
    for (p, y) in predictions.iter().zip(labels) {
        match (p.is_positive(), y.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(c: &Confusion) -> Result<Metrics> {
    let n = c.total();
    if n == 0 {
        return Err(NestError::InvalidDataset("metrics of an empty confusion".into()));
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, n),
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub fpr: f64,
    pub fnr: f64,
}

pub fn rates(c: &Confusion) -> Result<Rates> {
    if c.tn + c.fp == 0 || c.tp + c.fn_ == 0 {
        return Err(NestError::InvalidDataset("rates need both classes present".into()));
    }
    Ok(Rates {
        fpr: ratio(c.fp, c.fp + c.tn),
        fnr: ratio(c.fn_, c.fn_ + c.tp),
    })
}

// ---------------------------------------------------------------------------
// Baseline.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub windows: Vec<usize>,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub theta_step: f64,
    pub cosine: f64,
    /// Windows averaged from the entropy peak onward.
    pub signature_span: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            windows: vec![4, 8, 16, 32, 64],
            theta_lo: -1.0,
            theta_hi: 1.0,
            theta_step: 0.02,
            cosine: 0.95,
            signature_span: 32,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(NestError::InvalidConfig("baseline windows must be non-empty and positive".into()));
        }
        if !(self.theta_step > 0.0) || !(self.theta_lo <= self.theta_hi) {
            return Err(NestError::InvalidConfig("baseline theta grid needs lo <= hi and step > 0".into()));
        }
        if self.signature_span == 0 {
            return Err(NestError::InvalidConfig("baseline signature_span must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.cosine) {
            return Err(NestError::InvalidConfig("baseline cosine must be in [-1, 1]".into()));
        }
        Ok(())
    }

    /// `theta_lo + k * theta_step` for every `k` that stays within `theta_hi`.
    pub fn theta_grid(&self) -> Vec<f64> {
        let steps = ((self.theta_hi - self.theta_lo) / self.theta_step + 1e-9).floor() as usize;
        (0..=steps).map(|k| self.theta_lo + k as f64 * self.theta_step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub window: usize,
    pub theta: f64,
    pub cosine: f64,
    pub signature_span: usize,
    pub benign_mean: Vec<f64>,
    pub signatures: BTreeMap<String, Vec<f64>>,
}

impl BaselineParams {
    fn check(&self, dim: usize) -> Result<()> {
        if self.window == 0 || self.signature_span == 0 || !self.theta.is_finite() || self.benign_mean.len() != dim {
            return Err(NestError::InvalidConfig("baseline is not fitted for this data".into()));
        }
        Ok(())
    }
}

/// Largest mean over any `w` consecutive values (the whole series if shorter).
pub fn max_run_mean(values: &[f64], w: usize) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NEG_INFINITY;
    }
    let w = w.clamp(1, n);
    let mut sum: f64 = values[..w].iter().sum();
    let mut best = sum;
    for t in w..n {
        sum += values[t] - values[t - w];
        best = best.max(sum);
    }
    best / w as f64
}

/// Mean of every channel over `span` windows starting at the entropy peak
/// (first argmax), truncated at the end of the trace.
pub fn post_peak_means(trace: &StateTrace, span: usize) -> Vec<f64> {
    let ent = Channel::ByteEntropy.index();
    let mut peak = 0;
    for (t, s) in trace.iter_states().enumerate() {
        if s[ent] > trace.state(peak)[ent] {
            peak = t;
        }
    }
    let n = span.max(1).min(trace.len() - peak);
    let mut out = vec![0.0; trace.dim];
    for s in trace.iter_states().skip(peak).take(n) {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

fn channel_means(trace: &StateTrace) -> Vec<f64> {
    let mut out = vec![0.0; trace.dim];
    for s in trace.iter_states() {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    let n = trace.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn entropy_series(trace: &StateTrace) -> Vec<f64> {
    trace.channel(Channel::ByteEntropy.index()).collect()
}

fn signature_match(trace: &StateTrace, params: &BaselineParams) -> bool {
    let v: Vec<f64> = post_peak_means(trace, params.signature_span)
        .iter()
        .zip(&params.benign_mean)
        .map(|(a, b)| a - b)
        .collect();
    params.signatures.values().any(|s| cosine(&v, s) >= params.cosine)
}

/// Label and score (maximum entropy run mean) of the baseline rule.
pub fn baseline_detect(trace: &StateTrace, params: &BaselineParams) -> Result<(Label, f64)> {
    params.check(trace.dim)?;
    let score = max_run_mean(&entropy_series(trace), params.window);
    let positive = score > params.theta || signature_match(trace, params);
    Ok((if positive { Label::Ransomware } else { Label::Benign }, score))
}

/// Balanced accuracy of boolean predictions.
fn balanced(pred: impl Iterator<Item = bool>, labels: &[bool]) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0, 0, 0, 0);
    for (y_hat, y) in pred.zip(labels) {
        if *y {
            p += 1;
            tp += y_hat as usize;
        } else {
            n += 1;
            tn += (!y_hat) as usize;
        }
    }
    (ratio(tp, p) + ratio(tn, n)) / 2.0
}

/// Result of the `(w, theta)` grid search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridChoice {
    pub window: usize,
    pub theta: f64,
    pub balanced_accuracy: f64,
}

/// Exhaustive search over `windows x theta_grid`. The best balanced accuracy
/// wins; ties go to the smallest window, and within it to the lower middle
/// of the tied thetas.
pub fn grid_search(run_means: &[Vec<f64>], sig: &[bool], labels: &[bool], cfg: &BaselineConfig) -> GridChoice {
    let thetas = cfg.theta_grid();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for (wi, &w) in cfg.windows.iter().enumerate() {
        let mut tied = Vec::new();
        let mut top = f64::NEG_INFINITY;
        for &theta in &thetas {
            let ba = balanced(
                run_means[wi].iter().zip(sig).map(|(m, s)| *m > theta || *s),
                labels,
            );
            if ba > top {
                top = ba;
                tied.clear();
            }
            if ba == top {
                tied.push(theta);
            }
        }
        if best.as_ref().map_or(true, |(b, _, _)| top > *b) {
            best = Some((top, w, tied));
        }
    }
    let (ba, window, tied) = best.expect("non-empty grid");
    GridChoice {
        window,
        theta: tied[(tied.len() - 1) / 2],
        balanced_accuracy: ba,
    }
}

/// Fits signatures and the entropy rule on (normalized) training traces.
pub fn fit_baseline(train: &[StateTrace], cfg: &BaselineConfig) -> Result<BaselineParams> {
    cfg.validate()?;
    let benign: Vec<&StateTrace> = train.iter().filter(|t| t.label == Label::Benign).collect();
    if benign.is_empty() || benign.len() == train.len() {
        return Err(NestError::InvalidDataset("baseline needs both classes in training".into()));
    }
    let d = train[0].dim;
    let mut benign_mean = vec![0.0; d];
    for t in &benign {
        for (a, v) in benign_mean.iter_mut().zip(channel_means(t)) {
            *a += v;
        }
    }
    benign_mean.iter_mut().for_each(|v| *v /= benign.len() as f64);

    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for t in train.iter().filter(|t| t.label == Label::Ransomware) {
        let v = post_peak_means(t, cfg.signature_span);
        let e = sums.entry(t.family.clone()).or_insert_with(|| (vec![0.0; d], 0));
        for ((a, x), b) in e.0.iter_mut().zip(&v).zip(&benign_mean) {
            *a += x - b;
        }
        e.1 += 1;
    }
    let signatures: BTreeMap<String, Vec<f64>> = sums
        .into_iter()
        .map(|(f, (s, k))| (f, s.into_iter().map(|v| v / k as f64).collect()))
        .collect();

    let mut params = BaselineParams {
        window: cfg.windows[0],
        theta: cfg.theta_lo,
        cosine: cfg.cosine,
        signature_span: cfg.signature_span,
        benign_mean,
        signatures,
    };
    let labels: Vec<bool> = train.iter().map(|t| t.label.is_positive()).collect();
    let sig: Vec<bool> = train.par_iter().map(|t| signature_match(t, &params)).collect();
    let series: Vec<Vec<f64>> = train.iter().map(entropy_series).collect();
    let run_means: Vec<Vec<f64>> = cfg
        .windows
        .iter()
        .map(|&w| series.par_iter().map(|s| max_run_mean(s, w)).collect())
        .collect();
    let choice = grid_search(&run_means, &sig, &labels, cfg);
    params.window = choice.window;
    params.theta = choice.theta;
    Ok(params)
}

// ---------------------------------------------------------------------------
// Experiments.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub sweep_speeds: Vec<f64>,
    /// Ransomware traces per speed (the same number of benign traces is added).
    pub per_speed: usize,
    pub sweep_length: usize,
    pub unseen_families: Vec<String>,
    pub unseen_count: usize,
    pub unseen_length: usize,
    pub stride: usize,
    pub persistence: usize,
    pub baseline: BaselineConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            sweep_speeds: vec![1.0, 5.0, 10.0, 25.0, 50.0],
            per_speed: 20,
            sweep_length: 1024,
            unseen_families: crate::generator::UNSEEN_FAMILIES.iter().map(|s| s.to_string()).collect(),
            unseen_count: 20,
            unseen_length: 2048,
            stride: 8,
            persistence: 3,
            baseline: BaselineConfig::default(),
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.persistence == 0 {
            return Err(NestError::InvalidConfig("stride and persistence must be >= 1".into()));
        }
        if self.per_speed == 0 || self.unseen_count == 0 {
            return Err(NestError::InvalidConfig("per_speed and unseen_count must be >= 1".into()));
        }
        if self.sweep_speeds.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(NestError::InvalidConfig("sweep speeds must be positive".into()));
        }
        self.baseline.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub confusion: Confusion,
    pub metrics: Metrics,
    pub rates: Rates,
    /// Detection rate per ransomware family, plus the evasive and
    /// non-evasive aggregates.
    pub families: BTreeMap<String, f64>,
    pub unseen: BTreeMap<String, f64>,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub speed_mbps: f64,
    pub accuracy: f64,
    pub traces: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub family: String,
    /// Median over detected traces; `None` when nothing was detected.
    pub median_s: Option<f64>,
    pub detected: usize,
    pub missed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    pub test_traces: usize,
    pub nest: ModelReport,
    pub baseline: ModelReport,
    pub baseline_params: BaselineParams,
    pub latency: Vec<LatencyRow>,
}

impl EvalReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        match name {
            NEST => Some(&self.nest),
            BASELINE => Some(&self.baseline),
            _ => None,
        }
    }
}

/// Everything the experiment suite consumes.
pub struct ExperimentInputs<'a> {
    pub params: &'a ModelParams,
    pub tau: f64,
    pub preprocessor: &'a Preprocessor,
    pub baseline: &'a BaselineParams,
    /// Ids of every trace used for fitting (training, validation, stats).
    pub fitted_ids: &'a BTreeSet<String>,
    /// Preprocessed test split.
    pub test: &'a [StateTrace],
    /// Raw unseen-family traces.
    pub unseen: &'a [StateTrace],
    /// Raw speed-controlled sets.
    pub sweep: &'a [SpeedSet],
    pub settings: &'a EvalSettings,
}

pub fn is_evasive(family: &str) -> bool {
    FamilyTemplate::builtin(family).is_some_and(|t| t.evasion.is_evasive())
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Per-family latency medians of the prefix detector on ransomware traces.
pub fn latency_table(traces: &[StateTrace], params: &ModelParams, tau: f64, stride: usize, persistence: usize) -> Result<Vec<LatencyRow>> {
    let hits: Vec<Option<f64>> = traces
        .par_iter()
        .filter(|t| t.label == Label::Ransomware)
        .map(|t| Ok(classify_prefix(t, params, tau, stride, persistence)?.map(|i| i as f64 * t.window_dt)))
        .collect::<Result<_>>()?;
    let mut by_family: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (t, h) in traces.iter().filter(|t| t.label == Label::Ransomware).zip(hits) {
        let e = by_family.entry(t.family.as_str()).or_default();
        match h {
            Some(s) => e.0.push(s),
            None => e.1 += 1,
        }
    }
    Ok(by_family
        .into_iter()
        .map(|(family, (mut detected, missed))| LatencyRow {
            family: family.to_string(),
            detected: detected.len(),
            median_s: median(&mut detected),
            missed,
        })
        .collect())
}

type Predictor<'a> = dyn Fn(&StateTrace) -> Result<Label> + Sync + 'a;

fn predict_all(traces: &[StateTrace], f: &Predictor<'_>) -> Result<Vec<Label>> {
    traces.par_iter().map(f).collect()
}

fn accuracy_of(pred: &[Label], traces: &[StateTrace]) -> f64 {
    let ok = pred.iter().zip(traces).filter(|(p, t)| **p == t.label).count();
    ratio(ok, traces.len())
}

fn family_rates(pred: &[Label], traces: &[StateTrace]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut agg: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (p, t) in pred.iter().zip(traces) {
        if t.label != Label::Ransomware {
            continue;
        }
        let hit = p.is_positive() as usize;
        let e = counts.entry(t.family.clone()).or_default();
        e.0 += hit;
        e.1 += 1;
        let a = agg.entry(if is_evasive(&t.family) { EVASIVE } else { NON_EVASIVE }).or_default();
        a.0 += hit;
        a.1 += 1;
    }
    let mut out: BTreeMap<String, f64> = counts.into_iter().map(|(f, (h, n))| (f, ratio(h, n))).collect();
    for (k, (h, n)) in agg {
        out.insert(k.to_string(), ratio(h, n));
    }
    out
}

fn model_report(
    test: &[StateTrace],
    unseen: &[StateTrace],
    sweep: &[(f64, Vec<StateTrace>)],
    predict: &Predictor<'_>,
) -> Result<ModelReport> {
    let pred = predict_all(test, predict)?;
    let labels: Vec<Label> = test.iter().map(|t| t.label).collect();
    let c = confusion(&pred, &labels)?;
    let unseen_pred = predict_all(unseen, predict)?;
    let mut unseen_acc: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (p, t) in unseen_pred.iter().zip(unseen) {
        let e = unseen_acc.entry(t.family.clone()).or_default();
        e.0 += (*p == t.label) as usize;
        e.1 += 1;
    }
    let sweep = sweep
        .iter()
        .map(|(speed, traces)| {
            let p = predict_all(traces, predict)?;
            Ok(SweepPoint {
                speed_mbps: *speed,
                accuracy: accuracy_of(&p, traces),
                traces: traces.len(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(ModelReport {
        confusion: c,
        metrics: metrics(&c)?,
        rates: rates(&c)?,
        families: family_rates(&pred, test),
        unseen: unseen_acc.into_iter().map(|(f, (ok, n))| (f, ratio(ok, n))).collect(),
        sweep,
    })
}

/// Runs the full experiment suite. Fails with a leakage error if any test
/// trace took part in fitting.
pub fn run_experiments(inp: &ExperimentInputs<'_>) -> Result<EvalReport> {
    inp.settings.validate()?;
    if let Some(t) = inp.test.iter().find(|t| inp.fitted_ids.contains(&t.id)) {
        return Err(NestError::Leakage(format!("test trace {} was used during fitting", t.id)));
    }
    if let Some(id) = inp.preprocessor.stats.source_ids.iter().find(|id| inp.test.iter().any(|t| &t.id == *id)) {
        return Err(NestError::Leakage(format!("test trace {id} contributed to normalization stats")));
    }
    if inp.test.iter().any(|t| t.family == BENIGN_FAMILY && t.label != Label::Benign) {
        return Err(NestError::InvalidDataset("benign family with ransomware label".into()));
    }
    let unseen: Vec<StateTrace> = inp.unseen.par_iter().map(|t| inp.preprocessor.apply(t)).collect::<Result<_>>()?;
    let sweep: Vec<(f64, Vec<StateTrace>)> = inp
        .sweep
        .iter()
        .map(|s| Ok((s.speed_mbps, s.traces.par_iter().map(|t| inp.preprocessor.apply(t)).collect::<Result<_>>()?)))
        .collect::<Result<_>>()?;

    let tau = inp.tau;
    let nest_predict = |t: &StateTrace| classify(t, inp.params, tau).map(|(l, _)| l);
    let base_predict = |t: &StateTrace| baseline_detect(t, inp.baseline).map(|(l, _)| l);
    let nest = model_report(inp.test, &unseen, &sweep, &nest_predict)?;
    let baseline = model_report(inp.test, &unseen, &sweep, &base_predict)?;
    let latency = latency_table(inp.test, inp.params, tau, inp.settings.stride, inp.settings.persistence)?;
    Ok(EvalReport {
        tau,
        test_traces: inp.test.len(),
        nest,
        baseline,
        baseline_params: inp.baseline.clone(),
        latency,
    })
}

// ---------------------------------------------------------------------------
// Report files.

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| NestError::Other(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| NestError::Other(format!("csv: {e}")))
}

pub fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let bytes = csv_bytes(header, rows)?;
    fsutil::write_atomic(path, |w| std::io::Write::write_all(w, &bytes))
}

fn models(report: &EvalReport) -> [(&'static str, &ModelReport); 2] {
    [(NEST, &report.nest), (BASELINE, &report.baseline)]
}

/// Writes metrics.csv, latency.csv, sweep.csv, families.csv, unseen.csv and
/// report.json into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| NestError::io(dir, e))?;
    let mut rows = Vec::new();
    for (name, m) in models(report) {
        let c = &m.confusion;
        let vals: [(&str, f64); 10] = [
            ("accuracy", m.metrics.accuracy),
            ("precision", m.metrics.precision),
            ("recall", m.metrics.recall),
            ("f1", m.metrics.f1),
            ("fpr", m.rates.fpr),
            ("fnr", m.rates.fnr),
            ("tp", c.tp as f64),
            ("fp", c.fp as f64),
            ("tn", c.tn as f64),
            ("fn", c.fn_ as f64),
        ];
        for (k, v) in vals {
            rows.push(vec![name.to_string(), k.to_string(), v.to_string()]);
        }
    }
    write_csv(&dir.join("metrics.csv"), &["model", "metric", "value"], rows)?;

    let rows = report
        .latency
        .iter()
        .map(|r| {
            vec![
                r.family.clone(),
                r.median_s.map(|v| v.to_string()).unwrap_or_default(),
                r.detected.to_string(),
                r.missed.to_string(),
            ]
        })
        .collect();
    write_csv(&dir.join("latency.csv"), &["family", "median_s", "detected", "missed"], rows)?;

    let mut rows = Vec::new();
    for (k, _) in report.nest.sweep.iter().enumerate() {
        for (name, m) in models(report) {
            let p = m.sweep[k];
            rows.push(vec![p.speed_mbps.to_string(), name.to_string(), p.accuracy.to_string()]);
        }
    }
    write_csv(&dir.join("sweep.csv"), &["speed_mbps", "model", "accuracy"], rows)?;

    let mut rows = Vec::new();
    for family in report.nest.families.keys() {
        for (name, m) in models(report) {
            let v = m.families.get(family).copied().unwrap_or(0.0);
            rows.push(vec![family.clone(), name.to_string(), v.to_string()]);
        }
    }
    write_csv(&dir.join("families.csv"), &["family", "model", "detection_rate"], rows)?;

    let mut rows = Vec::new();
    for family in report.nest.unseen.keys() {
        for (name, m) in models(report) {
            let v = m.unseen.get(family).copied().unwrap_or(0.0);
            rows.push(vec![family.clone(), name.to_string(), v.to_string()]);
        }
    }
    write_csv(&dir.join("unseen.csv"), &["family", "model", "accuracy"], rows)?;

    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    fsutil::write_string_atomic(&dir.join("report.json"), &json)
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| NestError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| NestError::parse(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use crate::statespace::{ActionCode, EncryptedState};
    use rand::Rng;

    fn labels(v: &[u8]) -> Vec<Label> {
        v.iter().map(|b| if *b == 1 { Label::Ransomware } else { Label::Benign }).collect()
    }

    #[test]
    fn perfect_and_inverted_predictors() {
        let y = labels(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let c = confusion(&y, &y).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (5, 5, 0, 0));
        let inv: Vec<Label> = y
            .iter()
            .map(|l| if l.is_positive() { Label::Benign } else { Label::Ransomware })
            .collect();
        let c = confusion(&inv, &y).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (0, 0, 5, 5));
    }

    #[test]
    fn confusion_matches_recount() {
        let mut rng = rng_for(1, "c", 0);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let p: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let c = confusion(&labels(&p), &labels(&y)).unwrap();
            let count = |a, b| p.iter().zip(&y).filter(|(x, z)| **x == a && **z == b).count();
            assert_eq!(c, Confusion { tp: count(1, 1), fp: count(1, 0), tn: count(0, 0), fn_: count(0, 1) });
        }
    }

    #[test]
    fn confusion_length_mismatch() {
        assert!(confusion(&labels(&[1]), &labels(&[1, 0])).is_err());
    }

    #[test]
    fn symmetric_confusion_metrics() {
        let m = metrics(&Confusion { tp: 9, fp: 1, tn: 9, fn_: 1 }).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            assert!((v - 0.9).abs() < 1e-15);
        }
        let z = metrics(&Confusion { tp: 0, fp: 0, tn: 3, fn_: 2 }).unwrap();
        assert_eq!((z.precision, z.f1), (0.0, 0.0));
        assert!(metrics(&Confusion::default()).is_err());
    }

    #[test]
    fn rate_rules() {
        let r = rates(&Confusion { tp: 4, fp: 0, tn: 6, fn_: 1 }).unwrap();
        assert_eq!(r.fpr, 0.0);
        let r = rates(&Confusion { tp: 7, fp: 2, tn: 7, fn_: 2 }).unwrap();
        assert_eq!(r.fpr, r.fnr);
        assert!(rates(&Confusion { tp: 3, fp: 0, tn: 0, fn_: 1 }).is_err());
    }

    #[test]
    fn max_run_mean_brute_force() {
        let mut rng = rng_for(2, "r", 0);
        for _ in 0..100 {
            let n = rng.random_range(1..60);
            let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let w = rng.random_range(1..70);
            let ww = w.min(n);
            let brute = (0..=n - ww)
                .map(|s| v[s..s + ww].iter().sum::<f64>() / ww as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((max_run_mean(&v, w) - brute).abs() < 1e-12);
        }
    }

    fn trace(entropy: &[f64], family: &str) -> StateTrace {
        let states: Vec<EncryptedState> = entropy
            .iter()
            .enumerate()
            .map(|(t, e)| {
                let mut s = vec![0.0; 8];
                s[0] = *e;
                s[5] = if family == "benign" { 0.0 } else { 0.01 * t as f64 };
                EncryptedState(s)
            })
            .collect();
        let label = if family == "benign" { Label::Benign } else { Label::Ransomware };
        StateTrace::from_states(family, label, family, 0.025, &states, vec![ActionCode(0); entropy.len() - 1]).unwrap()
    }

    #[test]
    fn quiet_benign_is_not_flagged() {
        let params = BaselineParams {
            window: 4,
            theta: 0.5,
            cosine: 0.95,
            signature_span: 32,
            benign_mean: vec![0.0; 8],
            signatures: BTreeMap::from([("x".to_string(), vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])]),
        };
        let (l, s) = baseline_detect(&trace(&[0.1; 20], "benign"), &params).unwrap();
        assert_eq!(l, Label::Benign);
        assert!((s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn signature_source_is_flagged() {
        let mut train = vec![trace(&[0.0; 30], "benign"), trace(&[0.0; 30], "benign")];
        let mut e = vec![0.0; 30];
        e[10] = 0.2;
        train.push(trace(&e, "lockbit3"));
        let params = fit_baseline(&train, &BaselineConfig::default()).unwrap();
        let v: Vec<f64> = post_peak_means(&train[2], params.signature_span).iter().zip(&params.benign_mean).map(|(a, b)| a - b).collect();
        assert!((cosine(&v, &params.signatures["lockbit3"]) - 1.0).abs() < 1e-12);
        assert_eq!(baseline_detect(&train[2], &params).unwrap().0, Label::Ransomware);
    }

    #[test]
    fn unfitted_baseline_is_an_error() {
        let p = BaselineParams {
            window: 0,
            theta: 0.0,
            cosine: 0.95,
            signature_span: 32,
            benign_mean: vec![],
            signatures: BTreeMap::new(),
        };
        assert!(baseline_detect(&trace(&[0.0; 5], "benign"), &p).is_err());
    }

    #[test]
    fn grid_search_equals_exhaustive_scan() {
        let mut rng = rng_for(3, "g", 0);
        let cfg = BaselineConfig::default();
        for _ in 0..20 {
            let mut train = Vec::new();
            for i in 0..12 {
                let fam = if i % 2 == 0 { "benign" } else { "lockbit3" };
                let lift = if fam == "benign" { 0.0 } else { 0.3 };
                let e: Vec<f64> = (0..80).map(|_| rng.random::<f64>() - 0.5 + lift).collect();
                let mut t = trace(&e, fam);
                t.id = format!("{fam}-{i}");
                train.push(t);
            }
            let fitted = fit_baseline(&train, &cfg).unwrap();
            // brute force: evaluate the full detector at every grid point
            let y: Vec<bool> = train.iter().map(|t| t.label.is_positive()).collect();
            let mut best = (f64::NEG_INFINITY, 0usize, Vec::new());
            for &w in &cfg.windows {
                let mut row = Vec::new();
                for theta in cfg.theta_grid() {
                    let p = BaselineParams { window: w, theta, ..fitted.clone() };
                    let pred: Vec<bool> = train.iter().map(|t| baseline_detect(t, &p).unwrap().0.is_positive()).collect();
                    let tp = pred.iter().zip(&y).filter(|(a, b)| **a && **b).count() as f64;
                    let tn = pred.iter().zip(&y).filter(|(a, b)| !**a && !**b).count() as f64;
                    let ba = (tp / 6.0 + tn / 6.0) / 2.0;
                    row.push((ba, theta));
                }
                let top = row.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
                if top > best.0 {
                    let tied: Vec<f64> = row.iter().filter(|r| r.0 == top).map(|r| r.1).collect();
                    best = (top, w, tied);
                }
            }
            assert_eq!(fitted.window, best.1);
            assert_eq!(fitted.theta, best.2[(best.2.len() - 1) / 2]);
        }
    }

    #[test]
    fn theta_grid_covers_range() {
        let g = BaselineConfig::default().theta_grid();
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], -1.0);
        assert!((g[100] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn csv_uses_lf_and_header() {
        let b = csv_bytes(&["a", "b"], vec![vec!["1".into(), "x".into()]]).unwrap();
        assert_eq!(String::from_utf8(b).unwrap(), "a,b\n1,x\n");
    }
}
