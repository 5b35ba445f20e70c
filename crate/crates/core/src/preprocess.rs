//! Normalization, denoising and the stratified temporal split.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::fsutil;
use crate::statespace::{FamilyTags, StateTrace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRange {
    pub lo: f64,
    pub hi: f64,
}

impl NormalizationRange {
    pub const SYMMETRIC: NormalizationRange = NormalizationRange { lo: -1.0, hi: 1.0 };
    pub const UNIT: NormalizationRange = NormalizationRange { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(NestError::InvalidConfig(format!("normalization range needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(NormalizationRange { lo, hi })
    }

    pub fn midpoint(&self) -> f64 {
        (self.lo + self.hi) / 2.0
    }
}

impl Default for NormalizationRange {
    fn default() -> Self {
        Self::SYMMETRIC
    }
}

/// Per-channel source extremes plus where they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Name of the split the extremes were computed on.
    pub provenance: String,
    /// Sorted ids of every trace that contributed.
    pub source_ids: Vec<String>,
}

impl SourceStats {
    pub fn compute<'a>(traces: impl IntoIterator<Item = &'a StateTrace>, provenance: &str) -> Result<Self> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        let mut ids = Vec::new();
        for t in traces {
            if min.is_empty() {
                min = vec![f64::INFINITY; t.dim];
                max = vec![f64::NEG_INFINITY; t.dim];
            } else if t.dim != min.len() {
                return Err(NestError::Shape(format!("trace {} has dimension {}, expected {}", t.id, t.dim, min.len())));
            }
            for s in t.iter_states() {
                for (j, &v) in s.iter().enumerate() {
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
            ids.push(t.id.clone());
        }
        if ids.is_empty() {
            return Err(NestError::StatsRequired("no traces to compute statistics from".into()));
        }
        ids.sort();
        Ok(SourceStats {
            min,
            max,
            provenance: provenance.into(),
            source_ids: ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }
}

/// Affine map of each channel from the source `[min, max]` onto
/// `[range.lo, range.hi]`, clipped. Degenerate channels map to the midpoint.
pub fn normalize(trace: &StateTrace, range: NormalizationRange, stats: Option<&SourceStats>) -> Result<StateTrace> {
    let stats = stats.ok_or_else(|| NestError::StatsRequired("normalize needs training statistics".into()))?;
    if stats.dim() != trace.dim {
        return Err(NestError::Shape(format!(
            "stats cover {} channels, trace {} has {}",
            stats.dim(),
            trace.id,
            trace.dim
        )));
    }
    let mut out = trace.clone();
    let d = trace.dim;
    for (i, v) in out.states.iter_mut().enumerate() {
        let j = i % d;
        *v = normalize_value(*v, stats.min[j], stats.max[j], range);
    }
    Ok(out)
}

pub fn normalize_value(x: f64, min: f64, max: f64, range: NormalizationRange) -> f64 {
    if max <= min {
        return range.midpoint();
    }
    // endpoints and clipping are exact; only the interior is computed
    if x <= min {
        return range.lo;
    }
    if x >= max {
        return range.hi;
    }
    let y = range.lo + (x - min) / (max - min) * (range.hi - range.lo);
    y.clamp(range.lo, range.hi)
}

/// Inverse of [`normalize`] for values inside the range (clipping is lossy).
pub fn denormalize_value(y: f64, min: f64, max: f64, range: NormalizationRange) -> f64 {
    if max <= min {
        return min;
    }
    min + (y - range.lo) / (range.hi - range.lo) * (max - min)
}

/// Centered moving average per channel; windows shrink at the boundaries.
pub fn denoise(trace: &StateTrace, window: usize) -> Result<StateTrace> {
    if window == 0 || window % 2 == 0 {
        return Err(NestError::InvalidConfig(format!("denoise window must be odd and >= 1, got {window}")));
    }
    let n = trace.len();
    if window > n {
        return Err(NestError::InvalidConfig(format!("denoise window {window} exceeds trace length {n}")));
    }
    if window == 1 {
        return Ok(trace.clone());
    }
    let d = trace.dim;
    let half = window / 2;
    let mut out = trace.clone();
    for j in 0..d {
        // prefix[i] = sum of the first i values
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for v in trace.channel(j) {
            acc += v;
            prefix.push(acc);
        }
        for t in 0..n {
            let a = t.saturating_sub(half);
            let b = (t + half + 1).min(n);
            out.states[t * d + j] = (prefix[b] - prefix[a]) / (b - a) as f64;
        }
    }
    Ok(out)
}

/// [`denoise`], skipped for families whose tags disable noise reduction.
pub fn denoise_tagged(trace: &StateTrace, window: usize, tags: &BTreeMap<String, FamilyTags>) -> Result<StateTrace> {
    match tags.get(&trace.family) {
        Some(t) if !t.denoise => Ok(trace.clone()),
        _ => denoise(trace, window),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(NestError::InvalidConfig(format!("split ratios must be positive: {:?}", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(NestError::InvalidConfig(format!("split ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`. Ties in the
/// fractional part go to the earlier split.
pub fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<StateTrace>,
    pub val: Vec<StateTrace>,
    pub test: Vec<StateTrace>,
}

/// Per family, traces sorted by generation order go earliest-first to train,
/// then validation, then test, with largest-remainder counts.
pub fn stratified_split(traces: &[StateTrace], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut by_family: BTreeMap<&str, Vec<&StateTrace>> = BTreeMap::new();
    for t in traces {
        by_family.entry(t.family.as_str()).or_default().push(t);
    }
    let mut splits = Splits::default();
    for (family, mut members) in by_family {
        if members.len() < 3 {
            return Err(NestError::InvalidDataset(format!(
                "family {family} has {} traces; stratified split needs at least 3",
                members.len()
            )));
        }
        members.sort_by(|a, b| a.order.cmp(&b.order).then_with(|| a.id.cmp(&b.id)));
        let [n_train, n_val, _] = apportion(members.len(), &spec.ratios);
        for (i, t) in members.into_iter().enumerate() {
            let dest = if i < n_train {
                &mut splits.train
            } else if i < n_train + n_val {
                &mut splits.val
            } else {
                &mut splits.test
            };
            dest.push(t.clone());
        }
    }
    Ok(splits)
}

/// Fails if `stats` did not come from exactly `train`, or if any id from
/// `held_out` contributed to it.
pub fn audit_stats(stats: &SourceStats, train: &[StateTrace], held_out: &[StateTrace]) -> Result<()> {
    let sources: BTreeSet<&str> = stats.source_ids.iter().map(String::as_str).collect();
    if let Some(t) = held_out.iter().find(|t| sources.contains(t.id.as_str())) {
        return Err(NestError::Leakage(format!("held-out trace {} contributed to normalization stats", t.id)));
    }
    let mut train_ids: Vec<&str> = train.iter().map(|t| t.id.as_str()).collect();
    train_ids.sort_unstable();
    if train_ids != stats.source_ids.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(NestError::Leakage("normalization stats were not computed on the training split".into()));
    }
    if stats.provenance != "train" {
        return Err(NestError::Leakage(format!("stats provenance is {:?}, expected \"train\"", stats.provenance)));
    }
    Ok(())
}

/// Stats sidecar written next to prepared splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSidecar {
    pub range: NormalizationRange,
    pub table_faithful: bool,
    pub denoise_window: usize,
    pub channel_min: Vec<f64>,
    pub channel_max: Vec<f64>,
    pub provenance: String,
    pub source_ids: Vec<String>,
    #[serde(default)]
    pub family_tags: BTreeMap<String, FamilyTags>,
}

impl StatsSidecar {
    pub fn stats(&self) -> SourceStats {
        SourceStats {
            min: self.channel_min.clone(),
            max: self.channel_max.clone(),
            provenance: self.provenance.clone(),
            source_ids: self.source_ids.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("sidecar serializes");
        fsutil::write_string_atomic(path, &(text + "\n"))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NestError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| NestError::parse(path, e))
    }
}

/// The fitted preprocessing applied identically to every split and to any
/// freshly generated evaluation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub denoise_window: usize,
    pub range: NormalizationRange,
    pub table_faithful: bool,
    pub tags: BTreeMap<String, FamilyTags>,
    pub stats: SourceStats,
}

impl Preprocessor {
    /// Denoises every split, computes stats on the denoised training split
    /// only, and returns the fitted preprocessor with normalized splits.
    pub fn fit(
        splits: &Splits,
        denoise_window: usize,
        range: NormalizationRange,
        table_faithful: bool,
        tags: BTreeMap<String, FamilyTags>,
    ) -> Result<(Self, Splits)> {
        let den = |ts: &[StateTrace]| -> Result<Vec<StateTrace>> {
            ts.iter().map(|t| denoise_one(t, denoise_window, table_faithful, &tags)).collect()
        };
        let train = den(&splits.train)?;
        let val = den(&splits.val)?;
        let test = den(&splits.test)?;
        let stats = SourceStats::compute(&train, "train")?;
        let pre = Preprocessor {
            denoise_window,
            range,
            table_faithful,
            tags,
            stats,
        };
        let norm = |ts: Vec<StateTrace>| -> Result<Vec<StateTrace>> { ts.iter().map(|t| pre.normalize(t)).collect() };
        let out = Splits {
            train: norm(train)?,
            val: norm(val)?,
            test: norm(test)?,
        };
        Ok((pre, out))
    }

    fn range_for(&self, family: &str) -> NormalizationRange {
        if self.table_faithful {
            if let Some(t) = self.tags.get(family) {
                return NormalizationRange { lo: t.range[0], hi: t.range[1] };
            }
        }
        self.range
    }

    fn normalize(&self, trace: &StateTrace) -> Result<StateTrace> {
        normalize(trace, self.range_for(&trace.family), Some(&self.stats))
    }

    /// Full preprocessing of a raw trace.
    pub fn apply(&self, trace: &StateTrace) -> Result<StateTrace> {
        let t = denoise_one(trace, self.denoise_window, self.table_faithful, &self.tags)?;
        self.normalize(&t)
    }

    pub fn sidecar(&self) -> StatsSidecar {
        StatsSidecar {
            range: self.range,
            table_faithful: self.table_faithful,
            denoise_window: self.denoise_window,
            channel_min: self.stats.min.clone(),
            channel_max: self.stats.max.clone(),
            provenance: self.stats.provenance.clone(),
            source_ids: self.stats.source_ids.clone(),
            family_tags: self.tags.clone(),
        }
    }

    pub fn from_sidecar(s: &StatsSidecar) -> Self {
        Preprocessor {
            denoise_window: s.denoise_window,
            range: s.range,
            table_faithful: s.table_faithful,
            tags: s.family_tags.clone(),
            stats: s.stats(),
        }
    }
}

fn denoise_one(trace: &StateTrace, window: usize, table_faithful: bool, tags: &BTreeMap<String, FamilyTags>) -> Result<StateTrace> {
    let w = window.min(odd_floor(trace.len()));
    if table_faithful {
        denoise_tagged(trace, w, tags)
    } else {
        denoise(trace, w)
    }
}

fn odd_floor(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n.saturating_sub(1).max(1)
    }
}
