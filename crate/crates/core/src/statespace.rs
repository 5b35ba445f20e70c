//! Encrypted states, action codes, traces and datasets.
//!
//! An encrypted state is one time window of a process summarized as a fixed
//! vector of normalized behavioral channels (see [`Channel`]). A trace is an
//! ordered run of states together with the action code observed between each
//! pair of consecutive states.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::fsutil;

pub const DEFAULT_STATE_DIM: usize = 8;
pub const ACTION_ALPHABET_SIZE: usize = 5;
pub const BENIGN_FAMILY: &str = "benign";

/// The eight documented behavioral channels, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    ByteEntropy = 0,
    Uniformity = 1,
    WriteBurst = 2,
    ReadWriteRatio = 3,
    FileTouch = 4,
    CryptoCalls = 5,
    MemEntropyDelta = 6,
    NetEgress = 7,
}

impl Channel {
    pub const ALL: [Channel; DEFAULT_STATE_DIM] = [
        Channel::ByteEntropy,
        Channel::Uniformity,
        Channel::WriteBurst,
        Channel::ReadWriteRatio,
        Channel::FileTouch,
        Channel::CryptoCalls,
        Channel::MemEntropyDelta,
        Channel::NetEgress,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::ByteEntropy => "byte_entropy",
            Channel::Uniformity => "uniformity",
            Channel::WriteBurst => "write_burst",
            Channel::ReadWriteRatio => "read_write_ratio",
            Channel::FileTouch => "file_touch",
            Channel::CryptoCalls => "crypto_calls",
            Channel::MemEntropyDelta => "mem_entropy_delta",
            Channel::NetEgress => "net_egress",
        }
    }
}

/// One window's feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EncryptedState(pub Vec<f64>);

impl EncryptedState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl AsRef<[f64]> for EncryptedState {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionCode(pub u8);

impl ActionCode {
    pub const IDLE: ActionCode = ActionCode(0);
    pub const FILE_IO: ActionCode = ActionCode(1);
    pub const CRYPTO: ActionCode = ActionCode(2);
    pub const NET: ActionCode = ActionCode(3);
    pub const MEM: ActionCode = ActionCode(4);

    pub fn index(self) -> usize {
        usize::from(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Ransomware,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Ransomware
    }

    pub fn as_target(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Benign => f.write_str("benign"),
            Label::Ransomware => f.write_str("ransomware"),
        }
    }
}

/// A timed run of encrypted states.
///
/// States are stored row-major in one flat buffer of `len() * dim` values.
/// `order` is the generation-order index used for temporal splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrace {
    pub id: String,
    pub order: u64,
    pub label: Label,
    pub family: String,
    pub window_dt: f64,
    pub dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<ActionCode>,
}

impl StateTrace {
    pub fn from_states(
        id: impl Into<String>,
        label: Label,
        family: impl Into<String>,
        window_dt: f64,
        states: &[EncryptedState],
        actions: Vec<ActionCode>,
    ) -> Result<Self> {
        let dim = states.first().map(EncryptedState::dim).unwrap_or(0);
        if let Some(t) = states.iter().position(|s| s.dim() != dim) {
            return Err(NestError::InvalidTrace(format!(
                "state {t} has dimension {}, expected {dim}",
                states[t].dim()
            )));
        }
        Ok(StateTrace {
            id: id.into(),
            order: 0,
            label,
            family: family.into(),
            window_dt,
            dim,
            states: states.iter().flat_map(|s| s.0.iter().copied()).collect(),
            actions,
        })
    }

    /// Number of states.
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.states.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.dim..(t + 1) * self.dim]
    }

    pub fn state_mut(&mut self, t: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.states[t * d..(t + 1) * d]
    }

    pub fn iter_states(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.states.chunks_exact(self.dim.max(1))
    }

    pub fn channel(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.iter_states().map(move |s| s[j])
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.window_dt
    }

    /// A copy restricted to states `start..end` (and the actions between them).
    pub fn window(&self, start: usize, end: usize) -> StateTrace {
        assert!(start < end && end <= self.len(), "window out of range");
        StateTrace {
            id: self.id.clone(),
            order: self.order,
            label: self.label,
            family: self.family.clone(),
            window_dt: self.window_dt,
            dim: self.dim,
            states: self.states[start * self.dim..end * self.dim].to_vec(),
            actions: self.actions[start..end - 1].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TooFewStates { len: usize },
    ActionCount { states: usize, actions: usize },
    StateDimension { values: usize, dim: usize },
    NonFiniteFeature { t: usize, j: usize },
    NonPositiveWindow { window_dt: f64 },
    FamilyLabelMismatch { family: String, label: Label },
    ActionOutOfRange { t: usize, code: u8 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewStates { len } => write!(f, "too few states: {len} < 2"),
            Violation::ActionCount { states, actions } => write!(
                f,
                "action count: {actions} actions for {states} states (expected {})",
                states.saturating_sub(1)
            ),
            Violation::StateDimension { values, dim } => {
                write!(f, "state dimension: {values} values do not tile dimension {dim}")
            }
            Violation::NonFiniteFeature { t, j } => write!(f, "non-finite feature at ({t},{j})"),
            Violation::NonPositiveWindow { window_dt } => {
                write!(f, "window_dt must be positive, got {window_dt}")
            }
            Violation::FamilyLabelMismatch { family, label } => {
                write!(f, "family/label mismatch: family {family:?} with label {label}")
            }
            Violation::ActionOutOfRange { t, code } => {
                write!(f, "action out of range at {t}: code {code}")
            }
        }
    }
}

/// Checks every trace invariant; violations are returned, never raised.
pub fn validate_trace(trace: &StateTrace) -> Vec<Violation> {
    let mut out = Vec::new();
    if trace.dim == 0 || trace.states.len() % trace.dim != 0 {
        out.push(Violation::StateDimension {
            values: trace.states.len(),
            dim: trace.dim,
        });
    }
    let n = trace.len();
    if n < 2 {
        out.push(Violation::TooFewStates { len: n });
    }
    if trace.actions.len() + 1 != n {
        out.push(Violation::ActionCount {
            states: n,
            actions: trace.actions.len(),
        });
    }
    if trace.dim > 0 {
        for (i, v) in trace.states.iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation::NonFiniteFeature {
                    t: i / trace.dim,
                    j: i % trace.dim,
                });
            }
        }
    }
    if !(trace.window_dt > 0.0) {
        out.push(Violation::NonPositiveWindow {
            window_dt: trace.window_dt,
        });
    }
    if (trace.family == BENIGN_FAMILY) != (trace.label == Label::Benign) {
        out.push(Violation::FamilyLabelMismatch {
            family: trace.family.clone(),
            label: trace.label,
        });
    }
    for (t, a) in trace.actions.iter().enumerate() {
        if a.index() >= ACTION_ALPHABET_SIZE {
            out.push(Violation::ActionOutOfRange { t, code: a.0 });
        }
    }
    out
}

pub fn ensure_valid(trace: &StateTrace) -> Result<()> {
    let violations = validate_trace(trace);
    if violations.is_empty() {
        Ok(())
    } else {
        let joined: Vec<String> = violations.iter().map(ToString::to_string).collect();
        Err(NestError::InvalidTrace(format!("{}: {}", trace.id, joined.join("; "))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

/// Per-channel min, max, mean and population variance over all states.
pub fn trace_stats(trace: &StateTrace) -> Result<Vec<ChannelStats>> {
    if !validate_trace(trace).is_empty() {
        return Err(NestError::InvalidTrace("invalid trace".into()));
    }
    let n = trace.len() as f64;
    Ok((0..trace.dim)
        .map(|j| {
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for v in trace.channel(j) {
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
            // a constant channel reports its value exactly
            let mean = if lo == hi { lo } else { (sum / n).clamp(lo, hi) };
            let variance = trace.channel(j).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            ChannelStats {
                min: lo,
                max: hi,
                mean,
                variance,
            }
        })
        .collect())
}

/// Per-family preprocessing tags carried alongside the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyTags {
    pub denoise: bool,
    pub range: [f64; 2],
    #[serde(default)]
    pub evasion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub d: usize,
    pub action_alphabet_size: usize,
    pub families: BTreeMap<String, usize>,
    pub seed: u64,
    #[serde(default)]
    pub family_tags: BTreeMap<String, FamilyTags>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub traces: Vec<StateTrace>,
    pub d: usize,
    pub manifest: Manifest,
}

impl Dataset {
    /// Builds a dataset whose manifest counts are recomputed from the traces.
    pub fn new(
        traces: Vec<StateTrace>,
        d: usize,
        seed: u64,
        family_tags: BTreeMap<String, FamilyTags>,
    ) -> Result<Self> {
        let mut families = BTreeMap::new();
        for t in &traces {
            *families.entry(t.family.clone()).or_insert(0) += 1;
        }
        let ds = Dataset {
            traces,
            d,
            manifest: Manifest {
                d,
                action_alphabet_size: ACTION_ALPHABET_SIZE,
                families,
                seed,
                family_tags,
            },
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn check(&self) -> Result<()> {
        if let Some(t) = self.traces.iter().find(|t| t.dim != self.d) {
            return Err(NestError::InvalidDataset(format!(
                "trace {} has dimension {}, dataset declares {}",
                t.id, t.dim, self.d
            )));
        }
        if self.manifest.d != self.d {
            return Err(NestError::InvalidDataset("manifest d differs from dataset d".into()));
        }
        let mut counts = BTreeMap::new();
        for t in &self.traces {
            *counts.entry(t.family.clone()).or_insert(0usize) += 1;
        }
        if counts != self.manifest.families {
            return Err(NestError::InvalidDataset(
                "manifest counts differ from per-family trace counts".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Trace files: one JSON record per line.

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    id: String,
    #[serde(default)]
    order: u64,
    label: Label,
    family: String,
    window_dt: f64,
    states: Vec<Vec<f64>>,
    actions: Vec<u8>,
}

impl From<&StateTrace> for TraceRecord {
    fn from(t: &StateTrace) -> Self {
        TraceRecord {
            id: t.id.clone(),
            order: t.order,
            label: t.label,
            family: t.family.clone(),
            window_dt: t.window_dt,
            states: t.iter_states().map(<[f64]>::to_vec).collect(),
            actions: t.actions.iter().map(|a| a.0).collect(),
        }
    }
}

impl TraceRecord {
    fn into_trace(self) -> std::result::Result<StateTrace, String> {
        let dim = self.states.first().map(Vec::len).unwrap_or(0);
        if let Some(t) = self.states.iter().position(|s| s.len() != dim) {
            return Err(format!("state {t} has dimension {}, expected {dim}", self.states[t].len()));
        }
        Ok(StateTrace {
            id: self.id,
            order: self.order,
            label: self.label,
            family: self.family,
            window_dt: self.window_dt,
            dim,
            states: self.states.into_iter().flatten().collect(),
            actions: self.actions.into_iter().map(ActionCode).collect(),
        })
    }
}

pub fn encode_trace_line(trace: &StateTrace) -> String {
    serde_json::to_string(&TraceRecord::from(trace)).expect("trace records always serialize")
}

pub fn decode_trace_line(line: &str) -> std::result::Result<StateTrace, String> {
    let rec: TraceRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.into_trace()
}

pub fn write_traces(path: &Path, traces: &[StateTrace]) -> Result<()> {
    fsutil::write_atomic(path, |w| {
        for t in traces {
            w.write_all(encode_trace_line(t).as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_traces(path: &Path) -> Result<Vec<StateTrace>> {
    let file = std::fs::File::open(path).map_err(|e| NestError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| NestError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let trace =
            decode_trace_line(&line).map_err(|e| NestError::parse(path, format!("line {}: {e}", i + 1)))?;
        out.push(trace);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fsutil::write_string_atomic(path, &(text + "\n"))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| NestError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| NestError::parse(path, e))
}

/// Writes `traces.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.check()?;
    std::fs::create_dir_all(dir).map_err(|e| NestError::io(dir, e))?;
    write_traces(&dir.join("traces.jsonl"), &dataset.traces)?;
    write_manifest(&dir.join("manifest.json"), &dataset.manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    let traces = read_traces(&dir.join("traces.jsonl"))?;
    let ds = Dataset {
        d: manifest.d,
        traces,
        manifest,
    };
    ds.check()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(states: Vec<Vec<f64>>, actions: Vec<u8>, label: Label, family: &str) -> StateTrace {
        let states: Vec<EncryptedState> = states.into_iter().map(EncryptedState).collect();
        StateTrace::from_states(
            "toy",
            label,
            family,
            0.025,
            &states,
            actions.into_iter().map(ActionCode).collect(),
        )
        .unwrap()
    }

    #[test]
    fn valid_three_state_trace() {
        let t = toy(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0, 1], Label::Benign, "benign");
        assert!(validate_trace(&t).is_empty());
    }

    #[test]
    fn action_count_violation() {
        let t = toy(vec![vec![0.0], vec![1.0], vec![2.0]], vec![0, 1, 2], Label::Benign, "benign");
        let v = validate_trace(&t);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("action count"));
    }

    #[test]
    fn non_finite_violation_reports_position() {
        let t = toy(
            vec![vec![0.0, 1.0], vec![1.0, f64::NAN], vec![2.0, 0.0]],
            vec![0, 1],
            Label::Benign,
            "benign",
        );
        let v = validate_trace(&t);
        assert_eq!(v, vec![Violation::NonFiniteFeature { t: 1, j: 1 }]);
        assert_eq!(v[0].to_string(), "non-finite feature at (1,1)");
    }

    #[test]
    fn family_label_and_window_violations() {
        let mut t = toy(vec![vec![0.0], vec![1.0]], vec![7], Label::Ransomware, "benign");
        t.window_dt = 0.0;
        let v = validate_trace(&t);
        assert!(v.iter().any(|x| matches!(x, Violation::FamilyLabelMismatch { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::NonPositiveWindow { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::ActionOutOfRange { t: 0, code: 7 })));
    }

    #[test]
    fn stats_single_channel() {
        let t = toy(vec![vec![0.0], vec![5.0], vec![10.0]], vec![0, 0], Label::Benign, "benign");
        let s = trace_stats(&t).unwrap();
        assert_eq!((s[0].min, s[0].max, s[0].mean), (0.0, 10.0, 5.0));
    }

    #[test]
    fn stats_constant_trace() {
        let c = 0.37;
        let t = toy(vec![vec![c]; 6], vec![0; 5], Label::Benign, "benign");
        let s = trace_stats(&t).unwrap()[0];
        assert_eq!((s.min, s.max, s.mean, s.variance), (c, c, c, 0.0));
    }

    #[test]
    fn stats_reject_invalid_trace() {
        let t = toy(vec![vec![0.0], vec![1.0]], vec![], Label::Benign, "benign");
        assert!(matches!(trace_stats(&t), Err(NestError::InvalidTrace(m)) if m == "invalid trace"));
    }

    #[test]
    fn trace_line_round_trip() {
        let t = toy(
            vec![vec![0.1, -1.0 / 3.0], vec![1e-300, 2.5e17], vec![f64::MIN_POSITIVE, 0.0]],
            vec![2, 4],
            Label::Ransomware,
            "hive",
        );
        let back = decode_trace_line(&encode_trace_line(&t)).unwrap();
        assert_eq!(back, t);
    }
    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn trace_line_round_trip_is_bit_exact(
                (values, actions, d) in (1usize..5, 2usize..12).prop_flat_map(|(d, n)| (
                    prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), d * n),
                    prop::collection::vec(0u8..5, n - 1),
                    Just(d),
                )),
                ransom in any::<bool>(),
            ) {
                let states: Vec<Vec<f64>> = values.chunks(d).map(|c| c.to_vec()).collect();
                let label = if ransom { Label::Ransomware } else { Label::Benign };
                let t = toy(states, actions, label, if ransom { "hive" } else { "benign" });
                prop_assert!(validate_trace(&t).is_empty());
                let back = decode_trace_line(&encode_trace_line(&t)).unwrap();
                prop_assert_eq!(back.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), t.states.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
                prop_assert!(trace_stats(&t).is_ok());
                prop_assert_eq!(back, t);
            }
        }
    }
}
