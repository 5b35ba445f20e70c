//! Seeded synthesizer of benign and ransomware traces.
//!
//! All distributions here are synthetic stand-ins chosen to preserve the
//! experimental axes (family, evasion mode, encryption speed). Nothing is
//! measured from real processes.
//!
//! # Benign process
//!
//! Actions follow a semi-Markov schedule: each segment draws an action from a
//! fixed distribution and a duration from an action-specific range (two
//! uniform draws per segment). Every channel then follows a first-order
//! autoregression toward an action-dependent target,
//!
//! ```text
//! x[t+1] = x[t] + (1 - phi) * (mu + activity * D[a[t]] - x[t]) + noise * sigma_e * eps
//! sigma_e = sigma_stat * sqrt(1 - phi^2)
//! ```
//!
//! `D` is centered so that its time-weighted mean under the benign schedule is
//! zero, which keeps `mu` the long-run channel mean.
//!
//! # Ransomware process
//!
//! A ransomware trace is the benign process driven by the trace's own action
//! schedule, plus a malicious component that starts at the onset window:
//!
//! ```text
//! e(t)   = clamp(ramp_per_mbps * enc_speed * (t - onset), 0, 1)
//! x'[t]  = x[t] + e(t) * A_j(speed) * m_j(t) + e(t) * burst_gain * sigma_e * xi   (affected channels)
//! ```
//!
//! Entropy and uniformity amplitudes shrink above `full_entropy_speed`
//! (fast strains encrypt intermittently); the write-burst amplitude grows with
//! `sqrt(speed / write_ref_speed)`. Evasion modes change which channels move.
//! Streams for actions, benign noise and burst noise are separate, so the
//! pre-onset segment of a ransomware trace is bit-identical to the benign
//! trace generated from the same seed.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::seed::{derive_seed, rng_for};
use crate::statespace::{
    ActionCode, Channel, Dataset, FamilyTags, Label, StateTrace, ACTION_ALPHABET_SIZE,
    BENIGN_FAMILY, DEFAULT_STATE_DIM,
};

pub const DEFAULT_WINDOW_DT: f64 = 0.025;
pub const MIN_TRACE_LEN: usize = 64;

pub const TRAINING_FAMILIES: [&str; 5] = ["lockbit3", "blackcat", "hive", "conti", "babuk"];
pub const UNSEEN_FAMILIES: [&str; 3] = ["royal", "quantum", "play"];

const DIM: usize = DEFAULT_STATE_DIM;

/// Benign channel baselines, in [`Channel`] order.
pub const BENIGN_BASELINE: [f64; DIM] = [0.45, 0.30, 0.20, 0.50, 0.15, 0.05, 0.10, 0.20];
pub const BENIGN_STATIONARY_SD: [f64; DIM] = [0.04; DIM];

/// Raw (uncentered) per-action channel targets of the benign process.
const ACTION_EFFECTS: [[f64; DIM]; ACTION_ALPHABET_SIZE] = [
    [0.0; DIM],
    [0.04, 0.02, 0.12, -0.08, 0.10, 0.0, 0.0, 0.0],
    [0.06, 0.04, 0.0, 0.0, 0.0, 0.18, 0.02, 0.02],
    [0.25, 0.10, 0.0, 0.05, 0.0, 0.04, 0.0, 0.30],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.02, 0.16, 0.0],
];

const SEGMENT_DURATIONS: [(usize, usize); ACTION_ALPHABET_SIZE] =
    [(8, 40), (3, 12), (1, 4), (3, 8), (2, 8)];
const BENIGN_MIX: [f64; ACTION_ALPHABET_SIZE] = [0.40, 0.25, 0.10, 0.15, 0.10];
const RANSOM_MIX: [f64; ACTION_ALPHABET_SIZE] = [0.05, 0.45, 0.35, 0.05, 0.10];
const MEMORY_RESIDENT_MIX: [f64; ACTION_ALPHABET_SIZE] = [0.15, 0.05, 0.35, 0.05, 0.40];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenignConfig {
    pub baseline: Vec<f64>,
    pub stationary_sd: Vec<f64>,
    pub phi: f64,
    /// Multiplies the innovation noise.
    pub noise_scale: f64,
    /// Multiplies the action-driven targets.
    pub activity_scale: f64,
}

impl Default for BenignConfig {
    fn default() -> Self {
        BenignConfig {
            baseline: BENIGN_BASELINE.to_vec(),
            stationary_sd: BENIGN_STATIONARY_SD.to_vec(),
            phi: 0.7,
            noise_scale: 1.0,
            activity_scale: 1.0,
        }
    }
}

impl BenignConfig {
    /// No innovations and no activity: every channel sits on its baseline.
    pub fn silent() -> Self {
        BenignConfig {
            noise_scale: 0.0,
            activity_scale: 0.0,
            ..Self::default()
        }
    }

    pub fn innovation_sd(&self, j: usize) -> f64 {
        self.stationary_sd[j] * (1.0 - self.phi * self.phi).sqrt()
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.baseline.len() < d || self.stationary_sd.len() < d {
            return Err(NestError::InvalidConfig(format!(
                "benign config covers {} channels, need {d}",
                self.baseline.len().min(self.stationary_sd.len())
            )));
        }
        if !(0.0..1.0).contains(&self.phi) {
            return Err(NestError::InvalidConfig(format!("phi must be in [0,1), got {}", self.phi)));
        }
        if self.noise_scale < 0.0 || self.activity_scale < 0.0 {
            return Err(NestError::InvalidConfig("scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mechanics of the malicious component shared by every family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansomDynamics {
    /// Envelope slope per window per MB/s of encryption speed.
    pub ramp_per_mbps: f64,
    /// Post-onset innovation multiplier on affected channels.
    pub burst_gain: f64,
    /// Above this speed, entropy/uniformity amplitudes scale by `full / speed`.
    pub full_entropy_speed: f64,
    /// Write-burst amplitude scales by `sqrt(speed / write_ref_speed)`.
    pub write_ref_speed: f64,
    /// Entropy-obfuscated strains keep the entropy channel at or below
    /// `baseline + entropy_clamp_margin` after onset.
    pub entropy_clamp_margin: f64,
    /// Depth of the optional periodic modulation.
    pub periodic_depth: f64,
}

impl Default for RansomDynamics {
    fn default() -> Self {
        RansomDynamics {
            ramp_per_mbps: 0.01,
            burst_gain: 3.0,
            full_entropy_speed: 4.0,
            write_ref_speed: 8.0,
            entropy_clamp_margin: 0.08,
            periodic_depth: 0.5,
        }
    }
}

impl RansomDynamics {
    pub fn ramp_slope(&self, enc_speed: f64) -> f64 {
        self.ramp_per_mbps * enc_speed
    }

    pub fn envelope(&self, profile: &FamilyProfile, t: usize) -> f64 {
        if t <= profile.onset_window {
            0.0
        } else {
            (self.ramp_slope(profile.enc_speed) * (t - profile.onset_window) as f64).min(1.0)
        }
    }

    /// Channel amplitude after the speed-dependent adjustments.
    pub fn effective_amplitude(&self, profile: &FamilyProfile, j: usize) -> f64 {
        let a = profile.channel_amplitudes[j];
        let speed = profile.enc_speed;
        if j == Channel::ByteEntropy.index() || j == Channel::Uniformity.index() {
            a * (self.full_entropy_speed / speed).min(1.0)
        } else if j == Channel::WriteBurst.index() {
            a * (speed / self.write_ref_speed).sqrt()
        } else {
            a
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evasion {
    None,
    Delayed,
    EntropyObfuscated,
    MemoryResident,
}

impl Evasion {
    pub fn is_evasive(self) -> bool {
        self != Evasion::None
    }

    pub fn name(self) -> &'static str {
        match self {
            Evasion::None => "none",
            Evasion::Delayed => "delayed",
            Evasion::EntropyObfuscated => "entropy_obfuscated",
            Evasion::MemoryResident => "memory_resident",
        }
    }
}

/// Concrete parameters of one ransomware trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyProfile {
    pub name: String,
    pub onset_window: usize,
    pub channel_amplitudes: Vec<f64>,
    /// MB/s.
    pub enc_speed: f64,
    pub evasion: Evasion,
    /// Per-channel modulation period in windows (0 = none).
    pub periodicity: Option<Vec<f64>>,
    /// The overall amplitude multiplier this profile was drawn with.
    pub amplitude_scale: f64,
}

impl FamilyProfile {
    pub fn validate(&self, length: usize, d: usize) -> Result<()> {
        let bad = |m: String| Err(NestError::InvalidConfig(format!("profile {}: {m}", self.name)));
        if !(self.enc_speed > 0.0) || !self.enc_speed.is_finite() {
            return bad(format!("enc_speed must be positive, got {}", self.enc_speed));
        }
        if self.onset_window >= length {
            return bad(format!("onset {} not below length {length}", self.onset_window));
        }
        if self.evasion == Evasion::Delayed && 2 * self.onset_window < length {
            return bad(format!(
                "delayed evasion needs onset >= length/2, got {} of {length}",
                self.onset_window
            ));
        }
        if self.channel_amplitudes.len() < d {
            return bad(format!("{} amplitudes for dimension {d}", self.channel_amplitudes.len()));
        }
        if self.channel_amplitudes.iter().any(|a| !a.is_finite()) {
            return bad("non-finite amplitude".into());
        }
        if let Some(p) = &self.periodicity {
            if p.len() < d || p.iter().any(|v| !(*v >= 0.0)) {
                return bad("periodicity must hold a non-negative period per channel".into());
            }
        }
        Ok(())
    }

    fn mix(&self) -> &'static [f64; ACTION_ALPHABET_SIZE] {
        if self.evasion == Evasion::MemoryResident {
            &MEMORY_RESIDENT_MIX
        } else {
            &RANSOM_MIX
        }
    }
}

/// Ranges from which per-trace profiles of one family are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyTemplate {
    pub name: String,
    pub base_amplitudes: [f64; DIM],
    pub enc_speed: f64,
    pub evasion: Evasion,
    pub periodicity: Option<[f64; DIM]>,
    /// Onset window range (inclusive) for non-delayed families.
    pub onset_range: (usize, usize),
    /// Fraction-of-length onset range used when evasion is delayed.
    pub delayed_onset_fraction: (f64, f64),
    pub amplitude_scale_range: (f64, f64),
    /// Per-channel multiplicative jitter half-width.
    pub polymorphism: f64,
}

/// Onset range (windows) used by training families.
pub const TRAINING_ONSET_RANGE: (usize, usize) = (64, 160);
/// Held-out onset range used by unseen families.
pub const UNSEEN_ONSET_RANGE: (usize, usize) = (176, 320);
pub const TRAINING_SCALE_RANGE: (f64, f64) = (0.7, 1.3);
/// Held-out amplitude-scale range, disjoint from [`TRAINING_SCALE_RANGE`].
pub const UNSEEN_SCALE_RANGE: (f64, f64) = (1.35, 1.65);

impl FamilyTemplate {
    fn training(name: &str, amps: [f64; DIM], speed: f64, evasion: Evasion) -> Self {
        FamilyTemplate {
            name: name.into(),
            base_amplitudes: amps,
            enc_speed: speed,
            evasion,
            periodicity: None,
            onset_range: TRAINING_ONSET_RANGE,
            delayed_onset_fraction: (0.5, 0.7),
            amplitude_scale_range: TRAINING_SCALE_RANGE,
            polymorphism: 0.25,
        }
    }

    fn unseen(name: &str, amps: [f64; DIM], speed: f64, evasion: Evasion) -> Self {
        FamilyTemplate {
            onset_range: UNSEEN_ONSET_RANGE,
            amplitude_scale_range: UNSEEN_SCALE_RANGE,
            ..Self::training(name, amps, speed, evasion)
        }
    }

    /// The built-in catalog of training and unseen families.
    pub fn builtin(name: &str) -> Option<Self> {
        use Evasion::*;
        //                     ent    unif   write  rw     file   crypto mem    net
        let t = match name {
            "lockbit3" => Self::training(name, [0.40, 0.30, 0.30, -0.20, 0.30, 0.30, 0.05, 0.00], 10.0, None),
            "blackcat" => Self::training(name, [0.00, 0.03, 0.08, -0.05, 0.07, 0.08, 0.03, 0.00], 8.0, EntropyObfuscated),
            "hive" => Self::training(name, [0.00, 0.00, 0.00, 0.00, 0.00, 0.12, 0.14, 0.02], 6.0, MemoryResident),
            "conti" => FamilyTemplate {
                periodicity: Some([0.0, 0.0, 48.0, 0.0, 48.0, 0.0, 0.0, 0.0]),
                ..Self::training(name, [0.38, 0.28, 0.28, -0.18, 0.34, 0.22, 0.04, 0.06], 6.0, None)
            },
            "babuk" => Self::training(name, [0.36, 0.26, 0.24, -0.20, 0.26, 0.26, 0.00, 0.00], 4.0, Delayed),
            "royal" => Self::unseen(name, [0.30, 0.20, 0.34, -0.30, 0.40, 0.20, 0.08, 0.00], 14.0, None),
            "quantum" => Self::unseen(name, [0.42, 0.30, 0.40, -0.10, 0.20, 0.34, 0.10, 0.00], 20.0, None),
            "play" => Self::unseen(name, [0.10, 0.05, 0.10, 0.00, 0.10, 0.30, 0.30, 0.05], 5.0, MemoryResident),
            _ => return Option::None,
        };
        Some(t)
    }

    /// Draws one concrete profile for a trace of `length` windows.
    pub fn sample_profile(&self, length: usize, onset_shift: usize, rng: &mut ChaCha8Rng) -> FamilyProfile {
        let onset = if self.evasion == Evasion::Delayed {
            let lo = (self.delayed_onset_fraction.0 * length as f64).ceil() as usize;
            let hi = ((self.delayed_onset_fraction.1 * length as f64) as usize).max(lo);
            rng.random_range(lo..=hi)
        } else {
            rng.random_range(self.onset_range.0..=self.onset_range.1)
        };
        let onset = (onset + onset_shift).min(length.saturating_sub(2));
        let (slo, shi) = self.amplitude_scale_range;
        let scale = slo + (shi - slo) * rng.random::<f64>();
        let amps = self
            .base_amplitudes
            .iter()
            .map(|a| {
                let jitter = 1.0 + self.polymorphism * (2.0 * rng.random::<f64>() - 1.0);
                a * scale * jitter
            })
            .collect();
        FamilyProfile {
            name: self.name.clone(),
            onset_window: onset,
            channel_amplitudes: amps,
            enc_speed: self.enc_speed,
            evasion: self.evasion,
            periodicity: self.periodicity.map(|p| p.to_vec()),
            amplitude_scale: scale,
        }
    }
}

// ---------------------------------------------------------------------------
// Action schedule and the benign process.

fn centered_effects() -> [[f64; DIM]; ACTION_ALPHABET_SIZE] {
    let weights: Vec<f64> = (0..ACTION_ALPHABET_SIZE)
        .map(|a| {
            let (lo, hi) = SEGMENT_DURATIONS[a];
            BENIGN_MIX[a] * (lo + hi) as f64 / 2.0
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut out = ACTION_EFFECTS;
    for j in 0..DIM {
        let mean: f64 = (0..ACTION_ALPHABET_SIZE)
            .map(|a| weights[a] / total * ACTION_EFFECTS[a][j])
            .sum();
        for row in out.iter_mut() {
            row[j] -= mean;
        }
    }
    out
}

fn pick(mix: &[f64; ACTION_ALPHABET_SIZE], u: f64) -> usize {
    let mut acc = 0.0;
    for (a, p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    ACTION_ALPHABET_SIZE - 1
}

/// Semi-Markov action schedule of `count` actions. Segments starting at or
/// after `switch_at` draw from `after` instead of the benign mix; both use the
/// same two uniforms per segment.
fn action_schedule(
    count: usize,
    switch_at: Option<(usize, &[f64; ACTION_ALPHABET_SIZE])>,
    rng: &mut ChaCha8Rng,
) -> Vec<ActionCode> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u_action: f64 = rng.random();
        let u_len: f64 = rng.random();
        let mix = match switch_at {
            Some((at, after)) if out.len() >= at => after,
            _ => &BENIGN_MIX,
        };
        let a = pick(mix, u_action);
        let (lo, hi) = SEGMENT_DURATIONS[a];
        let dur = lo + ((u_len * (hi - lo + 1) as f64) as usize).min(hi - lo);
        for _ in 0..dur.min(count - out.len()) {
            out.push(ActionCode(a as u8));
        }
    }
    out
}

fn simulate_benign(length: usize, d: usize, cfg: &BenignConfig, actions: &[ActionCode], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let effects = centered_effects();
    let mut out = Vec::with_capacity(length * d);
    let mut x: Vec<f64> = (0..d)
        .map(|j| {
            let e: f64 = StandardNormal.sample(rng);
            cfg.baseline[j] + cfg.noise_scale * cfg.stationary_sd[j] * e
        })
        .collect();
    out.extend_from_slice(&x);
    for a in actions.iter().take(length - 1) {
        for j in 0..d {
            let e: f64 = StandardNormal.sample(rng);
            let target = cfg.baseline[j] + cfg.activity_scale * effects[a.index()][j];
            x[j] += (1.0 - cfg.phi) * (target - x[j]) + cfg.noise_scale * cfg.innovation_sd(j) * e;
        }
        out.extend_from_slice(&x);
    }
    out
}

fn check_dims(length: usize, d: usize, window_dt: f64) -> Result<()> {
    if length < 2 {
        return Err(NestError::InvalidConfig(format!("trace length must be >= 2, got {length}")));
    }
    if d == 0 || d > DIM {
        return Err(NestError::InvalidConfig(format!("state dimension must be in 1..={DIM}, got {d}")));
    }
    if !(window_dt > 0.0) {
        return Err(NestError::InvalidConfig(format!("window_dt must be positive, got {window_dt}")));
    }
    Ok(())
}

/// Benign trace with the default benign configuration.
pub fn gen_benign(length: usize, d: usize, window_dt: f64, seed: u64) -> Result<StateTrace> {
    gen_benign_with(length, d, window_dt, seed, &BenignConfig::default())
}

pub fn gen_benign_with(length: usize, d: usize, window_dt: f64, seed: u64, cfg: &BenignConfig) -> Result<StateTrace> {
    check_dims(length, d, window_dt)?;
    cfg.validate(d)?;
    let actions = action_schedule(length - 1, None, &mut rng_for(seed, "actions", 0));
    let states = simulate_benign(length, d, cfg, &actions, &mut rng_for(seed, "noise", 0));
    Ok(StateTrace {
        id: format!("benign-{seed:016x}"),
        order: 0,
        label: Label::Benign,
        family: BENIGN_FAMILY.into(),
        window_dt,
        dim: d,
        states,
        actions,
    })
}

pub fn gen_ransomware(profile: &FamilyProfile, length: usize, d: usize, window_dt: f64, seed: u64) -> Result<StateTrace> {
    gen_ransomware_with(profile, length, d, window_dt, seed, &BenignConfig::default(), &RansomDynamics::default())
}

pub fn gen_ransomware_with(
    profile: &FamilyProfile,
    length: usize,
    d: usize,
    window_dt: f64,
    seed: u64,
    benign: &BenignConfig,
    dynamics: &RansomDynamics,
) -> Result<StateTrace> {
    check_dims(length, d, window_dt)?;
    benign.validate(d)?;
    profile.validate(length, d)?;
    if profile.name == BENIGN_FAMILY {
        return Err(NestError::InvalidConfig("ransomware profile cannot use the benign family tag".into()));
    }
    let onset = profile.onset_window;
    let actions = action_schedule(length - 1, Some((onset, profile.mix())), &mut rng_for(seed, "actions", 0));
    let mut states = simulate_benign(length, d, benign, &actions, &mut rng_for(seed, "noise", 0));
    let mut burst = rng_for(seed, "burst", 0);
    let amps: Vec<f64> = (0..d).map(|j| dynamics.effective_amplitude(profile, j)).collect();
    let ent = Channel::ByteEntropy.index();
    for t in (onset + 1)..length {
        let env = dynamics.envelope(profile, t);
        let row = &mut states[t * d..(t + 1) * d];
        for j in 0..d {
            let xi: f64 = StandardNormal.sample(&mut burst);
            if profile.channel_amplitudes[j] == 0.0 {
                continue;
            }
            let modulation = match &profile.periodicity {
                Some(p) if p[j] > 0.0 => {
                    let phase = 2.0 * std::f64::consts::PI * (t - onset) as f64 / p[j];
                    1.0 - dynamics.periodic_depth * (1.0 - phase.cos()) / 2.0
                }
                _ => 1.0,
            };
            row[j] += env * amps[j] * modulation
                + env * dynamics.burst_gain * benign.noise_scale * benign.innovation_sd(j) * xi;
        }
        if profile.evasion == Evasion::EntropyObfuscated && ent < d {
            row[ent] = row[ent].min(benign.baseline[ent] + dynamics.entropy_clamp_margin);
        }
    }
    Ok(StateTrace {
        id: format!("{}-{seed:016x}", profile.name),
        order: 0,
        label: Label::Ransomware,
        family: profile.name.clone(),
        window_dt,
        dim: d,
        states,
        actions,
    })
}

// ---------------------------------------------------------------------------
// Dataset composition.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyCount {
    pub name: String,
    pub count: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionSpec {
    pub families: Vec<FamilyCount>,
    pub benign_count: usize,
    /// Inclusive range of benign trace lengths.
    pub benign_length: (usize, usize),
    pub seed: u64,
    pub scale: f64,
    pub window_dt: f64,
    pub d: usize,
    /// Added to every sampled onset window (clamped to the trace).
    pub onset_shift: usize,
}

impl Default for CompositionSpec {
    fn default() -> Self {
        Self::table_i(1.0, 0)
    }
}

/// `floor(x + 0.5)`: halves round up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

impl CompositionSpec {
    /// The reference composition: LockBit 3.0 750 x 2048, BlackCat 620 x 1984,
    /// Hive 580 x 2112, Conti 500 x 1920, Babuk 450 x 1856, benign 2500 of
    /// variable length.
    pub fn table_i(scale: f64, seed: u64) -> Self {
        let fam = |name: &str, count, length| FamilyCount {
            name: name.into(),
            count,
            length,
        };
        CompositionSpec {
            families: vec![
                fam("lockbit3", 750, 2048),
                fam("blackcat", 620, 1984),
                fam("hive", 580, 2112),
                fam("conti", 500, 1920),
                fam("babuk", 450, 1856),
            ],
            benign_count: 2500,
            benign_length: (1856, 2112),
            seed,
            scale,
            window_dt: DEFAULT_WINDOW_DT,
            d: DIM,
            onset_shift: 0,
        }
    }

    pub fn scaled(&self, count: usize) -> usize {
        round_half_up(count as f64 * self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NestError::InvalidConfig(m));
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if !(self.window_dt > 0.0) {
            return bad(format!("window_dt must be positive, got {}", self.window_dt));
        }
        if self.d == 0 || self.d > DIM {
            return bad(format!("d must be in 1..={DIM}, got {}", self.d));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.families {
            if FamilyTemplate::builtin(&f.name).is_none() {
                return bad(format!("unknown family {:?}", f.name));
            }
            if !seen.insert(f.name.as_str()) {
                return bad(format!("family {:?} listed twice", f.name));
            }
            if self.scaled(f.count) < 1 {
                return bad(format!("family {} scales to zero traces", f.name));
            }
            if f.length < MIN_TRACE_LEN {
                return bad(format!("family {} length {} < {MIN_TRACE_LEN}", f.name, f.length));
            }
        }
        if self.scaled(self.benign_count) < 1 {
            return bad("benign count scales to zero traces".into());
        }
        let (lo, hi) = self.benign_length;
        if lo < MIN_TRACE_LEN || hi < lo {
            return bad(format!("benign length range ({lo}, {hi}) invalid"));
        }
        Ok(())
    }
}

/// Preprocessing tags per family, mirroring the reference composition table.
pub fn family_tags(name: &str) -> FamilyTags {
    let no_denoise = matches!(name, "conti" | "babuk");
    FamilyTags {
        denoise: !no_denoise,
        range: if no_denoise { [0.0, 1.0] } else { [-1.0, 1.0] },
        evasion: FamilyTemplate::builtin(name).map(|t| t.evasion.name().to_string()),
    }
}

struct Job<'a> {
    template: Option<&'a FamilyTemplate>,
    family: String,
    index: usize,
    length: usize,
}

fn run_jobs(jobs: Vec<Job<'_>>, seed: u64, window_dt: f64, d: usize, onset_shift: usize) -> Result<Vec<StateTrace>> {
    jobs.into_par_iter()
        .map(|job| {
            // Per-trace seed: derive_seed(global, family, index).
            let trace_seed = derive_seed(seed, &job.family, job.index as u64);
            let mut trace = match job.template {
                None => gen_benign(job.length, d, window_dt, trace_seed)?,
                Some(t) => {
                    let mut prng = rng_for(trace_seed, "profile", 0);
                    let profile = t.sample_profile(job.length, onset_shift, &mut prng);
                    gen_ransomware(&profile, job.length, d, window_dt, trace_seed)?
                }
            };
            trace.id = format!("{}-{:05}", job.family, job.index);
            trace.order = job.index as u64;
            Ok(trace)
        })
        .collect()
}

/// Generates the full composition. Trace `i` of family `f` uses seed
/// `derive_seed(spec.seed, f, i)`; benign lengths use
/// `derive_seed(spec.seed, "benign-length", i)`.
pub fn gen_dataset(spec: &CompositionSpec) -> Result<Dataset> {
    spec.validate()?;
    let templates: Vec<FamilyTemplate> = spec
        .families
        .iter()
        .map(|f| FamilyTemplate::builtin(&f.name).expect("validated"))
        .collect();
    let mut jobs = Vec::new();
    for (f, t) in spec.families.iter().zip(&templates) {
        for i in 0..spec.scaled(f.count) {
            jobs.push(Job {
                template: Some(t),
                family: f.name.clone(),
                index: i,
                length: f.length,
            });
        }
    }
    let (lo, hi) = spec.benign_length;
    for i in 0..spec.scaled(spec.benign_count) {
        let length = rng_for(spec.seed, "benign-length", i as u64).random_range(lo..=hi);
        jobs.push(Job {
            template: None,
            family: BENIGN_FAMILY.into(),
            index: i,
            length,
        });
    }
    let traces = run_jobs(jobs, spec.seed, spec.window_dt, spec.d, spec.onset_shift)?;
    let mut tags: BTreeMap<String, FamilyTags> =
        spec.families.iter().map(|f| (f.name.clone(), family_tags(&f.name))).collect();
    tags.insert(BENIGN_FAMILY.into(), family_tags(BENIGN_FAMILY));
    Dataset::new(traces, spec.d, spec.seed, tags)
}

/// Ransomware-only dataset of families held out from training. Profiles use
/// [`UNSEEN_ONSET_RANGE`] and [`UNSEEN_SCALE_RANGE`].
pub fn gen_unseen_families(names: &[&str], count: usize, length: usize, spec: &CompositionSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 || length < MIN_TRACE_LEN {
        return Err(NestError::InvalidConfig("unseen families need count >= 1 and length >= 64".into()));
    }
    let mut jobs = Vec::new();
    let mut tags = BTreeMap::new();
    for name in names {
        if spec.families.iter().any(|f| f.name == *name) || *name == BENIGN_FAMILY {
            return Err(NestError::InvalidConfig(format!("unseen family {name:?} collides with a training family")));
        }
        let template = FamilyTemplate::builtin(name)
            .filter(|t| t.amplitude_scale_range == UNSEEN_SCALE_RANGE)
            .ok_or_else(|| NestError::InvalidConfig(format!("{name:?} is not an unseen family")))?;
        tags.insert(name.to_string(), family_tags(name));
        for i in 0..count {
            jobs.push((template.clone(), i));
        }
    }
    let jobs: Vec<Job<'_>> = jobs
        .iter()
        .map(|(t, i)| Job {
            template: Some(t),
            family: t.name.clone(),
            index: *i,
            length,
        })
        .collect();
    let traces = run_jobs(jobs, seed, spec.window_dt, spec.d, spec.onset_shift)?;
    Dataset::new(traces, spec.d, seed, tags)
}

/// One speed-controlled evaluation set: `per_speed` ransomware traces cycling
/// over the training families with the speed overridden, plus `per_speed`
/// benign traces.
#[derive(Debug, Clone)]
pub struct SpeedSet {
    pub speed_mbps: f64,
    pub traces: Vec<StateTrace>,
}

pub fn gen_speed_sweep(speeds: &[f64], per_speed: usize, length: usize, spec: &CompositionSpec, seed: u64) -> Result<Vec<SpeedSet>> {
    spec.validate()?;
    if per_speed == 0 || length < MIN_TRACE_LEN {
        return Err(NestError::InvalidConfig("sweep needs per_speed >= 1 and length >= 64".into()));
    }
    let templates: Vec<FamilyTemplate> = spec
        .families
        .iter()
        .map(|f| FamilyTemplate::builtin(&f.name).expect("validated"))
        .collect();
    if templates.is_empty() {
        return Err(NestError::InvalidConfig("sweep needs at least one training family".into()));
    }
    speeds
        .iter()
        .enumerate()
        .map(|(k, &speed)| {
            if !(speed > 0.0) {
                return Err(NestError::InvalidConfig(format!("sweep speed must be positive, got {speed}")));
            }
            let set_seed = derive_seed(seed, "speed-set", k as u64);
            let jobs: Vec<(Option<FamilyTemplate>, usize)> = (0..per_speed)
                .map(|i| {
                    let mut t = templates[i % templates.len()].clone();
                    t.enc_speed = speed;
                    (Some(t), i)
                })
                .chain((0..per_speed).map(|i| (None, i)))
                .collect();
            let mut traces: Vec<StateTrace> = jobs
                .par_iter()
                .map(|(t, i)| {
                    let family = t.as_ref().map_or(BENIGN_FAMILY, |t| t.name.as_str());
                    let trace_seed = derive_seed(set_seed, family, *i as u64);
                    let mut trace = match t {
                        None => gen_benign(length, spec.d, spec.window_dt, trace_seed)?,
                        Some(t) => {
                            let profile = t.sample_profile(length, 0, &mut rng_for(trace_seed, "profile", 0));
                            gen_ransomware(&profile, length, spec.d, spec.window_dt, trace_seed)?
                        }
                    };
                    trace.id = format!("sweep{k}-{family}-{i:05}");
                    trace.order = *i as u64;
                    Ok(trace)
                })
                .collect::<Result<_>>()?;
            traces.sort_by(|a, b| a.id.cmp(&b.id));
            Ok(SpeedSet { speed_mbps: speed, traces })
        })
        .collect()
}
