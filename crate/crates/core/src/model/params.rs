use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NestError, Result};
use crate::seed::rng_for;

/// Shape of the network: state dimension, action alphabet, residual blocks
/// and hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d: usize,
    pub actions: usize,
    pub blocks: usize,
    pub width: usize,
}

impl Architecture {
    pub fn new(d: usize, actions: usize, blocks: usize, width: usize) -> Result<Self> {
        if d < 1 || actions < 1 || width < 1 {
            return Err(NestError::InvalidConfig(format!(
                "architecture needs d, actions, width >= 1 (got {d}, {actions}, {width})"
            )));
        }
        Ok(Architecture { d, actions, blocks, width })
    }

    /// Width of the residual stream: state plus one-hot action.
    pub fn stream(&self) -> usize {
        self.d + self.actions
    }

    pub fn pooled(&self) -> usize {
        2 * self.d
    }

    fn block_len(&self) -> usize {
        let (m, w) = (self.stream(), self.width);
        w * m + w + m * w + m
    }

    fn flow_len(&self) -> usize {
        let (d, w) = (self.d, self.width);
        w * d + w + d * w + d
    }

    pub fn param_count(&self) -> usize {
        self.blocks * self.block_len() + self.flow_len() + self.pooled() + 1
    }

    pub fn block_offsets(&self, r: usize) -> BlockOffsets {
        let (m, w) = (self.stream(), self.width);
        let base = r * self.block_len();
        BlockOffsets {
            w1: base,
            b1: base + w * m,
            w2: base + w * m + w,
            b2: base + w * m + w + m * w,
        }
    }

    pub fn flow_offsets(&self) -> FlowOffsets {
        let (d, w) = (self.d, self.width);
        let base = self.blocks * self.block_len();
        FlowOffsets {
            f1: base,
            c1: base + w * d,
            f2: base + w * d + w,
            c2: base + w * d + w + d * w,
        }
    }

    pub fn head_offsets(&self) -> (usize, usize) {
        let base = self.blocks * self.block_len() + self.flow_len();
        (base, base + self.pooled())
    }
}

/// Offsets of one residual block: `W1` is `width x stream`, `W2` is
/// `stream x width`, both row-major.
#[derive(Debug, Clone, Copy)]
pub struct BlockOffsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Offsets of the flow network: `F1` is `width x d`, `F2` is `d x width`.
#[derive(Debug, Clone, Copy)]
pub struct FlowOffsets {
    pub f1: usize,
    pub c1: usize,
    pub f2: usize,
    pub c2: usize,
}

/// All learnable weights in one flat vector laid out by [`Architecture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        ModelParams {
            values: vec![0.0; arch.param_count()],
            arch,
        }
    }

    /// Seeded initialization. The input layers of every block and of the
    /// flow network are scaled-normal; block output layers and the head start
    /// at zero, so an untrained model predicts persistence (next = current).
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut p = Self::zeros(arch);
        let mut rng = rng_for(seed, "init", 0);
        let (m, w, d) = (arch.stream(), arch.width, arch.d);
        let fill = |vals: &mut [f64], sd: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let dist = Normal::new(0.0, sd).expect("positive sd");
            for v in vals {
                *v = dist.sample(rng);
            }
        };
        for r in 0..arch.blocks {
            let o = arch.block_offsets(r);
            fill(&mut p.values[o.w1..o.b1], (1.0 / m as f64).sqrt(), &mut rng);
        }
        let f = arch.flow_offsets();
        fill(&mut p.values[f.f1..f.c1], (1.0 / d as f64).sqrt(), &mut rng);
        fill(&mut p.values[f.f2..f.c2], (1.0 / w as f64).sqrt(), &mut rng);
        p
    }

    /// Uniform random parameters in `[-scale, scale]`; used by gradient checks.
    pub fn random(arch: Architecture, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        for v in &mut p.values {
            *v = scale * (2.0 * rng.random::<f64>() - 1.0);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn check(&self) -> Result<()> {
        if self.values.len() != self.arch.param_count() {
            return Err(NestError::Shape(format!(
                "parameter vector has {} values, architecture needs {}",
                self.values.len(),
                self.arch.param_count()
            )));
        }
        if !self.is_finite() {
            return Err(NestError::Shape("parameters contain non-finite values".into()));
        }
        Ok(())
    }
}
