//! Layer-wise integration of several LoRA-adapted encoders.
//!
//! `n` frozen source encoders run side by side over one prompt. At every
//! integrated layer their per-token states are concatenated, mapped to a
//! small vector of scaling factors `z`, and each stream is refined with
//! direct and interaction terms from the others. The final states are mixed
//! with learned weights, pooled at `[CLS]` and scored.

mod head;
mod model;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use head::{pool, score, HeadCache, PoolerScorer};
pub use model::{XCrossCache, XCrossModel};

use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tensor};

pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XCrossConfig {
    pub n: usize,
    pub beta: f64,
    pub gamma: f64,
    /// 1-based, ascending, contiguous and ending at the top layer.
    pub integrated_layers: Vec<usize>,
    pub d: usize,
}

impl XCrossConfig {
    /// Integrates the top `count` of `num_layers` layers.
    pub fn top(n: usize, d: usize, num_layers: usize, count: usize) -> Result<Self> {
        if count == 0 || count > num_layers {
            return Err(Error::Config(format!(
                "cannot integrate {count} of {num_layers} layers"
            )));
        }
        let cfg = Self {
            n,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            integrated_layers: (num_layers - count + 1..=num_layers).collect(),
            d,
        };
        cfg.validate(num_layers)?;
        Ok(cfg)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("need at least 2 source domains, got {}", self.n)));
        }
        if self.d == 0 {
            return Err(Error::Config("model width must be positive".into()));
        }
        if !self.beta.is_finite() || !self.gamma.is_finite() {
            return Err(Error::Config("beta and gamma must be finite".into()));
        }
        let layers = &self.integrated_layers;
        let contiguous = layers.windows(2).all(|w| w[1] == w[0] + 1);
        if layers.is_empty() || !contiguous || layers[0] == 0 || *layers.last().unwrap() != num_layers {
            return Err(Error::Config(format!(
                "integrated layers {layers:?} must be a non-empty contiguous block ending at layer {num_layers}"
            )));
        }
        Ok(())
    }

    pub fn first_integrated(&self) -> usize {
        self.integrated_layers[0]
    }

    pub fn is_integrated(&self, layer: usize) -> bool {
        self.integrated_layers.contains(&layer)
    }

    pub fn layout(&self) -> ZLayout {
        ZLayout { n: self.n }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZKind {
    Direct,
    Interaction,
}

/// Ordering of the `2n(n−1)` scaling factors in `z`.
///
/// Domains are 0-based here. For each domain `m` ascending there is a block
/// of `2(n−1)` entries: first the direct factors `z[m′]` for every `m′ ≠ m`
/// ascending, then the interaction factors `z[m, m′]` in the same order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ZLayout {
    pub n: usize,
}

impl ZLayout {
    pub const DESCRIPTION: &'static str = "z has 2n(n-1) entries; for each domain m ascending, a block of 2(n-1): \
         the n-1 direct factors z[m'] for m' != m ascending, then the n-1 interaction factors z[m,m'] for m' != m ascending";

    pub fn len(&self) -> usize {
        2 * self.n * (self.n - 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slot(m: usize, other: usize) -> usize {
        if other < m {
            other
        } else {
            other - 1
        }
    }

    pub fn index(&self, m: usize, other: usize, kind: ZKind) -> usize {
        debug_assert!(m != other && m < self.n && other < self.n);
        let base = m * 2 * (self.n - 1);
        match kind {
            ZKind::Direct => base + Self::slot(m, other),
            ZKind::Interaction => base + self.n - 1 + Self::slot(m, other),
        }
    }

    /// `(m, m′, kind)` for each index of `z`, in order.
    pub fn entries(&self) -> Vec<(usize, usize, ZKind)> {
        let mut out = Vec::with_capacity(self.len());
        for m in 0..self.n {
            for kind in [ZKind::Direct, ZKind::Interaction] {
                for other in (0..self.n).filter(|&o| o != m) {
                    out.push((m, other, kind));
                }
            }
        }
        out
    }
}

/// `W_concat` of one integrated layer, `2n(n−1) × n·d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorLayer {
    pub layer: usize,
    pub w_concat: Parameter,
}

impl IntegratorLayer {
    pub fn zeros(layer: usize, n: usize, d: usize) -> Self {
        Self {
            layer,
            w_concat: Parameter::trainable(Tensor::zeros(&[2 * n * (n - 1), n * d])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalMixer {
    pub w: Parameter,
}

impl FinalMixer {
    pub fn uniform(n: usize) -> Self {
        Self {
            w: Parameter::trainable(Tensor::filled(&[n], 1.0 / n as f64)),
        }
    }

    pub fn one_hot(n: usize, m: usize) -> Self {
        let mut w = Tensor::zeros(&[n]);
        w.data_mut()[m] = 1.0;
        Self {
            w: Parameter::trainable(w),
        }
    }
}

/// `z = W_concat · [h_1; …; h_n]` for one token.
pub fn compute_z(w_concat: &Tensor, hs: &[&[f64]]) -> Result<Vec<f64>> {
    let n = hs.len();
    let d = hs.first().map_or(0, |h| h.len());
    if n < 2 || hs.iter().any(|h| h.len() != d) {
        return Err(Error::shape("compute_z", &[n, d], &[hs.iter().map(|h| h.len()).max().unwrap_or(0)]));
    }
    if w_concat.shape() != [2 * n * (n - 1), n * d] {
        return Err(Error::shape("compute_z", w_concat.shape(), &[2 * n * (n - 1), n * d]));
    }
    let hcat: Vec<f64> = hs.iter().flat_map(|h| h.iter().copied()).collect();
    crate::numerics::matvec(w_concat, &hcat)
}

/// Refined state of domain `m` for one token:
/// `h_m + Σ_{m′≠m} (β·z[m′]·h_{m′} + γ·z[m,m′]·(h_m − h_{m′}))`.
pub fn refine(hs: &[&[f64]], z: &[f64], m: usize, beta: f64, gamma: f64) -> Result<Vec<f64>> {
    let n = hs.len();
    let layout = ZLayout { n };
    if m >= n || n < 2 {
        return Err(Error::Input(format!("domain {m} out of range for {n} streams")));
    }
    if z.len() != layout.len() {
        return Err(Error::shape("refine", &[z.len()], &[layout.len()]));
    }
    let d = hs[m].len();
    if hs.iter().any(|h| h.len() != d) {
        return Err(Error::shape("refine", &[d], &[hs.iter().map(|h| h.len()).max().unwrap_or(0)]));
    }
    let mut out = hs[m].to_vec();
    refine_into(hs, z, m, beta, gamma, &layout, &mut out);
    Ok(out)
}

/// Adds the refinement terms for domain `m` onto `out` (which holds `h_m`).
pub(crate) fn refine_into(hs: &[&[f64]], z: &[f64], m: usize, beta: f64, gamma: f64, layout: &ZLayout, out: &mut [f64]) {
    let hm = hs[m];
    for (other, ho) in hs.iter().enumerate() {
        if other == m {
            continue;
        }
        let direct = beta * z[layout.index(m, other, ZKind::Direct)];
        let inter = gamma * z[layout.index(m, other, ZKind::Interaction)];
        for ((o, a), b) in out.iter_mut().zip(hm).zip(ho.iter()) {
            *o += direct * b + inter * (a - b);
        }
    }
}

/// Trainable-parameter accounting for an X-Cross model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub integrator_per_layer: usize,
    pub integrated_layers: usize,
    pub integrator_total: usize,
    pub mixer: usize,
    pub head: usize,
    pub total: usize,
}

pub fn integrator_params_per_layer(n: usize, d: usize) -> usize {
    2 * n * (n - 1) * n * d
}

pub fn trainable_param_count(config: &XCrossConfig) -> ParamBreakdown {
    let per_layer = integrator_params_per_layer(config.n, config.d);
    let layers = config.integrated_layers.len();
    let head = config.d * config.d + 2 * config.d + 1;
    ParamBreakdown {
        integrator_per_layer: per_layer,
        integrated_layers: layers,
        integrator_total: per_layer * layers,
        mixer: config.n,
        head,
        total: per_layer * layers + config.n + head,
    }
}

/// Seeded generator for head initialization.
pub(crate) fn head_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164)
}
