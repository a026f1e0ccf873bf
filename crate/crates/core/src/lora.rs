//! Low-rank adapters on the attention query and value projections.
//!
//! An adapter replaces `W·x` with `(W + s·A·B)·x` where `A` is `d×r`,
//! `B` is `r×d` and `s` is `alpha/rank` (default) or `alpha`.
//! `B` starts at zero so a fresh adapter leaves the base map unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::ops::dot;
use crate::numerics::{Parameter, Tensor};

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f64 = 32.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Value,
}

impl Projection {
    pub fn tag(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Value => "value",
        }
    }
}

/// How `alpha` turns into the multiplier on `A·B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraScaling {
    /// `alpha / rank`; with alpha=32, r=16 the multiplier is 2.
    #[default]
    AlphaOverRank,
    /// Literal `alpha`.
    Alpha,
}

impl LoraScaling {
    pub fn multiplier(self, alpha: f64, rank: usize) -> f64 {
        match self {
            LoraScaling::AlphaOverRank => alpha / rank as f64,
            LoraScaling::Alpha => alpha,
        }
    }
}

/// Which encoder projection an adapter attaches to. Layers are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LoraTarget {
    pub layer: usize,
    pub projection: Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    /// `d×r`
    pub a: Parameter,
    /// `r×d`
    pub b: Parameter,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn width(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Fresh adapter: `A ~ N(0, 0.02²)`, `B = 0`, deterministic in `seed`.
pub fn init_lora(target: LoraTarget, d: usize, rank: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    if rank == 0 || rank >= d {
        return Err(Error::Config(format!("lora rank {rank} must satisfy 1 <= r < d = {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LoraAdapter {
        target,
        a: Parameter::trainable(Tensor::randn(&[d, rank], INIT_STD, &mut rng)),
        b: Parameter::trainable(Tensor::zeros(&[rank, d])),
        alpha,
        rank,
    })
}

/// `(W + s·A·B)·x`, computed as `W·x + s·A·(B·x)`. Biases are not adapted.
pub fn lora_apply(w: &Tensor, adapter: &LoraAdapter, scaling: LoraScaling, x: &[f64]) -> Result<Vec<f64>> {
    let (a, b) = (&adapter.a.value, &adapter.b.value);
    if !w.is_matrix() || w.cols() != x.len() {
        return Err(Error::shape("lora_apply", w.shape(), &[x.len()]));
    }
    if a.shape() != [w.rows(), adapter.rank] || b.shape() != [adapter.rank, w.cols()] {
        return Err(Error::shape("lora_apply", a.shape(), b.shape()));
    }
    let s = scaling.multiplier(adapter.alpha, adapter.rank);
    let bx: Vec<f64> = (0..adapter.rank).map(|i| dot(b.row(i), x)).collect();
    Ok((0..w.rows())
        .map(|i| dot(w.row(i), x) + s * dot(a.row(i), &bx))
        .collect())
}

/// All adapters belonging to one source domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSet {
    pub domain: u16,
    pub scaling: LoraScaling,
    adapters: Vec<LoraAdapter>,
    frozen: bool,
}

impl LoraSet {
    pub fn new(domain: u16, scaling: LoraScaling) -> Self {
        Self {
            domain,
            scaling,
            adapters: Vec::new(),
            frozen: false,
        }
    }

    /// Query and value adapters on every encoder layer.
    pub fn for_encoder(
        domain: u16,
        config: &EncoderConfig,
        rank: usize,
        alpha: f64,
        scaling: LoraScaling,
        seed: u64,
    ) -> Result<Self> {
        let mut set = Self::new(domain, scaling);
        for layer in 1..=config.num_layers {
            for projection in [Projection::Query, Projection::Value] {
                let target = LoraTarget { layer, projection };
                let sub_seed = seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add((layer as u64) << 8 | projection as u64);
                set.insert(init_lora(target, config.d_model, rank, alpha, sub_seed)?)?;
            }
        }
        Ok(set)
    }

    pub fn insert(&mut self, adapter: LoraAdapter) -> Result<()> {
        if self.frozen {
            return Err(Error::Usage("cannot add adapters to a frozen set".into()));
        }
        if self.get(adapter.target).is_some() {
            return Err(Error::Config(format!(
                "duplicate adapter for layer {} {}",
                adapter.target.layer,
                adapter.target.projection.tag()
            )));
        }
        self.adapters.push(adapter);
        self.adapters.sort_by_key(|a| a.target);
        Ok(())
    }

    pub fn get(&self, target: LoraTarget) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    pub fn get_mut(&mut self, target: LoraTarget) -> Option<&mut LoraAdapter> {
        self.adapters.iter_mut().find(|a| a.target == target)
    }

    pub fn layer(&self, layer: usize, projection: Projection) -> Option<&LoraAdapter> {
        self.get(LoraTarget { layer, projection })
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [LoraAdapter] {
        &mut self.adapters
    }

    pub fn multiplier(&self, adapter: &LoraAdapter) -> f64 {
        self.scaling.multiplier(adapter.alpha, adapter.rank)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        for a in &mut self.adapters {
            a.a.freeze();
            a.b.freeze();
        }
    }

    /// Checks that every adapter fits an encoder of this shape.
    pub fn validate_for(&self, config: &EncoderConfig) -> Result<()> {
        for a in &self.adapters {
            if a.target.layer == 0 || a.target.layer > config.num_layers {
                return Err(Error::Config(format!("adapter layer {} out of range", a.target.layer)));
            }
            let d = config.d_model;
            if a.a.shape() != [d, a.rank] || a.b.shape() != [a.rank, d] {
                return Err(Error::shape("lora adapter", a.a.shape(), &[d, a.rank]));
            }
        }
        Ok(())
    }

    /// SHA-256 over every adapter's targets and exact weights.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.domain.to_le_bytes());
        for a in &self.adapters {
            h.update((a.target.layer as u64).to_le_bytes());
            h.update(a.target.projection.tag().as_bytes());
            h.update(a.alpha.to_le_bytes());
            a.a.value.hash_into(&mut h);
            a.b.value.hash_into(&mut h);
        }
        hex::encode(h.finalize())
    }
}

/// `Σ 2·r·d` over the adapters of a set.
pub fn trainable_lora_params(set: &LoraSet) -> usize {
    set.adapters.iter().map(|a| 2 * a.rank * a.width()).sum()
}

/// Parameter count for adapters on `matrices_per_layer` projections of
/// `layers` layers.
pub fn lora_param_count(d: usize, rank: usize, layers: usize, matrices_per_layer: usize) -> usize {
    2 * rank * d * layers * matrices_per_layer
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target() -> LoraTarget {
        LoraTarget {
            layer: 1,
            projection: Projection::Query,
        }
    }

    fn adapter(a: Tensor, b: Tensor, alpha: f64) -> LoraAdapter {
        let rank = a.cols();
        LoraAdapter {
            target: target(),
            a: Parameter::trainable(a),
            b: Parameter::trainable(b),
            alpha,
            rank,
        }
    }

    #[test]
    fn zero_b_or_alpha_gives_base_map() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let x = [0.7, -1.1];
        let base = vec![dot(w.row(0), &x), dot(w.row(1), &x)];
        let fresh = init_lora(target(), 2, 1, 32.0, 4).unwrap();
        assert_eq!(lora_apply(&w, &fresh, LoraScaling::AlphaOverRank, &x).unwrap(), base);
        let a = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let silent = adapter(a, b, 0.0);
        assert_eq!(lora_apply(&w, &silent, LoraScaling::AlphaOverRank, &x).unwrap(), base);
    }

    #[test]
    fn hand_evaluated_rank_one_update() {
        let w = Tensor::identity(2);
        let a = Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let ad = adapter(a, b, 1.0);
        let y = lora_apply(&w, &ad, LoraScaling::AlphaOverRank, &[3.0, 5.0]).unwrap();
        assert_eq!(y, vec![8.0, 5.0]);
    }

    #[test]
    fn literal_alpha_scaling_differs_from_alpha_over_rank() {
        assert_eq!(LoraScaling::AlphaOverRank.multiplier(32.0, 16), 2.0);
        assert_eq!(LoraScaling::Alpha.multiplier(32.0, 16), 32.0);
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = init_lora(target(), 8, 2, 32.0, 1).unwrap();
        let b = init_lora(target(), 8, 2, 32.0, 1).unwrap();
        let c = init_lora(target(), 8, 2, 32.0, 2).unwrap();
        assert_eq!(a.a.value, b.a.value);
        assert_ne!(a.a.value, c.a.value);
        assert!(a.b.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_must_be_below_width() {
        assert!(matches!(init_lora(target(), 4, 4, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(init_lora(target(), 4, 0, 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(lora_param_count(768, 16, 1, 1), 24576);
        assert_eq!(lora_param_count(768, 16, 12, 2), 589_824);
        assert_eq!(trainable_lora_params(&LoraSet::new(0, LoraScaling::default())), 0);
        let cfg = EncoderConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            max_len: 16,
            ln_eps: 1e-5,
        };
        let set = LoraSet::for_encoder(0, &cfg, 2, 4.0, LoraScaling::default(), 0).unwrap();
        assert_eq!(trainable_lora_params(&set), 4 * 2 * 2 * 8);
    }

    #[test]
    fn duplicate_targets_rejected() {
        let mut set = LoraSet::new(0, LoraScaling::default());
        set.insert(init_lora(target(), 4, 1, 1.0, 0).unwrap()).unwrap();
        assert!(set.insert(init_lora(target(), 4, 1, 1.0, 1).unwrap()).is_err());
    }

    #[test]
    fn lora_apply_is_linear_in_x() {
        let w = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, 0.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let a = Tensor::from_rows(&[vec![0.5], vec![-0.25], vec![1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 2.0, -1.0]]).unwrap();
        let ad = adapter(a, b, 1.0);
        let x = [1.0, 2.0, 3.0];
        let y = [-0.5, 0.25, 4.0];
        let sum: Vec<f64> = x.iter().zip(&y).map(|(p, q)| 2.0 * p + q).collect();
        let fx = lora_apply(&w, &ad, LoraScaling::Alpha, &x).unwrap();
        let fy = lora_apply(&w, &ad, LoraScaling::Alpha, &y).unwrap();
        let fs = lora_apply(&w, &ad, LoraScaling::Alpha, &sum).unwrap();
        for i in 0..3 {
            assert!((fs[i] - (2.0 * fx[i] + fy[i])).abs() < 1e-12);
        }
        assert_eq!(lora_apply(&w, &ad, LoraScaling::Alpha, &[0.0; 3]).unwrap(), vec![0.0; 3]);
    }
}
