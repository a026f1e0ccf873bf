//! A small BERT-style encoder (post-layer-norm blocks, learned absolute
//! positions) that exposes every per-layer hidden state.

mod block;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use block::EncoderLayer;
pub(crate) use block::{AdapterGrads, BlockCache, LayerAdapters, LayerGrads, LAYER_PARAM_NAMES};

use crate::error::{Error, Result};
use crate::lora::{LoraSet, Projection};
use crate::numerics::{Parameter, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            d_model: 32,
            num_heads: 4,
            d_ff: 64,
            vocab_size: 256,
            max_len: 256,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// A zero-layer encoder is accepted and only produces the embedding sum.
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads ({}) must divide d_model ({})",
                self.num_heads, self.d_model
            )));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::Config("d_ff, vocab_size and max_len must be positive".into()));
        }
        if !(self.ln_eps >= 0.0) {
            return Err(Error::Config("ln_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Hidden states `h⁽⁰⁾ … h⁽ᴸ⁾`, each `len×d`. Entry 0 is the embedding sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub states: Vec<Tensor>,
}

impl LayerTrace {
    pub fn last(&self) -> &Tensor {
        self.states.last().expect("trace always holds the embedding output")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerEncoder {
    config: EncoderConfig,
    pub token_embedding: Parameter,
    pub position_embedding: Parameter,
    pub layers: Vec<EncoderLayer>,
}

/// Forward cache for a full pass over all layers.
pub(crate) struct EncodeCache {
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
}

const EMBED_STD: f64 = 1.0;
const POSITION_STD: f64 = 0.5;

impl TransformerEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.d_model, config.d_ff);
        let linear = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Parameter::trainable(Tensor::randn(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng))
        };
        let zeros = |n: usize| Parameter::trainable(Tensor::zeros(&[n]));
        let ones = |n: usize| Parameter::trainable(Tensor::filled(&[n], 1.0));
        let token_embedding = Parameter::trainable(Tensor::randn(&[config.vocab_size, d], EMBED_STD, &mut rng));
        let position_embedding = Parameter::trainable(Tensor::randn(&[config.max_len, d], POSITION_STD, &mut rng));
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer {
                wq: linear(d, d, &mut rng),
                bq: zeros(d),
                wk: linear(d, d, &mut rng),
                bk: zeros(d),
                wv: linear(d, d, &mut rng),
                bv: zeros(d),
                wo: linear(d, d, &mut rng),
                bo: zeros(d),
                w1: linear(f, d, &mut rng),
                b1: zeros(f),
                w2: linear(d, f, &mut rng),
                b2: zeros(d),
                ln1_gain: ones(d),
                ln1_bias: zeros(d),
                ln2_gain: ones(d),
                ln2_bias: zeros(d),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// Checks deserialized weights against the stored configuration.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, f) = (c.d_model, c.d_ff);
        if self.token_embedding.shape() != [c.vocab_size, d] || self.position_embedding.shape() != [c.max_len, d] {
            return Err(Error::shape("embedding", self.token_embedding.shape(), &[c.vocab_size, d]));
        }
        if self.layers.len() != c.num_layers {
            return Err(Error::Config(format!(
                "{} layers stored, config says {}",
                self.layers.len(),
                c.num_layers
            )));
        }
        for layer in &self.layers {
            let expect: [&[usize]; 16] = [
                &[d, d],
                &[d],
                &[d, d],
                &[d],
                &[d, d],
                &[d],
                &[d, d],
                &[d],
                &[f, d],
                &[f],
                &[d, f],
                &[d],
                &[d],
                &[d],
                &[d],
                &[d],
            ];
            for (p, shape) in layer.params().iter().zip(expect) {
                if p.shape() != shape {
                    return Err(Error::shape("encoder layer", p.shape(), shape));
                }
            }
        }
        Ok(())
    }

    /// Marks every weight, including embeddings, as non-trainable.
    pub fn freeze(&mut self) {
        self.for_each_param_mut(|_, p| p.freeze());
    }

    pub fn is_frozen(&self) -> bool {
        let mut frozen = true;
        self.for_each_param(|_, p| frozen &= !p.trainable);
        frozen
    }

    pub fn for_each_param(&self, mut f: impl FnMut(String, &Parameter)) {
        f("token_embedding".into(), &self.token_embedding);
        f("position_embedding".into(), &self.position_embedding);
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, p) in LAYER_PARAM_NAMES.iter().zip(layer.params()) {
                f(format!("layer{}.{name}", l + 1), p);
            }
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(String, &mut Parameter)) {
        f("token_embedding".into(), &mut self.token_embedding);
        f("position_embedding".into(), &mut self.position_embedding);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, p) in LAYER_PARAM_NAMES.iter().zip(layer.params_mut()) {
                f(format!("layer{}.{name}", l + 1), p);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, p| n += p.numel());
        n
    }

    /// SHA-256 over all weights; embeddings included.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.for_each_param(|name, p| {
            h.update(name.as_bytes());
            p.value.hash_into(&mut h);
        });
        hex::encode(h.finalize())
    }

    fn dims(&self, len: usize, rows: usize) -> block::Dims {
        block::Dims {
            len,
            rows,
            d: self.config.d_model,
            heads: self.config.num_heads,
            d_ff: self.config.d_ff,
            eps: self.config.ln_eps,
        }
    }

    fn check_adapters(&self, adapters: Option<&LoraSet>) -> Result<()> {
        if let Some(set) = adapters {
            set.validate_for(&self.config)?;
        }
        Ok(())
    }

    /// Token plus position embedding, `len×d`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > c.max_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                c.max_len
            )));
        }
        let d = c.d_model;
        let mut out = Tensor::zeros(&[tokens.len(), d]);
        for (t, &tok) in tokens.iter().enumerate() {
            if tok as usize >= c.vocab_size {
                return Err(Error::Input(format!("token id {tok} out of range (vocab {})", c.vocab_size)));
            }
            let e = self.token_embedding.value.row(tok as usize);
            let p = self.position_embedding.value.row(t);
            for ((o, a), b) in out.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        Ok(out)
    }

    /// Runs all blocks and returns every hidden state.
    pub fn encode(&self, tokens: &[u32], adapters: Option<&LoraSet>) -> Result<LayerTrace> {
        self.check_adapters(adapters)?;
        let mut states = Vec::with_capacity(self.config.num_layers + 1);
        states.push(self.embed(tokens)?);
        for l in 1..=self.config.num_layers {
            let next = self.step_unchecked(states.last().expect("non-empty"), l, adapters, None, false).0;
            states.push(next);
        }
        Ok(LayerTrace { states })
    }

    /// Final `[CLS]` state only; the top block skips the other rows.
    pub fn encode_cls(&self, tokens: &[u32], adapters: Option<&LoraSet>) -> Result<Vec<f64>> {
        self.check_adapters(adapters)?;
        let mut x = self.embed(tokens)?;
        let top = self.config.num_layers;
        for l in 1..=top {
            x = self.step_unchecked(&x, l, adapters, (l == top).then_some(1), false).0;
        }
        Ok(x.row(0).to_vec())
    }

    /// Applies block `l` (1-based) to `x`.
    pub fn encode_step(&self, x: &Tensor, l: usize, adapters: Option<&LoraSet>) -> Result<Tensor> {
        if l == 0 || l > self.config.num_layers {
            return Err(Error::Input(format!(
                "layer index {l} out of range 1..={}",
                self.config.num_layers
            )));
        }
        if !x.is_matrix() || x.cols() != self.config.d_model {
            return Err(Error::shape("encode_step", x.shape(), &[x.rows(), self.config.d_model]));
        }
        if x.rows() == 0 || x.rows() > self.config.max_len {
            return Err(Error::Input(format!("sequence length {} out of range", x.rows())));
        }
        self.check_adapters(adapters)?;
        Ok(self.step_unchecked(x, l, adapters, None, false).0)
    }

    /// Applies block `l`; with `rows = Some(r)` only the first `r` output
    /// rows are computed (all tokens still serve as keys and values).
    pub(crate) fn step_unchecked(
        &self,
        x: &Tensor,
        l: usize,
        adapters: Option<&LoraSet>,
        rows: Option<usize>,
        keep_cache: bool,
    ) -> (Tensor, Option<BlockCache>) {
        let len = x.rows();
        let rows = rows.unwrap_or(len).min(len);
        let (out, cache) = block::forward(
            &self.layers[l - 1],
            LayerAdapters::from_set(adapters, l),
            x.data(),
            &self.dims(len, rows),
            keep_cache,
        );
        let out = Tensor::from_vec(&[rows, self.config.d_model], out).expect("block output shape");
        (out, cache)
    }

    /// Backward through block `l`. Returns the input gradient along with
    /// base-weight and adapter gradients when requested.
    pub(crate) fn step_backward(
        &self,
        l: usize,
        cache: &BlockCache,
        dy: &Tensor,
        adapters: Option<&LoraSet>,
        want_weights: bool,
        want_adapters: bool,
    ) -> (Tensor, Option<LayerGrads>, Option<AdapterGrads>) {
        let len = cache.input_rows(self.config.d_model);
        let (dx, lg, ag) = block::backward(
            &self.layers[l - 1],
            LayerAdapters::from_set(adapters, l),
            cache,
            dy.data(),
            &self.dims(len, dy.rows()),
            want_weights,
            want_adapters,
        );
        let dx = Tensor::from_vec(&[len, self.config.d_model], dx).expect("block grad shape");
        (dx, lg, ag)
    }

    /// Full forward keeping what backward needs. With `cls_only` the top
    /// block computes just the `[CLS]` row, so the result is `1×d`.
    pub(crate) fn encode_with_cache(
        &self,
        tokens: &[u32],
        adapters: Option<&LoraSet>,
        cls_only: bool,
    ) -> Result<(Tensor, EncodeCache)> {
        let mut x = self.embed(tokens)?;
        let mut blocks = Vec::with_capacity(self.config.num_layers);
        let top = self.config.num_layers;
        for l in 1..=top {
            let rows = (cls_only && l == top).then_some(1);
            let (next, cache) = self.step_unchecked(&x, l, adapters, rows, true);
            blocks.push(cache.expect("cache requested"));
            x = next;
        }
        Ok((
            x,
            EncodeCache {
                tokens: tokens.to_vec(),
                blocks,
            },
        ))
    }

    /// Backward from `d_top` (gradient w.r.t. the last hidden state).
    ///
    /// Base-weight gradients are only computed when the encoder is
    /// trainable; adapter gradients only when `adapter_grads` is given.
    pub(crate) fn backward_full(
        &self,
        cache: &EncodeCache,
        d_top: Tensor,
        adapters: Option<&LoraSet>,
        mut adapter_grads: Option<&mut Vec<(usize, AdapterGrads)>>,
        weight_grads: Option<&mut Vec<(usize, LayerGrads)>>,
    ) -> Tensor {
        let want_weights = weight_grads.is_some();
        let want_adapters = adapter_grads.is_some();
        let mut collected = Vec::new();
        let mut dx = d_top;
        for l in (1..=self.config.num_layers).rev() {
            let (d_in, lg, ag) =
                self.step_backward(l, &cache.blocks[l - 1], &dx, adapters, want_weights, want_adapters);
            if let Some(lg) = lg {
                collected.push((l, lg));
            }
            if let (Some(sink), Some(ag)) = (adapter_grads.as_deref_mut(), ag) {
                sink.push((l, ag));
            }
            dx = d_in;
        }
        if let Some(sink) = weight_grads {
            sink.extend(collected);
        }
        dx
    }

    pub(crate) fn accumulate_layer_grads(&mut self, l: usize, grads: &LayerGrads) -> Result<()> {
        let layer = &mut self.layers[l - 1];
        for (p, g) in layer.params_mut().into_iter().zip(&grads.0) {
            p.accumulate_slice(g)?;
        }
        Ok(())
    }

    /// Scatters the embedding-output gradient into both embedding tables.
    pub(crate) fn accumulate_embedding_grads(&mut self, tokens: &[u32], dx0: &Tensor) {
        let d = self.config.d_model;
        let tok_trainable = self.token_embedding.trainable;
        let pos_trainable = self.position_embedding.trainable;
        for (t, &tok) in tokens.iter().enumerate() {
            let g = dx0.row(t);
            if tok_trainable {
                let row = &mut self.token_embedding.grad.data_mut()[tok as usize * d..(tok as usize + 1) * d];
                row.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if pos_trainable {
                let row = &mut self.position_embedding.grad.data_mut()[t * d..(t + 1) * d];
                row.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub(crate) fn cache_tokens(cache: &EncodeCache) -> &[u32] {
        &cache.tokens
    }

    #[cfg(test)]
    pub(crate) fn attention_probs(cache: &BlockCache, head: usize, rows: usize, len: usize) -> &[f64] {
        block::attention_probs(cache, head, rows, len)
    }
}

/// Adds adapter gradients into the trainable adapters of `set`.
pub(crate) fn accumulate_adapter_grads(set: &mut LoraSet, l: usize, grads: &AdapterGrads) -> Result<()> {
    for (proj, g) in [(Projection::Query, &grads.query), (Projection::Value, &grads.value)] {
        if let Some((da, db)) = g {
            if let Some(a) = set.get_mut(crate::lora::LoraTarget { layer: l, projection: proj }) {
                a.a.accumulate_slice(da)?;
                a.b.accumulate_slice(db)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
