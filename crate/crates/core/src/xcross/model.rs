use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::head::{HeadCache, PoolerScorer};
use super::{refine_into, FinalMixer, IntegratorLayer, XCrossConfig, ZKind, ZLayout};
use crate::encoder::{BlockCache, TransformerEncoder};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::numerics::ops::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{Parameter, Tensor};

/// Trainable part of an X-Cross model. The base encoder and the source
/// adapters are borrowed at call time and never modified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XCrossModel {
    pub config: XCrossConfig,
    pub integrators: Vec<IntegratorLayer>,
    pub mixer: FinalMixer,
    pub head: PoolerScorer,
}

/// Everything the backward pass needs from one scored prompt.
pub struct XCrossCache {
    len: usize,
    /// Per integrated layer: pre-refinement states concatenated per token
    /// (`len × n·d`) and the scaling factors (`len × 2n(n−1)`).
    integrated: Vec<(Vec<f64>, Vec<f64>)>,
    /// Block caches for the layers above the first integrated one, per stream.
    blocks: Vec<Vec<BlockCache>>,
    /// `[CLS]` row of each stream's final refined state.
    final_cls: Vec<Vec<f64>>,
    head: HeadCache,
}

impl XCrossModel {
    pub fn new(config: XCrossConfig, seed: u64) -> Result<Self> {
        let top = config.integrated_layers.last().copied().unwrap_or(0);
        config.validate(top)?;
        let integrators = config
            .integrated_layers
            .iter()
            .map(|&l| IntegratorLayer::zeros(l, config.n, config.d))
            .collect();
        Ok(Self {
            mixer: FinalMixer::uniform(config.n),
            head: PoolerScorer::new(config.d, seed),
            integrators,
            config,
        })
    }

    /// Checks the model against the frozen components it will run on.
    pub fn check(&self, base: &TransformerEncoder, sources: &[&LoraSet]) -> Result<()> {
        let c = &self.config;
        c.validate(base.num_layers())?;
        if c.d != base.config().d_model {
            return Err(Error::Config(format!(
                "X-Cross width {} does not match encoder width {}",
                c.d,
                base.config().d_model
            )));
        }
        if sources.len() != c.n {
            return Err(Error::Config(format!("expected {} source adapters, got {}", c.n, sources.len())));
        }
        if !base.is_frozen() {
            return Err(Error::Usage("base encoder must be frozen".into()));
        }
        for s in sources {
            if !s.is_frozen() {
                return Err(Error::Usage(format!("source adapter for domain {} is not frozen", s.domain)));
            }
            s.validate_for(base.config())?;
        }
        let layers: Vec<usize> = self.integrators.iter().map(|i| i.layer).collect();
        if layers != c.integrated_layers {
            return Err(Error::Config(format!(
                "integrators cover layers {layers:?}, configuration says {:?}",
                c.integrated_layers
            )));
        }
        let rows = 2 * c.n * (c.n - 1);
        for i in &self.integrators {
            if i.w_concat.shape() != [rows, c.n * c.d] {
                return Err(Error::shape("W_concat", i.w_concat.shape(), &[rows, c.n * c.d]));
            }
        }
        if self.mixer.w.shape() != [c.n] {
            return Err(Error::shape("mixer", self.mixer.w.shape(), &[c.n]));
        }
        self.head.validate(c.d)
    }

    pub fn for_each_param(&self, mut f: impl FnMut(String, &Parameter)) {
        for i in &self.integrators {
            f(format!("integrator.layer{}.w_concat", i.layer), &i.w_concat);
        }
        f("mixer.w".into(), &self.mixer.w);
        for (name, p) in self.head.params() {
            f(format!("head.{name}"), p);
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(String, &mut Parameter)) {
        for i in &mut self.integrators {
            f(format!("integrator.layer{}.w_concat", i.layer), &mut i.w_concat);
        }
        f("mixer.w".into(), &mut self.mixer.w);
        for (name, p) in self.head.params_mut() {
            f(format!("head.{name}"), p);
        }
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, p| {
            if p.trainable {
                n += p.numel()
            }
        });
        n
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        self.for_each_param(|name, p| {
            h.update(name.as_bytes());
            p.value.hash_into(&mut h);
        });
        hex::encode(h.finalize())
    }

    fn needs_encoder_backward(&self) -> bool {
        self.config.beta != 0.0 || self.config.gamma != 0.0
    }

    /// Runs the `n` streams with integration; returns the refined final
    /// states of every stream.
    pub(crate) fn run_streams(
        &self,
        base: &TransformerEncoder,
        sources: &[&LoraSet],
        tokens: &[u32],
        cls_top: bool,
        mut cache: Option<(&mut Vec<(Vec<f64>, Vec<f64>)>, &mut Vec<Vec<BlockCache>>)>,
    ) -> Result<Vec<Tensor>> {
        let c = &self.config;
        let (n, d) = (c.n, c.d);
        let layout = c.layout();
        let zlen = layout.len();
        let first = c.first_integrated();
        let keep_blocks = cache.is_some() && self.needs_encoder_backward();
        let x0 = base.embed(tokens)?;
        let mut streams = vec![x0; n];
        let top = base.num_layers();
        for l in 1..=top {
            let rows = (cls_top && l == top).then_some(1);
            let mut layer_blocks = Vec::new();
            for (m, stream) in streams.iter_mut().enumerate() {
                let (y, bc) = base.step_unchecked(stream, l, Some(sources[m]), rows, keep_blocks && l > first);
                *stream = y;
                if let Some(bc) = bc {
                    layer_blocks.push(bc);
                }
            }
            if let Some((_, blocks)) = cache.as_mut() {
                if !layer_blocks.is_empty() {
                    blocks.push(layer_blocks);
                }
            }
            if l < first {
                continue;
            }
            let len = streams[0].rows();
            let w = &self.integrators[l - first].w_concat.value;
            let mut hcat = vec![0.0; len * n * d];
            for t in 0..len {
                for (m, s) in streams.iter().enumerate() {
                    hcat[t * n * d + m * d..t * n * d + (m + 1) * d].copy_from_slice(s.row(t));
                }
            }
            let mut z = vec![0.0; len * zlen];
            gemm_nt(&hcat, w.data(), len, n * d, zlen, &mut z, false);
            for t in 0..len {
                let row = &hcat[t * n * d..(t + 1) * n * d];
                let hs: Vec<&[f64]> = row.chunks(d).collect();
                let zt = &z[t * zlen..(t + 1) * zlen];
                for (m, s) in streams.iter_mut().enumerate() {
                    refine_into(&hs, zt, m, c.beta, c.gamma, &layout, s.row_mut(t));
                }
            }
            if let Some((integrated, _)) = cache.as_mut() {
                integrated.push((hcat, z));
            }
        }
        Ok(streams)
    }

    fn mix(&self, streams: &[Tensor]) -> Tensor {
        let mut out = Tensor::zeros(streams[0].shape());
        for (s, &wm) in streams.iter().zip(self.mixer.w.value.data()) {
            out.axpy(wm, s).expect("streams share a shape");
        }
        out
    }

    /// Final hidden states `Σ_m w_m · h̃_m⁽ᴸ⁾`, `len×d`.
    pub fn forward(&self, base: &TransformerEncoder, sources: &[&LoraSet], tokens: &[u32]) -> Result<Tensor> {
        self.check(base, sources)?;
        let streams = self.run_streams(base, sources, tokens, false, None)?;
        Ok(self.mix(&streams))
    }

    pub fn score(&self, base: &TransformerEncoder, sources: &[&LoraSet], tokens: &[u32]) -> Result<f64> {
        self.score_unchecked(base, sources, tokens)
    }

    /// Skips the frozen-component checks; callers validate once up front.
    pub(crate) fn score_unchecked(
        &self,
        base: &TransformerEncoder,
        sources: &[&LoraSet],
        tokens: &[u32],
    ) -> Result<f64> {
        let streams = self.run_streams(base, sources, tokens, true, None)?;
        let h0 = self.mix_cls(&streams);
        Ok(self.head.forward(&h0).0)
    }

    fn mix_cls(&self, streams: &[Tensor]) -> Vec<f64> {
        let mut h0 = vec![0.0; self.config.d];
        for (s, &wm) in streams.iter().zip(self.mixer.w.value.data()) {
            crate::numerics::ops::axpy_slice(&mut h0, wm, s.row(0));
        }
        h0
    }

    pub(crate) fn forward_train(
        &self,
        base: &TransformerEncoder,
        sources: &[&LoraSet],
        tokens: &[u32],
    ) -> Result<(f64, XCrossCache)> {
        let mut integrated = Vec::new();
        let mut blocks = Vec::new();
        let streams = self.run_streams(base, sources, tokens, true, Some((&mut integrated, &mut blocks)))?;
        let h0 = self.mix_cls(&streams);
        let (s, head) = self.head.forward(&h0);
        let cache = XCrossCache {
            len: streams[0].rows(),
            integrated,
            blocks,
            final_cls: streams.iter().map(|s| s.row(0).to_vec()).collect(),
            head,
        };
        Ok((s, cache))
    }

    /// Accumulates gradients of `dscore · score` into the trainable parts.
    pub(crate) fn backward(
        &mut self,
        base: &TransformerEncoder,
        sources: &[&LoraSet],
        cache: &XCrossCache,
        dscore: f64,
    ) -> Result<()> {
        let dh0 = self.head.backward(&cache.head, dscore)?;
        let dw: Vec<f64> = cache
            .final_cls
            .iter()
            .map(|h| h.iter().zip(&dh0).map(|(a, b)| a * b).sum())
            .collect();
        self.mixer.w.accumulate_slice(&dw)?;
        if !self.needs_encoder_backward() {
            return Ok(());
        }

        let c = &self.config;
        let (n, d) = (c.n, c.d);
        let layout = c.layout();
        let zlen = layout.len();
        let first = c.first_integrated();
        let (beta, gamma) = (c.beta, c.gamma);

        // Gradient w.r.t. each stream's refined state at the current layer.
        let mut dstreams: Vec<Tensor> = (0..n)
            .map(|m| {
                let mut t = Tensor::zeros(&[cache.len, d]);
                let wm = self.mixer.w.value.data()[m];
                t.row_mut(0).iter_mut().zip(&dh0).for_each(|(o, g)| *o = wm * g);
                t
            })
            .collect();

        for l in (first..=base.num_layers()).rev() {
            let (hcat, z) = &cache.integrated[l - first];
            let len = hcat.len() / (n * d);
            let mut dz = vec![0.0; len * zlen];
            let mut dhcat = vec![0.0; len * n * d];
            for t in 0..len {
                let row = &hcat[t * n * d..(t + 1) * n * d];
                let zt = &z[t * zlen..(t + 1) * zlen];
                let dzt = &mut dz[t * zlen..(t + 1) * zlen];
                let dh = &mut dhcat[t * n * d..(t + 1) * n * d];
                for m in 0..n {
                    let g = dstreams[m].row(t);
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let hm = &row[m * d..(m + 1) * d];
                    for (dv, gv) in dh[m * d..(m + 1) * d].iter_mut().zip(g) {
                        *dv += gv;
                    }
                    for other in (0..n).filter(|&o| o != m) {
                        let ho = &row[other * d..(other + 1) * d];
                        let di = layout.index(m, other, ZKind::Direct);
                        let ii = layout.index(m, other, ZKind::Interaction);
                        let mut g_direct = 0.0;
                        let mut g_inter = 0.0;
                        for k in 0..d {
                            g_direct += g[k] * ho[k];
                            g_inter += g[k] * (hm[k] - ho[k]);
                        }
                        dzt[di] += beta * g_direct;
                        dzt[ii] += gamma * g_inter;
                        let (sd, si) = (beta * zt[di], gamma * zt[ii]);
                        for k in 0..d {
                            dh[other * d + k] += (sd - si) * g[k];
                            dh[m * d + k] += si * g[k];
                        }
                    }
                }
            }
            let integrator = &mut self.integrators[l - first];
            if integrator.w_concat.trainable {
                gemm_tn(&dz, hcat, len, zlen, n * d, integrator.w_concat.grad.data_mut(), true);
            }
            gemm_nn(&dz, integrator.w_concat.value.data(), len, zlen, n * d, &mut dhcat, true);
            if l == first {
                break;
            }
            for (m, ds) in dstreams.iter_mut().enumerate() {
                let mut dy = Tensor::zeros(&[len, d]);
                for t in 0..len {
                    dy.row_mut(t).copy_from_slice(&dhcat[t * n * d + m * d..t * n * d + (m + 1) * d]);
                }
                let bc = &cache.blocks[l - first - 1][m];
                *ds = base.step_backward(l, bc, &dy, Some(sources[m]), false, false).0;
            }
        }
        Ok(())
    }
}

impl ZLayout {
    /// Human-readable `(m, m′, kind)` per row of `W_concat`, for headers.
    pub fn row_labels(&self) -> Vec<String> {
        self.entries()
            .into_iter()
            .map(|(m, o, k)| match k {
                ZKind::Direct => format!("direct[{m}<-{o}]"),
                ZKind::Interaction => format!("interaction[{m},{o}]"),
            })
            .collect()
    }
}
