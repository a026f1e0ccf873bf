use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::multiple_choice_loss_grad;
use crate::encoder::{accumulate_adapter_grads, TransformerEncoder};
use crate::error::{Error, Result};
use crate::evalharness::Scorer;
use crate::lora::LoraSet;
use crate::numerics::{Parameter, Tensor};
use crate::xcross::{PoolerScorer, XCrossModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Base,
    Lora,
    Xcross,
}

impl PhaseKind {
    pub fn tag(self) -> &'static str {
        match self {
            PhaseKind::Base => "base",
            PhaseKind::Lora => "lora",
            PhaseKind::Xcross => "xcross",
        }
    }
}

/// One of the three training phases, seen by the generic trainer.
pub trait TrainablePhase: Scorer {
    fn kind(&self) -> PhaseKind;

    /// Scores every candidate prompt, computes the multiple-choice loss and
    /// accumulates gradients of the trainable set. Returns the loss.
    fn accumulate(&mut self, prompts: &[Vec<u32>], positive: usize) -> Result<f64>;

    fn visit_trainable(&self, f: &mut dyn FnMut(&str, &Parameter));

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter));

    /// Hashes of everything this phase must leave untouched.
    fn frozen_hashes(&self) -> BTreeMap<String, String>;
}

/// A frozen (or base) encoder with optional adapters and a head.
pub struct SingleDomainModel<'a> {
    pub base: &'a TransformerEncoder,
    pub lora: Option<&'a LoraSet>,
    pub head: &'a PoolerScorer,
}

impl Scorer for SingleDomainModel<'_> {
    fn score(&self, tokens: &[u32]) -> Result<f64> {
        let cls = self.base.encode_cls(tokens, self.lora)?;
        Ok(self.head.forward(&cls).0)
    }
}

fn head_visit(head: &PoolerScorer, f: &mut dyn FnMut(&str, &Parameter)) {
    for (name, p) in head.params() {
        f(&format!("head.{name}"), p);
    }
}

fn head_visit_mut(head: &mut PoolerScorer, f: &mut dyn FnMut(&str, &mut Parameter)) {
    for (name, p) in head.params_mut() {
        f(&format!("head.{name}"), p);
    }
}

fn cls_gradient(len: usize, d: usize, dh0: &[f64]) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    t.row_mut(0).copy_from_slice(dh0);
    t
}

/// Full encoder plus a temporary head, trained on pooled source data.
pub struct BasePhase {
    pub encoder: TransformerEncoder,
    pub head: PoolerScorer,
}

impl BasePhase {
    pub fn new(encoder: TransformerEncoder, head: PoolerScorer) -> Result<Self> {
        if encoder.is_frozen() {
            return Err(Error::Usage("base pretraining needs a trainable encoder".into()));
        }
        Ok(Self { encoder, head })
    }

    /// Freezes the encoder and drops the temporary head.
    pub fn finish(mut self) -> TransformerEncoder {
        self.encoder.freeze();
        self.encoder
    }
}

impl Scorer for BasePhase {
    fn score(&self, tokens: &[u32]) -> Result<f64> {
        SingleDomainModel {
            base: &self.encoder,
            lora: None,
            head: &self.head,
        }
        .score(tokens)
    }
}

impl TrainablePhase for BasePhase {
    fn kind(&self) -> PhaseKind {
        PhaseKind::Base
    }

    fn accumulate(&mut self, prompts: &[Vec<u32>], positive: usize) -> Result<f64> {
        let mut fwd = Vec::with_capacity(prompts.len());
        for p in prompts {
            let (top, cache) = self.encoder.encode_with_cache(p, None, true)?;
            let (s, hc) = self.head.forward(top.row(0));
            fwd.push((s, cache, hc, top.rows()));
        }
        let scores: Vec<f64> = fwd.iter().map(|f| f.0).collect();
        let (loss, dscores) = multiple_choice_loss_grad(&scores, positive)?;
        let d = self.encoder.config().d_model;
        for ((_, cache, hc, len), ds) in fwd.iter().zip(dscores) {
            let dh0 = self.head.backward(hc, ds)?;
            let mut wg = Vec::new();
            let dx0 = self
                .encoder
                .backward_full(cache, cls_gradient(*len, d, &dh0), None, None, Some(&mut wg));
            for (l, g) in &wg {
                self.encoder.accumulate_layer_grads(*l, g)?;
            }
            let tokens = TransformerEncoder::cache_tokens(cache).to_vec();
            self.encoder.accumulate_embedding_grads(&tokens, &dx0);
        }
        Ok(loss)
    }

    fn visit_trainable(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.encoder.for_each_param(|name, p| f(&format!("encoder.{name}"), p));
        head_visit(&self.head, f);
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.encoder.for_each_param_mut(|name, p| f(&format!("encoder.{name}"), p));
        head_visit_mut(&mut self.head, f);
    }

    fn frozen_hashes(&self) -> BTreeMap<String, String> {
        BTreeMap::new()
    }
}

/// A new adapter set and head on top of a frozen base.
pub struct LoraPhase<'a> {
    pub base: &'a TransformerEncoder,
    pub lora: LoraSet,
    pub head: PoolerScorer,
}

impl<'a> LoraPhase<'a> {
    pub fn new(base: &'a TransformerEncoder, lora: LoraSet, head: PoolerScorer) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::Usage("adapter training requires a frozen base encoder".into()));
        }
        if lora.is_frozen() {
            return Err(Error::Usage("adapter set is already frozen".into()));
        }
        lora.validate_for(base.config())?;
        head.validate(base.config().d_model)?;
        Ok(Self { base, lora, head })
    }

    /// Freezes and returns the trained adapters and head.
    pub fn finish(mut self) -> (LoraSet, PoolerScorer) {
        self.lora.freeze();
        for (_, p) in self.head.params_mut() {
            p.freeze();
        }
        (self.lora, self.head)
    }
}

impl Scorer for LoraPhase<'_> {
    fn score(&self, tokens: &[u32]) -> Result<f64> {
        SingleDomainModel {
            base: self.base,
            lora: Some(&self.lora),
            head: &self.head,
        }
        .score(tokens)
    }
}

impl TrainablePhase for LoraPhase<'_> {
    fn kind(&self) -> PhaseKind {
        PhaseKind::Lora
    }

    fn accumulate(&mut self, prompts: &[Vec<u32>], positive: usize) -> Result<f64> {
        let mut fwd = Vec::with_capacity(prompts.len());
        for p in prompts {
            let (top, cache) = self.base.encode_with_cache(p, Some(&self.lora), true)?;
            let (s, hc) = self.head.forward(top.row(0));
            fwd.push((s, cache, hc, top.rows()));
        }
        let scores: Vec<f64> = fwd.iter().map(|f| f.0).collect();
        let (loss, dscores) = multiple_choice_loss_grad(&scores, positive)?;
        let d = self.base.config().d_model;
        for ((_, cache, hc, len), ds) in fwd.iter().zip(dscores) {
            let dh0 = self.head.backward(hc, ds)?;
            let mut ag = Vec::new();
            self.base
                .backward_full(cache, cls_gradient(*len, d, &dh0), Some(&self.lora), Some(&mut ag), None);
            for (l, g) in &ag {
                accumulate_adapter_grads(&mut self.lora, *l, g)?;
            }
        }
        Ok(loss)
    }

    fn visit_trainable(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        for a in self.lora.adapters() {
            let tag = format!("lora.layer{}.{}", a.target.layer, a.target.projection.tag());
            f(&format!("{tag}.a"), &a.a);
            f(&format!("{tag}.b"), &a.b);
        }
        head_visit(&self.head, f);
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for a in self.lora.adapters_mut() {
            let tag = format!("lora.layer{}.{}", a.target.layer, a.target.projection.tag());
            f(&format!("{tag}.a"), &mut a.a);
            f(&format!("{tag}.b"), &mut a.b);
        }
        head_visit_mut(&mut self.head, f);
    }

    fn frozen_hashes(&self) -> BTreeMap<String, String> {
        BTreeMap::from([("base".to_string(), self.base.content_hash())])
    }
}

/// X-Cross integrators, mixer and head over frozen sources.
pub struct XCrossPhase<'a> {
    pub base: &'a TransformerEncoder,
    pub sources: Vec<&'a LoraSet>,
    pub model: XCrossModel,
}

impl<'a> XCrossPhase<'a> {
    pub fn new(base: &'a TransformerEncoder, sources: Vec<&'a LoraSet>, model: XCrossModel) -> Result<Self> {
        model.check(base, &sources)?;
        Ok(Self { base, sources, model })
    }

    pub fn finish(self) -> XCrossModel {
        self.model
    }
}

/// Borrowed view for evaluating a trained X-Cross model.
pub struct XCrossView<'a> {
    pub base: &'a TransformerEncoder,
    pub sources: Vec<&'a LoraSet>,
    pub model: &'a XCrossModel,
}

impl<'a> XCrossView<'a> {
    pub fn new(base: &'a TransformerEncoder, sources: Vec<&'a LoraSet>, model: &'a XCrossModel) -> Result<Self> {
        model.check(base, &sources)?;
        Ok(Self { base, sources, model })
    }
}

impl Scorer for XCrossView<'_> {
    fn score(&self, tokens: &[u32]) -> Result<f64> {
        self.model.score_unchecked(self.base, &self.sources, tokens)
    }
}

impl Scorer for XCrossPhase<'_> {
    fn score(&self, tokens: &[u32]) -> Result<f64> {
        self.model.score_unchecked(self.base, &self.sources, tokens)
    }
}

impl TrainablePhase for XCrossPhase<'_> {
    fn kind(&self) -> PhaseKind {
        PhaseKind::Xcross
    }

    fn accumulate(&mut self, prompts: &[Vec<u32>], positive: usize) -> Result<f64> {
        let mut fwd = Vec::with_capacity(prompts.len());
        for p in prompts {
            fwd.push(self.model.forward_train(self.base, &self.sources, p)?);
        }
        let scores: Vec<f64> = fwd.iter().map(|f| f.0).collect();
        let (loss, dscores) = multiple_choice_loss_grad(&scores, positive)?;
        for ((_, cache), ds) in fwd.iter().zip(dscores) {
            self.model.backward(self.base, &self.sources, cache, ds)?;
        }
        Ok(loss)
    }

    fn visit_trainable(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.model.for_each_param(|name, p| f(&name, p));
    }

    fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.model.for_each_param_mut(|name, p| f(&name, p));
    }

    fn frozen_hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::from([("base".to_string(), self.base.content_hash())]);
        for s in &self.sources {
            out.insert(format!("source.{}", s.domain), s.content_hash());
        }
        out
    }
}
