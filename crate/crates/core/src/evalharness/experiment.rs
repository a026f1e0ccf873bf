//! End-to-end transfer experiments: pretraining, source adapters, zero-shot
//! evaluation, source selection and X-Cross training on a target domain.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, EvalReport};
use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::recdata::{
    encode_instances, generate_domains, sub_rng, Catalog, EncodedInstance, GeneratedData, GeneratorConfig,
    MultipleChoiceInstance, Split, DEFAULT_TRUNCATE,
};
use crate::training::{
    pretrain_base, train_lora, train_xcross, DomainAdapter, LoraSettings, SingleDomainModel, TrainOutcome,
    TrainingConfig, XCrossView,
};
use crate::xcross::{XCrossConfig, XCrossModel, DEFAULT_BETA, DEFAULT_GAMMA};

/// X-Cross variants compared in ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// β = 0, γ = 0: sources are only mixed at the end.
    NoLayers,
    /// γ = 0, β = 0.5.
    NoInteractions,
    /// β = 0, γ = 0.4.
    NoExperts,
}

impl Variant {
    pub const ABLATIONS: [Variant; 3] = [Variant::NoLayers, Variant::NoInteractions, Variant::NoExperts];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "xcross",
            Variant::NoLayers => "xcross-layers",
            Variant::NoInteractions => "xcross-interactions",
            Variant::NoExperts => "xcross-experts",
        }
    }

    /// `(β, γ)` given the full model's values.
    pub fn scaling(self, beta: f64, gamma: f64) -> (f64, f64) {
        match self {
            Variant::Full => (beta, gamma),
            Variant::NoLayers => (0.0, 0.0),
            Variant::NoInteractions => (DEFAULT_BETA, 0.0),
            Variant::NoExperts => (0.0, DEFAULT_GAMMA),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches('-').to_ascii_lowercase().as_str() {
            "full" | "xcross" => Ok(Variant::Full),
            "layers" | "no-layers" => Ok(Variant::NoLayers),
            "interactions" | "no-interactions" => Ok(Variant::NoInteractions),
            "experts" | "no-experts" => Ok(Variant::NoExperts),
            _ => Err(Error::Usage(format!(
                "unknown variant `{s}` (expected -Layers, -Interactions or -Experts)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrationSettings {
    pub beta: f64,
    pub gamma: f64,
    /// Number of top layers to integrate; defaults to the top three quarters.
    pub layers: Option<usize>,
}

impl Default for IntegrationSettings {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            layers: None,
        }
    }
}

impl IntegrationSettings {
    pub fn layer_count(&self, num_layers: usize) -> usize {
        self.layers.unwrap_or((3 * num_layers).div_ceil(4))
    }

    pub fn config(&self, n: usize, encoder: &EncoderConfig, variant: Variant) -> Result<XCrossConfig> {
        let mut c = XCrossConfig::top(n, encoder.d_model, encoder.num_layers, self.layer_count(encoder.num_layers))?;
        (c.beta, c.gamma) = variant.scaling(self.beta, self.gamma);
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub target: u16,
    pub num_sources: usize,
    /// Target training instances used for X-Cross; all when absent.
    pub target_train: Option<usize>,
    /// Evaluate on at most this many test instances per domain.
    pub max_test: Option<usize>,
    pub truncate: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            target: 2,
            num_sources: 2,
            target_train: Some(500),
            max_test: None,
            truncate: DEFAULT_TRUNCATE,
        }
    }
}

/// Everything that determines a transfer experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub lora: LoraSettings,
    pub pretrain: TrainingConfig,
    pub source: TrainingConfig,
    pub xcross: TrainingConfig,
    pub integration: IntegrationSettings,
    pub experiment: ExperimentSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            lora: LoraSettings::default(),
            pretrain: TrainingConfig::default(),
            source: TrainingConfig::default(),
            xcross: TrainingConfig::default(),
            integration: IntegrationSettings::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

const TAG_STAGE: u64 = 0x5747;

fn stage_seed(seed: u64, stage: u64) -> u64 {
    use rand::RngCore;
    sub_rng(seed, &[TAG_STAGE, stage]).next_u64()
}

impl ExperimentConfig {
    /// Copies the top-level seed into the generator and derives one seed per
    /// training stage from it.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.generator.seed = self.seed;
        c.pretrain.seed = stage_seed(self.seed, 1);
        c.source.seed = stage_seed(self.seed, 2);
        c.xcross.seed = stage_seed(self.seed, 3);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        for t in [&self.pretrain, &self.source, &self.xcross] {
            t.validate()?;
        }
        let e = &self.experiment;
        if e.target as usize >= self.generator.domains {
            return Err(Error::Config(format!("target domain {} does not exist", e.target)));
        }
        if e.num_sources < 2 || e.num_sources >= self.generator.domains {
            return Err(Error::Config(format!(
                "num_sources must be in [2, {}], got {}",
                self.generator.domains - 1,
                e.num_sources
            )));
        }
        if self.encoder.vocab_size < self.generator.vocab().size() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} is smaller than the generated vocabulary ({})",
                self.encoder.vocab_size,
                self.generator.vocab().size()
            )));
        }
        let (r, d) = (self.lora.rank, self.encoder.d_model);
        if r == 0 || r >= d {
            return Err(Error::Config(format!("lora rank {r} must satisfy 1 <= r < d = {d}")));
        }
        self.integration
            .config(e.num_sources, &self.encoder, Variant::Full)
            .map(|_| ())
    }

    pub fn source_domains(&self) -> Vec<u16> {
        (0..self.generator.domains as u16)
            .filter(|&m| m != self.experiment.target)
            .collect()
    }
}

/// Encoded splits of one domain.
#[derive(Clone, Debug, Default)]
pub struct DomainSplits {
    pub train: Vec<EncodedInstance>,
    pub valid: Vec<EncodedInstance>,
    pub test: Vec<EncodedInstance>,
}

impl DomainSplits {
    pub fn get(&self, split: Split) -> &[EncodedInstance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Prompt-encoded data of every domain.
pub struct Workbench {
    pub catalog: Catalog,
    pub domains: Vec<DomainSplits>,
    /// Instances dropped because their prompts exceed `max_len`.
    pub rejected: usize,
}

impl Workbench {
    pub fn new(
        catalog: Catalog,
        instances: &[Vec<MultipleChoiceInstance>],
        truncate: usize,
        max_len: usize,
    ) -> Result<Self> {
        let mut rejected = 0;
        let mut domains = Vec::with_capacity(instances.len());
        for per_domain in instances {
            let mut splits = DomainSplits::default();
            for split in [Split::Train, Split::Valid, Split::Test] {
                let subset: Vec<_> = per_domain.iter().filter(|i| i.split == split).cloned().collect();
                let (enc, r) = encode_instances(&subset, &catalog, truncate, max_len)?;
                rejected += r;
                match split {
                    Split::Train => splits.train = enc,
                    Split::Valid => splits.valid = enc,
                    Split::Test => splits.test = enc,
                }
            }
            domains.push(splits);
        }
        Ok(Self {
            catalog,
            domains,
            rejected,
        })
    }

    pub fn from_generated(data: GeneratedData, truncate: usize, max_len: usize) -> Result<Self> {
        Self::new(data.catalog, &data.instances, truncate, max_len)
    }

    pub fn domain(&self, m: u16) -> Result<&DomainSplits> {
        self.domains
            .get(m as usize)
            .ok_or_else(|| Error::Input(format!("domain {m} has no data")))
    }
}

fn capped(v: &[EncodedInstance], cap: Option<usize>) -> &[EncodedInstance] {
    &v[..cap.map_or(v.len(), |c| c.min(v.len()))]
}

/// Pooled training data of several domains.
pub fn pooled(wb: &Workbench, domains: &[u16], split: Split) -> Result<Vec<EncodedInstance>> {
    let mut out = Vec::new();
    for &m in domains {
        out.extend_from_slice(wb.domain(m)?.get(split));
    }
    Ok(out)
}

/// A random subset of `size` instances, drawn with `seed`.
pub fn subset(instances: &[EncodedInstance], size: usize, seed: u64) -> Result<Vec<EncodedInstance>> {
    if size > instances.len() {
        return Err(Error::Input(format!(
            "requested {size} training instances but only {} are available",
            instances.len()
        )));
    }
    let mut idx: Vec<usize> = (0..instances.len()).collect();
    idx.shuffle(&mut sub_rng(seed, &[0x5355_4253]));
    idx.truncate(size);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| instances[i].clone()).collect())
}

pub fn pretrain_stage(cfg: &ExperimentConfig, wb: &Workbench) -> Result<(TransformerEncoder, TrainOutcome)> {
    let sources = cfg.source_domains();
    let train = pooled(wb, &sources, Split::Train)?;
    let valid = pooled(wb, &sources, Split::Valid)?;
    let (base, _, outcome) = pretrain_base(&cfg.encoder, &train, &valid, &cfg.pretrain)?;
    Ok((base, outcome))
}

pub fn source_stage(
    cfg: &ExperimentConfig,
    wb: &Workbench,
    base: &TransformerEncoder,
    domain: u16,
) -> Result<(DomainAdapter, TrainOutcome)> {
    let d = wb.domain(domain)?;
    let mut tc = cfg.source.clone();
    tc.seed = tc.seed.wrapping_add(domain as u64);
    train_lora(base, domain, &cfg.lora, &d.train, &d.valid, &tc)
}

/// Fresh adapters trained directly on (a subset of) the target domain.
pub fn target_lora_stage(
    cfg: &ExperimentConfig,
    wb: &Workbench,
    base: &TransformerEncoder,
    train: &[EncodedInstance],
) -> Result<(DomainAdapter, TrainOutcome)> {
    let target = cfg.experiment.target;
    let mut tc = cfg.source.clone();
    tc.seed = tc.seed.wrapping_add(target as u64);
    train_lora(base, target, &cfg.lora, train, &wb.domain(target)?.valid, &tc)
}

/// X-Cross over the given adapters, trained on `train`.
pub fn xcross_stage(
    cfg: &ExperimentConfig,
    wb: &Workbench,
    base: &TransformerEncoder,
    sources: &[&LoraSet],
    train: &[EncodedInstance],
    variant: Variant,
) -> Result<(XCrossModel, TrainOutcome)> {
    let xc = cfg.integration.config(sources.len(), &cfg.encoder, variant)?;
    let valid = &wb.domain(cfg.experiment.target)?.valid;
    train_xcross(base, sources, &xc, train, valid, &cfg.xcross)
}

/// Target training instances used for X-Cross by default.
pub fn target_train(cfg: &ExperimentConfig, wb: &Workbench) -> Result<Vec<EncodedInstance>> {
    let all = &wb.domain(cfg.experiment.target)?.train;
    match cfg.experiment.target_train {
        Some(n) => subset(all, n, cfg.seed),
        None => Ok(all.clone()),
    }
}

pub fn evaluate_single(
    base: &TransformerEncoder,
    adapter: &DomainAdapter,
    instances: &[EncodedInstance],
    tag: &str,
    seed: u64,
) -> Result<(EvalReport, Vec<usize>)> {
    let model = SingleDomainModel {
        base,
        lora: Some(&adapter.lora),
        head: &adapter.head,
    };
    evaluate(&model, instances, tag, seed)
}

pub fn evaluate_xcross(
    base: &TransformerEncoder,
    sources: &[&LoraSet],
    model: &XCrossModel,
    instances: &[EncodedInstance],
    tag: &str,
    seed: u64,
) -> Result<(EvalReport, Vec<usize>)> {
    let view = XCrossView::new(base, sources.to_vec(), model)?;
    evaluate(&view, instances, tag, seed)
}

/// Reports of every source model on every evaluated domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotMatrix {
    pub sources: Vec<u16>,
    pub targets: Vec<u16>,
    pub split: Split,
    /// `reports[i][j]`: source `sources[i]` evaluated on `targets[j]`.
    pub reports: Vec<Vec<EvalReport>>,
}

impl ZeroShotMatrix {
    pub fn get(&self, source: u16, target: u16) -> Option<&EvalReport> {
        let i = self.sources.iter().position(|&s| s == source)?;
        let j = self.targets.iter().position(|&t| t == target)?;
        Some(&self.reports[i][j])
    }
}

pub fn zero_shot_matrix(
    base: &TransformerEncoder,
    adapters: &[&DomainAdapter],
    wb: &Workbench,
    targets: &[u16],
    split: Split,
    max_eval: Option<usize>,
    seed: u64,
) -> Result<ZeroShotMatrix> {
    let mut reports = Vec::with_capacity(adapters.len());
    for a in adapters {
        let mut row = Vec::with_capacity(targets.len());
        for &t in targets {
            let data = capped(wb.domain(t)?.get(split), max_eval);
            let tag = format!("lora-{}-on-{}", a.lora.domain, t);
            row.push(evaluate_single(base, a, data, &tag, seed)?.0);
        }
        reports.push(row);
    }
    Ok(ZeroShotMatrix {
        sources: adapters.iter().map(|a| a.lora.domain).collect(),
        targets: targets.to_vec(),
        split,
        reports,
    })
}

/// Sources ordered by Hit@1 on `target` (descending), ties by MRR@10 then
/// by source id; the first `n` are returned.
pub fn select_top_sources(matrix: &ZeroShotMatrix, target: u16, n: usize) -> Result<Vec<u16>> {
    let mut rows: Vec<(u16, &EvalReport)> = matrix
        .sources
        .iter()
        .filter(|&&s| s != target)
        .filter_map(|&s| matrix.get(s, target).map(|r| (s, r)))
        .collect();
    if rows.len() < n {
        return Err(Error::Input(format!(
            "need {n} source models evaluated on domain {target}, have {}",
            rows.len()
        )));
    }
    rows.sort_by(|a, b| {
        b.1.hit1
            .partial_cmp(&a.1.hit1)
            .unwrap_or(Ordering::Equal)
            .then(b.1.mrr10.partial_cmp(&a.1.mrr10).unwrap_or(Ordering::Equal))
            .then(a.0.cmp(&b.0))
    });
    Ok(rows.into_iter().take(n).map(|(s, _)| s).collect())
}

/// Frozen base and source adapters shared by every X-Cross run of one seed.
pub struct Foundation {
    pub base: TransformerEncoder,
    pub adapters: Vec<DomainAdapter>,
    pub pretrain: TrainOutcome,
    pub source_outcomes: Vec<TrainOutcome>,
}

impl Foundation {
    pub fn adapter(&self, domain: u16) -> Result<&DomainAdapter> {
        self.adapters
            .iter()
            .find(|a| a.lora.domain == domain)
            .ok_or_else(|| Error::Input(format!("no adapters trained for domain {domain}")))
    }

    pub fn source_sets(&self, domains: &[u16]) -> Result<Vec<&LoraSet>> {
        domains.iter().map(|&d| self.adapter(d).map(|a| &a.lora)).collect()
    }
}

/// Generates the data of a seeded configuration.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Workbench> {
    cfg.validate()?;
    let data = generate_domains(&cfg.generator)?;
    Workbench::from_generated(data, cfg.experiment.truncate, cfg.encoder.max_len)
}

/// Pretrains the base and trains adapters for every source domain.
pub fn build_foundation(cfg: &ExperimentConfig, wb: &Workbench) -> Result<Foundation> {
    let (base, pretrain) = pretrain_stage(cfg, wb)?;
    let mut adapters = Vec::new();
    let mut source_outcomes = Vec::new();
    for m in cfg.source_domains() {
        let (a, o) = source_stage(cfg, wb, &base, m)?;
        adapters.push(a);
        source_outcomes.push(o);
    }
    Ok(Foundation {
        base,
        adapters,
        pretrain,
        source_outcomes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub seed: u64,
    pub sources: Vec<u16>,
    /// Zero-shot reports of the selected sources on the target test split.
    pub zero_shot: Vec<EvalReport>,
    pub xcross: EvalReport,
    pub ablations: Vec<EvalReport>,
}

impl TransferReport {
    pub fn best_zero_shot(&self) -> f64 {
        self.zero_shot.iter().map(|r| r.hit1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn ablation(&self, variant: Variant) -> Option<&EvalReport> {
        self.ablations.iter().find(|r| r.model_tag == variant.tag())
    }
}

/// Runs the whole pipeline for `cfg.seed`: data, base, source adapters,
/// source selection on the target validation split, X-Cross on the target
/// training subset, and the requested ablations. Everything is evaluated on
/// the target test split.
pub fn run_transfer(cfg: &ExperimentConfig, ablations: &[Variant]) -> Result<TransferReport> {
    let cfg = cfg.seeded();
    let wb = prepare(&cfg)?;
    let foundation = build_foundation(&cfg, &wb)?;
    transfer_on(&cfg, &wb, &foundation, ablations)
}

/// The X-Cross part of [`run_transfer`] on an existing foundation.
pub fn transfer_on(
    cfg: &ExperimentConfig,
    wb: &Workbench,
    foundation: &Foundation,
    ablations: &[Variant],
) -> Result<TransferReport> {
    let target = cfg.experiment.target;
    let adapters: Vec<&DomainAdapter> = foundation.adapters.iter().collect();
    let holdout = zero_shot_matrix(
        &foundation.base,
        &adapters,
        wb,
        &[target],
        Split::Valid,
        cfg.xcross.max_valid,
        cfg.seed,
    )?;
    let sources = select_top_sources(&holdout, target, cfg.experiment.num_sources)?;
    let test = capped(&wb.domain(target)?.test, cfg.experiment.max_test);
    let mut zero_shot = Vec::new();
    for &s in &sources {
        let tag = format!("zero-shot-{s}");
        zero_shot.push(evaluate_single(&foundation.base, foundation.adapter(s)?, test, &tag, cfg.seed)?.0);
    }
    let xcross = variant_reports(cfg, wb, foundation, &sources, &[Variant::Full])?.remove(0);
    let ablations = variant_reports(cfg, wb, foundation, &sources, ablations)?;
    Ok(TransferReport {
        seed: cfg.seed,
        sources,
        zero_shot,
        xcross,
        ablations,
    })
}

/// Trains each X-Cross variant over `sources` on the target training subset
/// and evaluates it on the target test split.
pub fn variant_reports(
    cfg: &ExperimentConfig,
    wb: &Workbench,
    foundation: &Foundation,
    sources: &[u16],
    variants: &[Variant],
) -> Result<Vec<EvalReport>> {
    let sets = foundation.source_sets(sources)?;
    let train = target_train(cfg, wb)?;
    let test = capped(&wb.domain(cfg.experiment.target)?.test, cfg.experiment.max_test);
    variants
        .iter()
        .map(|&v| {
            let (model, _) = xcross_stage(cfg, wb, &foundation.base, &sets, &train, v)?;
            Ok(evaluate_xcross(&foundation.base, &sets, &model, test, v.tag(), cfg.seed)?.0)
        })
        .collect()
}
