//! The three training stages as plain functions.

use super::checkpoint::DomainAdapter;
use super::phase::{BasePhase, LoraPhase, XCrossPhase};
use super::trainer::{train, TrainOutcome, TrainerState, TrainingConfig};
use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::error::Result;
use crate::lora::{LoraScaling, LoraSet};
use crate::recdata::EncodedInstance;
use crate::xcross::{PoolerScorer, XCrossConfig, XCrossModel};

pub const DEFAULT_RANK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSettings {
    pub rank: usize,
    /// Defaults to the rank, which makes the multiplier `α/r` equal 1.
    pub alpha: Option<f64>,
    pub scaling: LoraScaling,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            alpha: None,
            scaling: LoraScaling::AlphaOverRank,
        }
    }
}

impl LoraSettings {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

/// Trains a fresh encoder with a temporary head on pooled data, then freezes it.
pub fn pretrain_base(
    config: &EncoderConfig,
    train_set: &[EncodedInstance],
    valid: &[EncodedInstance],
    tc: &TrainingConfig,
) -> Result<(TransformerEncoder, PoolerScorer, TrainOutcome)> {
    let encoder = TransformerEncoder::new(config.clone(), tc.seed)?;
    let head = PoolerScorer::new(config.d_model, tc.seed ^ 0xBA5E);
    let mut phase = BasePhase::new(encoder, head)?;
    let outcome = train(&mut phase, train_set, valid, tc, &mut TrainerState::default(), |_, _| Ok(()))?;
    let head = phase.head.clone();
    Ok((phase.finish(), head, outcome))
}

/// Trains one domain's adapters and head on a frozen base.
pub fn train_lora(
    base: &TransformerEncoder,
    domain: u16,
    settings: &LoraSettings,
    train_set: &[EncodedInstance],
    valid: &[EncodedInstance],
    tc: &TrainingConfig,
) -> Result<(DomainAdapter, TrainOutcome)> {
    let lora = LoraSet::for_encoder(
        domain,
        base.config(),
        settings.rank,
        settings.alpha(),
        settings.scaling,
        tc.seed,
    )?;
    let head = PoolerScorer::new(base.config().d_model, tc.seed ^ 0x10AA);
    let mut phase = LoraPhase::new(base, lora, head)?;
    let outcome = train(&mut phase, train_set, valid, tc, &mut TrainerState::default(), |_, _| Ok(()))?;
    let (lora, head) = phase.finish();
    Ok((DomainAdapter { lora, head }, outcome))
}

/// Trains an X-Cross model over frozen source adapters.
pub fn train_xcross(
    base: &TransformerEncoder,
    sources: &[&LoraSet],
    config: &XCrossConfig,
    train_set: &[EncodedInstance],
    valid: &[EncodedInstance],
    tc: &TrainingConfig,
) -> Result<(XCrossModel, TrainOutcome)> {
    let model = XCrossModel::new(config.clone(), tc.seed)?;
    let mut phase = XCrossPhase::new(base, sources.to_vec(), model)?;
    let outcome = train(&mut phase, train_set, valid, tc, &mut TrainerState::default(), |_, _| Ok(()))?;
    Ok((phase.finish(), outcome))
}
