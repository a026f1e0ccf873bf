use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::phase::TrainablePhase;
use crate::error::{Error, Result};
use crate::evalharness::rank_instances;
use crate::numerics::{adamw_step, AdamWState, Tensor};
use crate::recdata::{sub_rng, EncodedInstance};

const TAG_SHUFFLE: u64 = 0x5348;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a validation Hit@1 improvement.
    pub patience: Option<usize>,
    /// Clip the global gradient norm of each step.
    pub grad_clip: Option<f64>,
    /// Validate on at most this many instances (the first ones).
    pub max_valid: Option<usize>,
    /// Ramp the learning rate linearly over this many optimizer steps.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            weight_decay: 0.01,
            epochs: 40,
            patience: Some(5),
            grad_clip: None,
            max_valid: None,
            warmup_steps: 0,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.lr * self.weight_decay < 1.0) {
            return Err(Error::Config(format!(
                "weight decay {} is out of range for lr {}",
                self.weight_decay, self.lr
            )));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: BTreeMap<String, AdamWState>,
    pub loss_trace: Vec<f64>,
    pub valid_trace: Vec<f64>,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
    pub stopped: bool,
    /// Trainable values at the best validation epoch.
    pub best_snapshot: Option<BTreeMap<String, Tensor>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_valid_hit1: Option<f64>,
    pub loss_trace: Vec<f64>,
    pub early_stopped: bool,
}

/// Validation Hit@1 in percent.
pub fn valid_hit1<P: TrainablePhase + ?Sized>(phase: &P, valid: &[EncodedInstance]) -> Result<f64> {
    let ranks = rank_instances(phase, valid)?;
    Ok(100.0 * ranks.iter().filter(|&&r| r == 1).count() as f64 / ranks.len() as f64)
}

/// One optimisation step on a single instance. Returns its loss.
pub fn train_step<P: TrainablePhase + ?Sized>(
    phase: &mut P,
    instance: &EncodedInstance,
    config: &TrainingConfig,
    optimizer: &mut BTreeMap<String, AdamWState>,
) -> Result<f64> {
    phase.visit_trainable_mut(&mut |_, p| p.zero_grad());
    let loss = phase.accumulate(&instance.prompts, 0)?;
    let mut finite = true;
    let mut sq = 0.0;
    phase.visit_trainable(&mut |_, p| {
        finite &= p.grad.is_finite();
        sq += p.grad.data().iter().map(|g| g * g).sum::<f64>();
    });
    if !finite {
        return Err(Error::NonFinite("gradient".into()));
    }
    let clip = match config.grad_clip {
        Some(c) if sq.sqrt() > c => c / sq.sqrt(),
        _ => 1.0,
    };
    let step = optimizer.values().map(|s| s.step).max().unwrap_or(0) + 1;
    let lr = config.lr * (step as f64 / config.warmup_steps.max(1) as f64).min(1.0);
    let mut result = Ok(());
    phase.visit_trainable_mut(&mut |name, p| {
        if result.is_err() {
            return;
        }
        if clip != 1.0 {
            p.grad.scale(clip);
        }
        let s = optimizer
            .entry(name.to_string())
            .or_insert_with(|| AdamWState::new(p.shape()));
        result = adamw_step(p, s, lr, config.weight_decay);
    });
    result?;
    Ok(loss)
}

fn snapshot<P: TrainablePhase + ?Sized>(phase: &P) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    phase.visit_trainable(&mut |name, p| {
        out.insert(name.to_string(), p.value.clone());
    });
    out
}

fn restore<P: TrainablePhase + ?Sized>(phase: &mut P, snap: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut result = Ok(());
    phase.visit_trainable_mut(&mut |name, p| match snap.get(name) {
        Some(v) if v.shape() == p.shape() => p.value = v.clone(),
        _ => result = Err(Error::Schema(format!("snapshot lacks parameter `{name}`"))),
    });
    result
}

/// Trains `phase` epoch by epoch, resuming from `state`.
///
/// Each epoch visits the training instances in an order drawn from
/// `(config.seed, epoch)`, so an interrupted run resumed from a saved state
/// follows the same trajectory. After every epoch the frozen components are
/// re-hashed, validation Hit@1 is measured when `valid` is non-empty, and
/// `on_epoch` is called. At the end the best validation snapshot is restored.
pub fn train<P: TrainablePhase + ?Sized>(
    phase: &mut P,
    train_set: &[EncodedInstance],
    valid: &[EncodedInstance],
    config: &TrainingConfig,
    state: &mut TrainerState,
    mut on_epoch: impl FnMut(&P, &TrainerState) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let valid = &valid[..config.max_valid.map_or(valid.len(), |m| m.min(valid.len()))];
    let frozen = phase.frozen_hashes();
    while !state.stopped && state.epoch < config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut sub_rng(config.seed, &[TAG_SHUFFLE, state.epoch as u64]));
        let mut total = 0.0;
        for &i in &order {
            total += train_step(phase, &train_set[i], config, &mut state.optimizer)?;
        }
        state.loss_trace.push(total / order.len() as f64);
        state.epoch += 1;

        for (name, hash) in phase.frozen_hashes() {
            if frozen.get(&name) != Some(&hash) {
                return Err(Error::Hash(format!("frozen component `{name}` changed during training")));
            }
        }

        if !valid.is_empty() {
            let hit1 = valid_hit1(phase, valid)?;
            state.valid_trace.push(hit1);
            if state.best_valid.map_or(true, |b| hit1 > b) {
                state.best_valid = Some(hit1);
                state.best_epoch = Some(state.epoch);
                state.since_best = 0;
                state.best_snapshot = Some(snapshot(phase));
            } else {
                state.since_best += 1;
                if config.patience.is_some_and(|p| state.since_best >= p) {
                    state.stopped = true;
                }
            }
        }
        on_epoch(phase, state)?;
    }
    if let Some(snap) = &state.best_snapshot {
        restore(phase, snap)?;
    }
    Ok(TrainOutcome {
        epochs_run: state.epoch,
        best_epoch: state.best_epoch,
        best_valid_hit1: state.best_valid,
        loss_trace: state.loss_trace.clone(),
        early_stopped: state.stopped,
    })
}
