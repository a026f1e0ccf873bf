use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::multiple_choice_loss;
use super::phase::{BasePhase, LoraPhase, PhaseKind, TrainablePhase, XCrossPhase};
use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::error::Result;
use crate::lora::{LoraScaling, LoraSet};
use crate::numerics::relative_error;
use crate::xcross::{PoolerScorer, XCrossConfig, XCrossModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Loss of the phase's current parameters on one instance.
pub fn phase_loss<P: TrainablePhase + ?Sized>(phase: &P, prompts: &[Vec<u32>], positive: usize) -> Result<f64> {
    let scores = prompts.iter().map(|p| phase.score(p)).collect::<Result<Vec<f64>>>()?;
    multiple_choice_loss(&scores, positive)
}

fn nudge<P: TrainablePhase + ?Sized>(phase: &mut P, name: &str, i: usize, value: Option<f64>) -> f64 {
    let mut old = 0.0;
    phase.visit_trainable_mut(&mut |n, p| {
        if n == name {
            old = p.value.data()[i];
            if let Some(v) = value {
                p.value.data_mut()[i] = v;
            }
        }
    });
    old
}

/// Compares the analytic gradient of every trainable parameter with central
/// differences of the multiple-choice loss. Gradients are left zeroed.
pub fn phase_grad_check<P: TrainablePhase + ?Sized>(
    phase: &mut P,
    prompts: &[Vec<u32>],
    positive: usize,
    eps: f64,
) -> Result<GradCheckReport> {
    phase.visit_trainable_mut(&mut |_, p| p.zero_grad());
    phase.accumulate(prompts, positive)?;
    let mut analytic = Vec::new();
    phase.visit_trainable(&mut |name, p| analytic.push((name.to_string(), p.grad.data().to_vec())));
    phase.visit_trainable_mut(&mut |_, p| p.zero_grad());

    let mut params = Vec::with_capacity(analytic.len());
    let mut max_rel_error: f64 = 0.0;
    for (name, grad) in analytic {
        let mut numeric = vec![0.0; grad.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = nudge(phase, &name, i, None);
            nudge(phase, &name, i, Some(x + eps));
            let plus = phase_loss(phase, prompts, positive);
            nudge(phase, &name, i, Some(x - eps));
            let minus = phase_loss(phase, prompts, positive);
            nudge(phase, &name, i, Some(x));
            *slot = (plus? - minus?) / (2.0 * eps);
        }
        let rel = relative_error(&grad, &numeric);
        max_rel_error = max_rel_error.max(rel);
        params.push(ParamCheck {
            numel: grad.len(),
            name,
            rel_error: rel,
        });
    }
    Ok(GradCheckReport { params, max_rel_error })
}

/// Smallest configuration used for whole-phase gradient checks.
pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        vocab_size: 12,
        max_len: 12,
        ln_eps: 1e-5,
    }
}

/// `candidates` random prompts of 4–12 tokens starting with `[CLS]`.
pub fn random_prompts(candidates: usize, vocab: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..candidates)
        .map(|_| {
            let len = rng.gen_range(4..=max_len);
            std::iter::once(0)
                .chain((1..len).map(|_| rng.gen_range(1..vocab as u32)))
                .collect()
        })
        .collect()
}

fn perturbed_lora(domain: u16, base: &TransformerEncoder, rank: usize, seed: u64) -> Result<LoraSet> {
    let mut s = LoraSet::for_encoder(domain, base.config(), rank, rank as f64, LoraScaling::AlphaOverRank, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB);
    for a in s.adapters_mut() {
        a.b.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
    }
    Ok(s)
}

/// Gradient checks of every trainable parameter of the requested phases on
/// [`tiny_config`] with two sources. Adapter `B` matrices and X-Cross
/// parameters are moved away from their zero initialization first, so no
/// gradient path is trivially zero.
pub fn tiny_phase_checks(
    phases: &[PhaseKind],
    candidates: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<(PhaseKind, GradCheckReport)>> {
    let cfg = tiny_config();
    let prompts = random_prompts(candidates, cfg.vocab_size, cfg.max_len, seed);
    let positive = seed as usize % candidates.max(1);
    let mut base = TransformerEncoder::new(cfg.clone(), seed)?;
    let mut out = Vec::new();
    if phases.contains(&PhaseKind::Base) {
        let mut phase = BasePhase::new(base.clone(), PoolerScorer::new(cfg.d_model, seed ^ 1))?;
        out.push((PhaseKind::Base, phase_grad_check(&mut phase, &prompts, positive, eps)?));
    }
    base.freeze();
    if phases.contains(&PhaseKind::Lora) {
        let lora = perturbed_lora(0, &base, 4, seed ^ 2)?;
        let mut phase = LoraPhase::new(&base, lora, PoolerScorer::new(cfg.d_model, seed ^ 3))?;
        out.push((PhaseKind::Lora, phase_grad_check(&mut phase, &prompts, positive, eps)?));
    }
    if phases.contains(&PhaseKind::Xcross) {
        let mut sources = [perturbed_lora(0, &base, 4, seed ^ 4)?, perturbed_lora(1, &base, 4, seed ^ 5)?];
        sources.iter_mut().for_each(LoraSet::freeze);
        let mut model = XCrossModel::new(XCrossConfig::top(2, cfg.d_model, cfg.num_layers, cfg.num_layers)?, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
        model.for_each_param_mut(|_, p| {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        });
        let mut phase = XCrossPhase::new(&base, sources.iter().collect(), model)?;
        out.push((PhaseKind::Xcross, phase_grad_check(&mut phase, &prompts, positive, eps)?));
    }
    Ok(out)
}
