use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recdata::EncodedInstance;

/// Anything that maps a prompt to a relevance score.
pub trait Scorer {
    fn score(&self, tokens: &[u32]) -> Result<f64>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, tokens: &[u32]) -> Result<f64> {
        (**self).score(tokens)
    }
}

/// Rank of `scores[positive]` among all scores, 1-based. Every other score
/// greater than or equal to the positive's counts against it.
pub fn rank_of(scores: &[f64], positive: usize) -> usize {
    let p = scores[positive];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != positive && s >= p)
        .count()
}

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Reciprocal rank truncated at 10.
pub fn mrr_at_10(rank: usize) -> f64 {
    if rank <= 10 {
        1.0 / rank as f64
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    /// Percentages.
    pub hit1: f64,
    pub hit3: f64,
    pub hit10: f64,
    /// In `[0, 1]`.
    pub mrr10: f64,
    pub count: usize,
    pub model_tag: String,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize], model_tag: &str, seed: u64) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Input("cannot evaluate on an empty dataset".into()));
        }
        let n = ranks.len() as f64;
        // One division from an exact count gives the correctly rounded percentage.
        let hit = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Self {
            hit1: hit(1),
            hit3: hit(3),
            hit10: hit(10),
            mrr10: ranks.iter().map(|&r| mrr_at_10(r)).sum::<f64>() / n,
            count: ranks.len(),
            model_tag: model_tag.to_string(),
            seed,
        })
    }

    /// `0 ≤ Hit@1 ≤ Hit@3 ≤ Hit@10 ≤ 100`, `0 ≤ MRR@10 ≤ 1`, `Hit@1/100 ≤ MRR@10`.
    pub fn is_consistent(&self) -> bool {
        0.0 <= self.hit1
            && self.hit1 <= self.hit3
            && self.hit3 <= self.hit10
            && self.hit10 <= 100.0
            && (0.0..=1.0).contains(&self.mrr10)
            && self.hit1 / 100.0 <= self.mrr10 + 1e-12
    }
}

/// Ranks of the positive (index 0) for every instance.
pub fn rank_instances<S: Scorer + ?Sized>(model: &S, instances: &[EncodedInstance]) -> Result<Vec<usize>> {
    instances
        .iter()
        .map(|inst| {
            let scores = inst
                .prompts
                .iter()
                .map(|p| model.score(p))
                .collect::<Result<Vec<f64>>>()?;
            Ok(rank_of(&scores, 0))
        })
        .collect()
}

pub fn evaluate<S: Scorer + ?Sized>(
    model: &S,
    instances: &[EncodedInstance],
    model_tag: &str,
    seed: u64,
) -> Result<(EvalReport, Vec<usize>)> {
    if instances.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let ranks = rank_instances(model, instances)?;
    Ok((EvalReport::from_ranks(&ranks, model_tag, seed)?, ranks))
}
