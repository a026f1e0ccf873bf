//! Ranking metrics, baselines, ablations and sweeps.

mod experiment;
mod metrics;
mod sweeps;

pub use experiment::*;
pub use metrics::{evaluate, hit_at_k, mrr_at_10, rank_instances, rank_of, EvalReport, Scorer};
pub use sweeps::*;

#[cfg(test)]
mod tests;
