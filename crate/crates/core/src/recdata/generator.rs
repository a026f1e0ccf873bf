use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::{HISTORY_MAX, HISTORY_MIN};
use super::{Catalog, Item, MultipleChoiceInstance, Split, Vocab};
use crate::error::{Error, Result};

/// Knobs of the synthetic multi-domain generator.
///
/// Every domain shares one category space with `categories` categories and
/// one descriptor token per category. A domain's category transitions mix a
/// shared chain with a domain-local one:
/// `TMat_m = (1 − domain_specificity) · shared + domain_specificity · local_m`.
/// The target domain's local rows are copied round-robin from the other
/// domains' local rows, so each source knows part of the target's dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub domains: usize,
    pub categories: usize,
    pub items_per_domain: usize,
    pub zipf_s: f64,
    pub title_tokens: usize,
    /// Item-token vocabulary size of each domain; one entry per domain.
    pub local_vocab: Vec<usize>,
    /// Shared `K×K` transition matrix. When absent it is built from
    /// `shared_chain` with `transition_noise` spread uniformly.
    pub transitions: Option<Vec<Vec<f64>>>,
    pub shared_chain: SharedChain,
    pub transition_noise: f64,
    pub domain_specificity: f64,
    /// Domain whose local transitions are inherited from the others.
    pub target_domain: Option<usize>,
    pub users_per_domain: Vec<usize>,
    pub history_min: usize,
    pub history_max: usize,
    pub negatives: usize,
    /// Negatives are drawn proportionally to `popularity^negative_exponent`.
    pub negative_exponent: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            domains: 3,
            categories: 8,
            items_per_domain: 256,
            zipf_s: 1.0,
            title_tokens: 3,
            local_vocab: vec![48; 3],
            transitions: None,
            shared_chain: SharedChain::Stay,
            transition_noise: 0.1,
            domain_specificity: 0.7,
            target_domain: Some(2),
            users_per_domain: vec![2000, 2000, 2000],
            history_min: 5,
            history_max: 15,
            negatives: 29,
            negative_exponent: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.domains == 0 || self.categories == 0 {
            return cfg("domains and categories must be positive".into());
        }
        if self.title_tokens < 2 {
            return cfg("titles need at least a domain and a descriptor token".into());
        }
        if self.local_vocab.len() != self.domains || self.users_per_domain.len() != self.domains {
            return cfg(format!(
                "local_vocab and users_per_domain need one entry per domain ({})",
                self.domains
            ));
        }
        if self.history_min < HISTORY_MIN || self.history_min > self.history_max || self.history_max > HISTORY_MAX {
            return cfg(format!(
                "invalid history range [{}, {}]",
                self.history_min, self.history_max
            ));
        }
        let min_per_cat = self.items_per_domain / self.categories;
        if min_per_cat < self.history_max + 1 {
            return cfg(format!(
                "each category needs at least {} items, got {min_per_cat}",
                self.history_max + 1
            ));
        }
        let max_per_cat = self.items_per_domain.div_ceil(self.categories);
        let unique = self.title_tokens - 2;
        for (m, &v) in self.local_vocab.iter().enumerate() {
            let capacity = (v as f64).powi(unique as i32);
            if unique > 0 && capacity < max_per_cat as f64 {
                return cfg(format!(
                    "domain {m}: {v} local tokens cannot give {max_per_cat} items distinct titles"
                ));
            }
            if unique > 0 && v == 0 {
                return cfg(format!("domain {m}: empty local vocabulary"));
            }
        }
        if self.items_per_domain < self.negatives + self.history_max + 1 {
            return cfg("catalog too small for the requested negatives".into());
        }
        if !(self.zipf_s >= 0.0) || !(self.negative_exponent >= 0.0) {
            return cfg("zipf_s and negative_exponent must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.domain_specificity) || !(0.0..=1.0).contains(&self.transition_noise) {
            return cfg("domain_specificity and transition_noise must lie in [0, 1]".into());
        }
        if let Some(t) = self.target_domain {
            if t >= self.domains || self.domains < 2 {
                return cfg(format!("target domain {t} needs at least one other domain"));
            }
        }
        if let Some(rows) = &self.transitions {
            check_stochastic(rows, self.categories)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.domains, self.categories, &self.local_vocab)
    }
}

fn check_stochastic(rows: &[Vec<f64>], k: usize) -> Result<()> {
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Config(format!("transition matrix must be {k}×{k}")));
    }
    for (i, r) in rows.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if r.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("transition row {i} sums to {sum}, expected 1")));
        }
    }
    Ok(())
}

/// Derives an independent stream for `(seed, tags…)`.
pub(crate) fn sub_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

const TAG_CATALOG: u64 = 1;
const TAG_TRANSITIONS: u64 = 2;
const TAG_USERS: u64 = 3;
const TAG_NEGATIVES: u64 = 4;
const TAG_SPLIT: u64 = 5;

/// Output of [`generate_domains`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub catalog: Catalog,
    /// Per-domain transition matrices actually used.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Per-domain instances in user order, split tags assigned.
    pub instances: Vec<Vec<MultipleChoiceInstance>>,
}

/// Built-in shared transition structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharedChain {
    /// Stay in the current category.
    Stay,
    /// Move from category `k` to `k + 1 (mod K)`.
    Successor,
}

fn permuted_chain(perm: &[usize], noise: f64) -> Vec<Vec<f64>> {
    let k = perm.len();
    (0..k)
        .map(|i| {
            let mut row = vec![noise / k as f64; k];
            row[perm[i]] += 1.0 - noise;
            row
        })
        .collect()
}

/// Per-domain transition matrices implied by the configuration.
pub fn domain_transitions(cfg: &GeneratorConfig) -> Vec<Vec<Vec<f64>>> {
    let k = cfg.categories;
    let shared = cfg
        .transitions
        .clone()
        .unwrap_or_else(|| {
            let next: Vec<usize> = match cfg.shared_chain {
                SharedChain::Stay => (0..k).collect(),
                SharedChain::Successor => (0..k).map(|i| (i + 1) % k).collect(),
            };
            permuted_chain(&next, cfg.transition_noise)
        });
    let mut local: Vec<Vec<Vec<f64>>> = (0..cfg.domains)
        .map(|m| {
            let mut rng = sub_rng(cfg.seed, &[TAG_TRANSITIONS, m as u64]);
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            permuted_chain(&perm, cfg.transition_noise)
        })
        .collect();
    if let Some(t) = cfg.target_domain {
        let others: Vec<usize> = (0..cfg.domains).filter(|&m| m != t).collect();
        for row in 0..k {
            local[t][row] = local[others[row % others.len()]][row].clone();
        }
    }
    let rho = cfg.domain_specificity;
    local
        .iter()
        .map(|lm| {
            shared
                .iter()
                .zip(lm)
                .map(|(s, l)| s.iter().zip(l).map(|(a, b)| (1.0 - rho) * a + rho * b).collect())
                .collect()
        })
        .collect()
}

fn zipf_weight(rank: usize, s: f64) -> f64 {
    1.0 / ((rank + 1) as f64).powf(s)
}

fn build_catalog(cfg: &GeneratorConfig) -> Catalog {
    let vocab = cfg.vocab();
    let k = cfg.categories;
    let unique = cfg.title_tokens - 2;
    let mut items = Vec::new();
    let mut next_id = 0u32;
    for m in 0..cfg.domains {
        let mut rng = sub_rng(cfg.seed, &[TAG_CATALOG, m as u64]);
        let per_cat: Vec<usize> = (0..k)
            .map(|c| cfg.items_per_domain / k + usize::from(c < cfg.items_per_domain % k))
            .collect();
        for (c, &count) in per_cat.iter().enumerate() {
            // Distinct local-token tuples, assigned in shuffled order so that
            // token identity carries no popularity information.
            let v = cfg.local_vocab[m];
            let mut codes: Vec<usize> = (0..count).collect();
            if unique > 0 {
                let space = (v as f64).powi(unique as i32).min(1e9) as usize;
                codes = rand::seq::index::sample(&mut rng, space, count).into_vec();
            }
            for (rank, code) in codes.into_iter().enumerate() {
                let mut title = Vec::with_capacity(cfg.title_tokens);
                title.push(vocab.domain_token(m));
                title.push(vocab.descriptor_token(c));
                let mut rest = code;
                for _ in 0..unique {
                    title.push(vocab.local_token(m, rest % v));
                    rest /= v;
                }
                items.push(Item {
                    id: next_id,
                    domain: m as u16,
                    category: c as u16,
                    popularity: zipf_weight(rank, cfg.zipf_s),
                    title,
                });
                next_id += 1;
            }
        }
    }
    Catalog::new(vocab, items).expect("generated catalog is consistent")
}

/// Generates catalogs, user trajectories, negatives and splits for every
/// domain. Deterministic in `cfg.seed`.
pub fn generate_domains(cfg: &GeneratorConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let catalog = build_catalog(cfg);
    let transitions = domain_transitions(cfg);
    let mut instances = Vec::with_capacity(cfg.domains);
    let mut next_user = 0u32;
    for m in 0..cfg.domains {
        let by_cat: Vec<Vec<&Item>> = (0..cfg.categories)
            .map(|c| {
                catalog
                    .domain_items(m as u16)
                    .iter()
                    .filter(|it| it.category as usize == c)
                    .collect()
            })
            .collect();
        let rows: Vec<WeightedIndex<f64>> = transitions[m]
            .iter()
            .map(|r| WeightedIndex::new(r).map_err(|e| Error::Config(format!("transition row: {e}"))))
            .collect::<Result<_>>()?;
        let mut domain_instances = Vec::with_capacity(cfg.users_per_domain[m]);
        for u in 0..cfg.users_per_domain[m] {
            let user = next_user;
            next_user += 1;
            let mut rng = sub_rng(cfg.seed, &[TAG_USERS, m as u64, u as u64]);
            let h = rng.gen_range(cfg.history_min..=cfg.history_max);
            let mut seq: Vec<u32> = Vec::with_capacity(h + 1);
            let mut cat = rng.gen_range(0..cfg.categories);
            for step in 0..=h {
                if step > 0 {
                    cat = rows[cat].sample(&mut rng);
                }
                let pool: Vec<&Item> = by_cat[cat].iter().copied().filter(|it| !seq.contains(&it.id)).collect();
                let w = WeightedIndex::new(pool.iter().map(|it| it.popularity))
                    .map_err(|e| Error::Config(format!("popularity weights: {e}")))?;
                seq.push(pool[w.sample(&mut rng)].id);
            }
            let positive = seq.pop().expect("h + 1 items drawn");
            let mut neg_rng = sub_rng(cfg.seed, &[TAG_NEGATIVES, m as u64, u as u64]);
            let negatives = sample_negatives_with(
                &catalog,
                m as u16,
                positive,
                &seq,
                cfg.negatives,
                cfg.negative_exponent,
                &mut neg_rng,
            )?;
            domain_instances.push(MultipleChoiceInstance {
                user,
                domain: m as u16,
                history: seq,
                positive,
                negatives,
                split: Split::Train,
            });
        }
        let mut split_rng = sub_rng(cfg.seed, &[TAG_SPLIT, m as u64]);
        split_users_with(&mut domain_instances, &mut split_rng);
        instances.push(domain_instances);
    }
    Ok(GeneratedData {
        catalog,
        transitions,
        instances,
    })
}

/// `k` distinct items of `domain`, drawn without replacement with
/// probability proportional to `popularity^exponent`, never the positive or
/// a history item.
pub fn sample_negatives(
    catalog: &Catalog,
    domain: u16,
    positive: u32,
    history: &[u32],
    k: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_negatives_with(catalog, domain, positive, history, k, 1.0, &mut rng)
}

pub(crate) fn sample_negatives_with<R: Rng>(
    catalog: &Catalog,
    domain: u16,
    positive: u32,
    history: &[u32],
    k: usize,
    exponent: f64,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let eligible: Vec<&Item> = catalog
        .domain_items(domain)
        .iter()
        .filter(|it| it.id != positive && !history.contains(&it.id))
        .collect();
    if eligible.len() < k {
        return Err(Error::Input(format!(
            "catalog of domain {domain} has {} eligible items, {k} negatives requested",
            eligible.len()
        )));
    }
    let mut out = Vec::with_capacity(k);
    let mut weights: Vec<f64> = eligible.iter().map(|it| it.popularity.powf(exponent)).collect();
    for _ in 0..k {
        let idx = WeightedIndex::new(&weights)
            .map_err(|e| Error::Input(format!("negative sampling weights: {e}")))?
            .sample(rng);
        out.push(eligible[idx].id);
        weights[idx] = 0.0;
    }
    Ok(out)
}

/// Tags users train/valid/test in a 3:1:1 ratio after a seeded shuffle.
pub fn split_users(instances: &mut [MultipleChoiceInstance], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_users_with(instances, &mut rng);
}

fn split_users_with<R: Rng>(instances: &mut [MultipleChoiceInstance], rng: &mut R) {
    let mut users: Vec<u32> = instances.iter().map(|i| i.user).collect();
    users.sort_unstable();
    users.dedup();
    users.shuffle(rng);
    let n = users.len();
    let train = (n as f64 * 3.0 / 5.0).round() as usize;
    let valid = (n as f64 / 5.0).round() as usize;
    let mut tag = std::collections::HashMap::with_capacity(n);
    for (i, u) in users.into_iter().enumerate() {
        let split = if i < train {
            Split::Train
        } else if i < train + valid {
            Split::Valid
        } else {
            Split::Test
        };
        tag.insert(u, split);
    }
    for inst in instances {
        inst.split = tag[&inst.user];
    }
}
