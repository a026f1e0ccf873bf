//! Synthetic multi-domain recommendation data: catalogs, user histories
//! with pre-sampled negatives, prompt construction and dataset files.

mod generator;
pub(crate) mod io;
mod prompt;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use generator::{
    domain_transitions, generate_domains, sample_negatives, split_users, GeneratedData, GeneratorConfig,
    SharedChain,
};
pub(crate) use generator::sub_rng;
pub use io::{
    read_catalog, read_dataset, read_generated, write_catalog, write_dataset, write_generated, DatasetHeader, CATALOG_FILE,
    CATALOG_FORMAT, DATASET_FORMAT, DATASET_VERSION,
};
pub use prompt::{build_prompt, encode_instances, instance_prompts, EncodedInstance, PromptEncoding, DEFAULT_TRUNCATE};

use crate::error::{Error, Result};

/// Token id layout shared by every domain:
/// `[CLS]=0`, `[SEP]=1`, item boundary `=2`, one token per domain, one
/// descriptor token per category, then each domain's local item tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub domains: usize,
    pub categories: usize,
    pub local: Vec<usize>,
}

impl Vocab {
    pub const CLS: u32 = 0;
    pub const SEP: u32 = 1;
    pub const ITEM_SEP: u32 = 2;
    const SPECIAL: u32 = 3;

    pub fn new(domains: usize, categories: usize, local: &[usize]) -> Self {
        Self {
            domains,
            categories,
            local: local.to_vec(),
        }
    }

    pub fn domain_token(&self, m: usize) -> u32 {
        Self::SPECIAL + m as u32
    }

    pub fn descriptor_token(&self, c: usize) -> u32 {
        Self::SPECIAL + self.domains as u32 + c as u32
    }

    pub fn local_token(&self, m: usize, i: usize) -> u32 {
        let before: usize = self.local[..m].iter().sum();
        Self::SPECIAL + (self.domains + self.categories + before + i) as u32
    }

    pub fn size(&self) -> usize {
        Self::SPECIAL as usize + self.domains + self.categories + self.local.iter().sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub id: u32,
    pub domain: u16,
    /// 0-based category index.
    pub category: u16,
    pub popularity: f64,
    pub title: Vec<u32>,
}

/// All items of all domains, addressable by global id.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    vocab: Vocab,
    items: Vec<Item>,
    domains: Vec<std::ops::Range<usize>>,
    index: HashMap<u32, usize>,
}

impl Catalog {
    pub fn new(vocab: Vocab, items: Vec<Item>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        let mut domains: Vec<std::ops::Range<usize>> = Vec::new();
        for (i, it) in items.iter().enumerate() {
            if index.insert(it.id, i).is_some() {
                return Err(Error::Schema(format!("duplicate item id {}", it.id)));
            }
            if !(it.popularity > 0.0) {
                return Err(Error::Schema(format!("item {} has non-positive popularity", it.id)));
            }
            let d = it.domain as usize;
            if d >= vocab.domains || it.category as usize >= vocab.categories {
                return Err(Error::Schema(format!("item {} has an unknown domain or category", it.id)));
            }
            if d + 1 == domains.len() && domains[d].end == i {
                domains[d].end = i + 1;
            } else if d == domains.len() {
                domains.push(i..i + 1);
            } else {
                return Err(Error::Schema("items must be grouped by ascending domain".into()));
            }
        }
        Ok(Self {
            vocab,
            items,
            domains,
            index,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_items(&self, domain: u16) -> &[Item] {
        self.domains
            .get(domain as usize)
            .map_or(&[][..], |r| &self.items[r.clone()])
    }

    pub fn get(&self, id: u32) -> Option<&Item> {
        self.index.get(&id).map(|&i| &self.items[i])
    }

    pub fn item(&self, id: u32) -> Result<&Item> {
        self.get(id)
            .ok_or_else(|| Error::Input(format!("item {id} is not in the catalog")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split `{other}`"))),
        }
    }
}

/// One user history with its next item and 29 (by default) negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultipleChoiceInstance {
    pub user: u32,
    pub domain: u16,
    pub history: Vec<u32>,
    pub positive: u32,
    pub negatives: Vec<u32>,
    pub split: Split,
}

impl MultipleChoiceInstance {
    /// Positive first, then negatives in stored order.
    pub fn candidates(&self) -> impl Iterator<Item = u32> + '_ {
        std::iter::once(self.positive).chain(self.negatives.iter().copied())
    }

    pub fn validate(&self, negatives: usize) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        if !self.history.iter().all(|h| seen.insert(*h)) {
            return Err(Error::Schema(format!("user {}: history items repeat", self.user)));
        }
        if seen.contains(&self.positive) {
            return Err(Error::Schema(format!("user {}: positive appears in history", self.user)));
        }
        if self.negatives.len() != negatives {
            return Err(Error::Schema(format!(
                "user {}: {} negatives, expected {negatives}",
                self.user,
                self.negatives.len()
            )));
        }
        seen.insert(self.positive);
        if !self.negatives.iter().all(|n| seen.insert(*n)) {
            return Err(Error::Schema(format!(
                "user {}: negatives repeat or overlap the history/positive",
                self.user
            )));
        }
        Ok(())
    }
}

pub fn by_split(instances: &[MultipleChoiceInstance], split: Split) -> Vec<MultipleChoiceInstance> {
    instances.iter().filter(|i| i.split == split).cloned().collect()
}
