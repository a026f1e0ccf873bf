//! Checkpoint files.
//!
//! A checkpoint is one JSON document holding the frozen and trainable
//! components of a pipeline stage, the trainer state needed to resume, and a
//! SHA-256 hash per component. Hashes are verified on load. Serialization is
//! deterministic: the same state always produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::phase::PhaseKind;
use super::trainer::{TrainerState, TrainingConfig};
use crate::encoder::{EncoderConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::xcross::{PoolerScorer, XCrossModel, ZLayout};

pub const CHECKPOINT_FORMAT: &str = "xcross-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained adapters of one domain together with that domain's head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainAdapter {
    pub lora: LoraSet,
    pub head: PoolerScorer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZLayoutInfo {
    pub description: String,
    pub rows: Vec<String>,
}

impl ZLayoutInfo {
    pub fn new(n: usize) -> Self {
        Self {
            description: ZLayout::DESCRIPTION.to_string(),
            rows: ZLayout { n }.row_labels(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub phase: PhaseKind,
    pub seed: u64,
    pub encoder_config: EncoderConfig,
    pub hashes: BTreeMap<String, String>,
    pub base: TransformerEncoder,
    /// Pretraining head (base phase only).
    #[serde(default)]
    pub head: Option<PoolerScorer>,
    #[serde(default)]
    pub adapters: Vec<DomainAdapter>,
    #[serde(default)]
    pub xcross: Option<XCrossModel>,
    #[serde(default)]
    pub z_layout: Option<ZLayoutInfo>,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub trainer: Option<TrainerState>,
}

pub(crate) fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable component");
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn new(phase: PhaseKind, seed: u64, base: TransformerEncoder) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            phase,
            seed,
            encoder_config: base.config().clone(),
            hashes: BTreeMap::new(),
            base,
            head: None,
            adapters: Vec::new(),
            xcross: None,
            z_layout: None,
            training: None,
            trainer: None,
        }
    }

    pub fn with_xcross(mut self, model: XCrossModel) -> Self {
        self.z_layout = Some(ZLayoutInfo::new(model.config.n));
        self.xcross = Some(model);
        self
    }

    /// Component hashes, keyed `base`, `head`, `adapter.<domain>`,
    /// `adapter_head.<domain>`, `xcross`.
    pub fn component_hashes(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("base".into(), self.base.content_hash());
        if let Some(h) = &self.head {
            out.insert("head".into(), json_hash(h));
        }
        for a in &self.adapters {
            out.insert(format!("adapter.{}", a.lora.domain), a.lora.content_hash());
            out.insert(format!("adapter_head.{}", a.lora.domain), json_hash(&a.head));
        }
        if let Some(x) = &self.xcross {
            out.insert("xcross".into(), x.content_hash());
        }
        out
    }

    pub fn adapter(&self, domain: u16) -> Option<&DomainAdapter> {
        self.adapters.iter().find(|a| a.lora.domain == domain)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut c = self.clone();
        c.hashes = self.component_hashes();
        let mut bytes = serde_json::to_vec(&c)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(bytes).map_err(|e| {
            if e.is_data() && e.to_string().contains("unknown field") {
                Error::Schema(e.to_string())
            } else {
                Error::Parse {
                    line: e.line(),
                    message: e.to_string(),
                }
            }
        })?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("expected format `{CHECKPOINT_FORMAT}`, found `{}`", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        c.base.validate()?;
        if c.base.config() != &c.encoder_config {
            return Err(Error::Schema("encoder_config does not match the stored encoder".into()));
        }
        let actual = c.component_hashes();
        if actual != c.hashes {
            let bad: Vec<&str> = actual
                .keys()
                .chain(c.hashes.keys())
                .filter(|k| actual.get(*k) != c.hashes.get(*k))
                .map(String::as_str)
                .collect();
            return Err(Error::Hash(format!("checkpoint component(s) {} do not match their hashes", bad.join(", "))));
        }
        for a in &c.adapters {
            a.lora.validate_for(&c.encoder_config)?;
            a.head.validate(c.encoder_config.d_model)?;
        }
        if let Some(x) = &c.xcross {
            let sources: Vec<&LoraSet> = c.adapters.iter().map(|a| &a.lora).collect();
            if sources.len() == x.config.n {
                x.check(&c.base, &sources)?;
            }
        }
        Ok(c)
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
