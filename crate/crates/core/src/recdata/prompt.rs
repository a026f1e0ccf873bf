use super::{Catalog, MultipleChoiceInstance, Vocab};
use crate::error::{Error, Result};

pub const DEFAULT_TRUNCATE: usize = 8;
pub const HISTORY_MIN: usize = 5;
pub const HISTORY_MAX: usize = 15;

/// `[CLS] title₁ · title₂ · … titleₕ [SEP] candidate [SEP]`, with `·` the
/// item-boundary token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptEncoding {
    pub tokens: Vec<u32>,
}

impl PromptEncoding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn build_prompt(
    history: &[u32],
    candidate: u32,
    catalog: &Catalog,
    truncate: usize,
    max_len: usize,
) -> Result<PromptEncoding> {
    let tokens = assemble(history, candidate, catalog, truncate)?;
    if tokens.len() > max_len {
        return Err(Error::Input(format!(
            "prompt of {} tokens exceeds max_len {max_len}",
            tokens.len()
        )));
    }
    Ok(PromptEncoding { tokens })
}

fn assemble(history: &[u32], candidate: u32, catalog: &Catalog, truncate: usize) -> Result<Vec<u32>> {
    if !(HISTORY_MIN..=HISTORY_MAX).contains(&history.len()) {
        return Err(Error::Input(format!(
            "history length {} outside [{HISTORY_MIN}, {HISTORY_MAX}]",
            history.len()
        )));
    }
    let title = |id: u32| -> Result<&[u32]> {
        let t = &catalog.item(id)?.title;
        Ok(&t[..t.len().min(truncate)])
    };
    let mut tokens = vec![Vocab::CLS];
    for (i, &h) in history.iter().enumerate() {
        if i > 0 {
            tokens.push(Vocab::ITEM_SEP);
        }
        tokens.extend_from_slice(title(h)?);
    }
    tokens.push(Vocab::SEP);
    tokens.extend_from_slice(title(candidate)?);
    tokens.push(Vocab::SEP);
    Ok(tokens)
}

/// Prompts for every candidate of an instance, positive first.
pub fn instance_prompts(
    inst: &MultipleChoiceInstance,
    catalog: &Catalog,
    truncate: usize,
    max_len: usize,
) -> Result<Vec<PromptEncoding>> {
    inst.candidates()
        .map(|c| build_prompt(&inst.history, c, catalog, truncate, max_len))
        .collect()
}

/// Token sequences of one instance; index 0 is the positive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInstance {
    pub user: u32,
    pub prompts: Vec<Vec<u32>>,
}

/// Encodes instances, skipping (and counting) those whose prompts overflow
/// `max_len`.
pub fn encode_instances(
    instances: &[MultipleChoiceInstance],
    catalog: &Catalog,
    truncate: usize,
    max_len: usize,
) -> Result<(Vec<EncodedInstance>, usize)> {
    let mut out = Vec::with_capacity(instances.len());
    let mut rejected = 0;
    for inst in instances {
        let prompts = inst
            .candidates()
            .map(|c| assemble(&inst.history, c, catalog, truncate))
            .collect::<Result<Vec<_>>>()?;
        if prompts.iter().any(|p| p.len() > max_len) {
            rejected += 1;
        } else {
            out.push(EncodedInstance {
                user: inst.user,
                prompts,
            });
        }
    }
    Ok((out, rejected))
}
