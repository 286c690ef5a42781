//! The memory space: static, few-shot and working entries, retrieval, and
//! bank persistence.
//!
//! Tokens only enter the bank through the memory encoder (or, for working
//! entries, as convex blends of encoder outputs), so every stored token
//! stays on or between points of the encoder's output set.

mod static_mem;
mod working;

pub use static_mem::{
    evaluate_entries, initial_pseudo_obs, learn_static, learn_static_encoded, loss_and_grad, pseudo_obs_grad_check,
    static_entries, EncodedSample, PseudoObservation, StaticConfig, StaticLearner, StaticMemory,
};
pub use working::{working_update, working_update_with_embedding, UpdateAction, WorkingMemoryConfig};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, cosine, BackboneError, MemoryToken, ModelParams, DIM};
use crate::synthdata::SampleRecord;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("model must be frozen before learning memory")]
    NotFrozen,
    #[error("need at least {need} samples, dataset has {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("few-shot support set is empty")]
    EmptySupport,
    #[error("range violation: {0}")]
    RangeViolation(String),
    #[error("invalid memory config: {0}")]
    ConfigInvalid(String),
    #[error("bad bank magic {0:?}")]
    BadMagic(String),
    #[error("unsupported bank version {0}")]
    VersionMismatch(u64),
    #[error("corrupt bank entry {index}: {reason}")]
    CorruptEntry { index: usize, reason: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Static,
    #[serde(rename = "fewshot")]
    FewShot,
    Working,
}

impl MemoryKind {
    pub const ALL: [MemoryKind; 3] = [MemoryKind::Static, MemoryKind::FewShot, MemoryKind::Working];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub(crate) kind: MemoryKind,
    pub(crate) source_id: String,
    pub(crate) token: MemoryToken,
    pub(crate) embedding: Vec<f64>,
    pub(crate) hits: u64,
    pub(crate) last_used: u64,
    pub(crate) ema_count: u64,
}

impl MemoryEntry {
    pub(crate) fn new(kind: MemoryKind, source_id: String, token: MemoryToken, embedding: Vec<f64>) -> Self {
        Self {
            kind,
            source_id,
            token,
            embedding,
            hits: 0,
            last_used: 0,
            ema_count: 0,
        }
    }

    pub fn kind(&self) -> MemoryKind {
        self.kind
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn token(&self) -> &MemoryToken {
        &self.token
    }

    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn last_used(&self) -> u64 {
        self.last_used
    }

    pub fn ema_count(&self) -> u64 {
        self.ema_count
    }
}

/// All three memory kinds plus the bounded working buffer.
///
/// `tick` advances whenever entries are touched (retrieved, added or
/// merged) and is stamped into their `last_used`; it therefore always equals
/// the largest `last_used` in the bank.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    static_entries: Vec<MemoryEntry>,
    fewshot_entries: Vec<MemoryEntry>,
    working_entries: Vec<MemoryEntry>,
    capacity: usize,
    tick: u64,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::ConfigInvalid("working capacity must be positive".into()));
        }
        Ok(Self {
            static_entries: Vec::new(),
            fewshot_entries: Vec::new(),
            working_entries: Vec::new(),
            capacity,
            tick: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn static_entries(&self) -> &[MemoryEntry] {
        &self.static_entries
    }

    pub fn fewshot_entries(&self) -> &[MemoryEntry] {
        &self.fewshot_entries
    }

    pub fn working_entries(&self) -> &[MemoryEntry] {
        &self.working_entries
    }

    pub fn entries(&self, kind: MemoryKind) -> &[MemoryEntry] {
        match kind {
            MemoryKind::Static => &self.static_entries,
            MemoryKind::FewShot => &self.fewshot_entries,
            MemoryKind::Working => &self.working_entries,
        }
    }

    fn entries_mut(&mut self, kind: MemoryKind) -> &mut Vec<MemoryEntry> {
        match kind {
            MemoryKind::Static => &mut self.static_entries,
            MemoryKind::FewShot => &mut self.fewshot_entries,
            MemoryKind::Working => &mut self.working_entries,
        }
    }

    /// Adds static or few-shot entries. Working entries only arrive through
    /// [`working_update`].
    pub fn insert(&mut self, entries: Vec<MemoryEntry>) -> Result<(), MemoryError> {
        for e in entries {
            if e.kind == MemoryKind::Working {
                return Err(MemoryError::ConfigInvalid(
                    "working entries are created by working_update".into(),
                ));
            }
            self.entries_mut(e.kind).push(e);
        }
        Ok(())
    }

    pub fn clear(&mut self, kind: MemoryKind) {
        self.entries_mut(kind).clear();
    }

    pub(crate) fn next_tick(&mut self) -> u64 {
        self.tick += 1;
        self.tick
    }

    pub(crate) fn working_mut(&mut self) -> &mut Vec<MemoryEntry> {
        &mut self.working_entries
    }

    fn all_entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.static_entries
            .iter()
            .chain(&self.fewshot_entries)
            .chain(&self.working_entries)
    }
}

/// Wraps supports as few-shot entries, one per pair, without optimisation.
pub fn encode_fewshot(params: &ModelParams, support: &[SampleRecord]) -> Result<Vec<MemoryEntry>, MemoryError> {
    if support.is_empty() {
        return Err(MemoryError::EmptySupport);
    }
    support
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let token = backbone::encode_memory(params, &s.image, &s.mask)?;
            let embedding = backbone::encode_image(params, &s.image)?.embedding;
            Ok(MemoryEntry::new(
                MemoryKind::FewShot,
                format!("fewshot-{i}"),
                token,
                embedding,
            ))
        })
        .collect()
}

/// Top-`k` entries of the requested kinds by cosine similarity to `query`,
/// most similar first; ties keep insertion order (static, then few-shot,
/// then working, each oldest first). Returned entries have their usage
/// counters bumped; tokens and embeddings are never modified.
pub fn retrieve(bank: &mut MemoryBank, query: &[f64], k: usize, kinds: &[MemoryKind]) -> Vec<MemoryEntry> {
    let mut scored: Vec<(MemoryKind, usize, f64)> = MemoryKind::ALL
        .iter()
        .filter(|kind| kinds.contains(kind))
        .flat_map(|&kind| {
            bank.entries(kind)
                .iter()
                .enumerate()
                .map(move |(i, e)| (kind, i, cosine(query, &e.embedding)))
        })
        .collect();
    scored.sort_by(|a, b| b.2.total_cmp(&a.2));
    scored.truncate(k);
    if scored.is_empty() {
        return Vec::new();
    }
    let tick = bank.next_tick();
    scored
        .into_iter()
        .map(|(kind, i, _)| {
            let e = &mut bank.entries_mut(kind)[i];
            e.hits += 1;
            e.last_used = tick;
            e.clone()
        })
        .collect()
}

pub const BANK_MAGIC: &str = "MEMSEG-B";
pub const BANK_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct BankFile {
    magic: String,
    version: u64,
    #[serde(rename = "capacity_B")]
    capacity: usize,
    tick: u64,
    entries: Vec<MemoryEntry>,
}

#[derive(Deserialize)]
struct BankHeader {
    magic: String,
    version: u64,
}

impl MemoryBank {
    pub fn to_json(&self) -> Result<String, MemoryError> {
        let file = BankFile {
            magic: BANK_MAGIC.into(),
            version: BANK_VERSION,
            capacity: self.capacity,
            tick: self.tick,
            entries: self.all_entries().cloned().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self, MemoryError> {
        let header: BankHeader = serde_json::from_str(json)?;
        if header.magic != BANK_MAGIC {
            return Err(MemoryError::BadMagic(header.magic));
        }
        if header.version != BANK_VERSION {
            return Err(MemoryError::VersionMismatch(header.version));
        }
        let file: BankFile = serde_json::from_str(json)?;
        let mut bank = MemoryBank::new(file.capacity)?;
        bank.tick = file.tick;
        for (index, e) in file.entries.into_iter().enumerate() {
            let corrupt = |reason: String| MemoryError::CorruptEntry { index, reason };
            if e.token.0.len() != DIM {
                return Err(corrupt(format!("token has {} values, expected {DIM}", e.token.0.len())));
            }
            if e.embedding.len() != DIM {
                return Err(corrupt(format!(
                    "embedding has {} values, expected {DIM}",
                    e.embedding.len()
                )));
            }
            if !e.token.0.iter().chain(&e.embedding).all(|v| v.is_finite()) {
                return Err(corrupt("non-finite value".into()));
            }
            let norm = cosine(&e.embedding, &e.embedding).sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(corrupt(format!("embedding norm {norm}")));
            }
            if e.last_used > bank.tick {
                return Err(corrupt(format!(
                    "last used at tick {} after bank tick {}",
                    e.last_used, bank.tick
                )));
            }
            bank.entries_mut(e.kind).push(e);
        }
        if bank.working_entries.len() > bank.capacity {
            return Err(MemoryError::CorruptEntry {
                index: bank.capacity,
                reason: "working entries exceed capacity_B".into(),
            });
        }
        Ok(bank)
    }
}

pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<(), MemoryError> {
    std::fs::write(path, bank.to_json()?)?;
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<MemoryBank, MemoryError> {
    MemoryBank::from_json(&std::fs::read_to_string(path)?)
}
