//! Routing policy and test-time adaptation loop.
//!
//! The policy is a two-level step on prototype similarity `s*` (the best
//! cosine between the query embedding and any static entry): familiar
//! queries use few working entries and are probed rarely, unfamiliar ones
//! use many and are probed on every sample.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, Tensor};
use crate::backbone::{self, cosine, BackboneError, ImageEncoding, MemoryToken, ModelParams};
use crate::memory::{self, MemoryBank, MemoryError, MemoryKind, UpdateAction, WorkingMemoryConfig};
use crate::metrics::{self, MetricsError};
use crate::synthdata::SampleRecord;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("no static memory and no support set available")]
    NoMemoryAvailable,
    #[error("test-time stream is empty")]
    EmptyStream,
    #[error("invalid controller config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub tau_route: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub probe_period_similar: usize,
    pub probe_period_dissimilar: usize,
    /// When false every plan is static-only: no working retrieval, no probes.
    pub working_memory: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            tau_route: 0.8,
            k_min: 1,
            k_max: 8,
            probe_period_similar: 4,
            probe_period_dissimilar: 1,
            working_memory: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.k_min > self.k_max {
            return Err(ControllerError::ConfigInvalid("k_min exceeds k_max".into()));
        }
        if self.probe_period_similar == 0 || self.probe_period_dissimilar == 0 {
            return Err(ControllerError::ConfigInvalid(
                "probe periods must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Same policy with a fixed working retrieval size.
    pub fn with_k(&self, k: usize) -> Self {
        Self {
            k_min: k,
            k_max: k,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    StaticOnly,
    FewShot,
    StaticPlusWorking,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::StaticOnly => "static_only",
            Mode::FewShot => "fewshot",
            Mode::StaticPlusWorking => "static_plus_working",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutePlan {
    pub mode: Mode,
    pub k_working: usize,
    pub probe_this_sample: bool,
    pub probe_period: usize,
    /// Best cosine to a static embedding; `-inf` with no static entries.
    pub prototype_similarity: f64,
}

/// Best cosine between `query` and the static embeddings.
pub fn prototype_similarity(bank: &MemoryBank, query: &[f64]) -> f64 {
    bank.static_entries()
        .iter()
        .map(|e| cosine(query, e.embedding()))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Pure function of the static embeddings, the query, the flags, the
/// config and the stream index.
pub fn route(
    bank: &MemoryBank,
    query: &[f64],
    support_available: bool,
    stream_index: usize,
    cfg: &ControllerConfig,
) -> Result<RoutePlan, ControllerError> {
    cfg.validate()?;
    let s_star = prototype_similarity(bank, query);
    if bank.static_entries().is_empty() {
        if !support_available {
            return Err(ControllerError::NoMemoryAvailable);
        }
        return Ok(RoutePlan {
            mode: Mode::FewShot,
            k_working: 0,
            probe_this_sample: false,
            probe_period: 1,
            prototype_similarity: s_star,
        });
    }
    if !cfg.working_memory {
        return Ok(RoutePlan {
            mode: Mode::StaticOnly,
            k_working: 0,
            probe_this_sample: false,
            probe_period: 1,
            prototype_similarity: s_star,
        });
    }
    let (k_working, probe_period) = if s_star >= cfg.tau_route {
        (cfg.k_min, cfg.probe_period_similar)
    } else {
        (cfg.k_max, cfg.probe_period_dissimilar)
    };
    Ok(RoutePlan {
        mode: Mode::StaticPlusWorking,
        k_working,
        probe_this_sample: stream_index.is_multiple_of(probe_period),
        probe_period,
        prototype_similarity: s_star,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub mask_probs: Tensor,
    pub obj_prob: f64,
    /// Source ids of the entries the segmenter was conditioned on.
    pub used: Vec<String>,
}

/// Conditions the backbone as the plan says. Retrieval of working entries
/// updates their usage counters.
pub fn infer(
    params: &ModelParams,
    bank: &mut MemoryBank,
    image: &Tensor,
    plan: &RoutePlan,
) -> Result<Inference, ControllerError> {
    let encoding = backbone::encode_image(params, image)?;
    infer_encoded(params, bank, &encoding, plan)
}

pub fn infer_encoded(
    params: &ModelParams,
    bank: &mut MemoryBank,
    encoding: &ImageEncoding,
    plan: &RoutePlan,
) -> Result<Inference, ControllerError> {
    let mut used = Vec::new();
    let mut tokens: Vec<MemoryToken> = Vec::new();
    let base = match plan.mode {
        Mode::FewShot => MemoryKind::FewShot,
        Mode::StaticOnly | Mode::StaticPlusWorking => MemoryKind::Static,
    };
    for e in bank.entries(base) {
        used.push(e.source_id().to_string());
        tokens.push(e.token().clone());
    }
    if plan.mode == Mode::StaticPlusWorking && plan.k_working > 0 {
        for e in memory::retrieve(bank, &encoding.embedding, plan.k_working, &[MemoryKind::Working]) {
            used.push(e.source_id().to_string());
            tokens.push(e.token().clone());
        }
    }
    let out = backbone::segment_encoded(params, &encoding.tokens, &tokens)?;
    Ok(Inference {
        mask_probs: out.mask_logits.map(sigmoid),
        obj_prob: sigmoid(out.obj_logit),
        used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaRecord {
    pub index: usize,
    pub sample_id: u64,
    pub s_star: f64,
    pub mode: Mode,
    pub k_working: usize,
    /// Dice against ground truth, measured before any update from this sample.
    pub dice: f64,
    pub action: Option<UpdateAction>,
}

impl TtaRecord {
    pub const CSV_HEADER: &'static str = "index,s_star,mode,k,dice,action,alpha";

    pub fn csv_row(&self) -> String {
        let (action, alpha) = match &self.action {
            Some(a) => (a.name(), a.alpha()),
            None => ("none", 0.0),
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.index,
            self.s_star,
            self.mode.name(),
            self.k_working,
            self.dice,
            action,
            alpha
        )
    }
}

/// Runs the stream in order: route, infer, score, and on probed samples feed
/// the oracle's correction to the working buffer.
pub fn tta_stream(
    params: &ModelParams,
    mut bank: MemoryBank,
    stream: &[SampleRecord],
    oracle: impl Fn(&SampleRecord) -> Tensor,
    cfg: &ControllerConfig,
    wm_cfg: &WorkingMemoryConfig,
) -> Result<(Vec<TtaRecord>, MemoryBank), ControllerError> {
    if stream.is_empty() {
        return Err(ControllerError::EmptyStream);
    }
    wm_cfg.validate()?;
    let support_available = !bank.fewshot_entries().is_empty();
    let mut records = Vec::with_capacity(stream.len());
    for (index, sample) in stream.iter().enumerate() {
        let encoding = backbone::encode_image(params, &sample.image)?;
        let plan = route(&bank, &encoding.embedding, support_available, index, cfg)?;
        let out = infer_encoded(params, &mut bank, &encoding, &plan)?;
        let pred = metrics::binarize(&out.mask_probs, 0.5);
        let dice = metrics::dice(&pred, &sample.mask)?;
        let action = if plan.probe_this_sample {
            let correction = oracle(sample);
            Some(memory::working_update_with_embedding(
                &mut bank,
                params,
                &sample.image,
                Some(&encoding.embedding),
                &out.mask_probs,
                &correction,
                wm_cfg,
                &format!("sample-{}", sample.sample_id),
            )?)
        } else {
            None
        };
        records.push(TtaRecord {
            index,
            sample_id: sample.sample_id,
            s_star: plan.prototype_similarity,
            mode: plan.mode,
            k_working: plan.k_working,
            dice,
            action,
        });
    }
    Ok((records, bank))
}
