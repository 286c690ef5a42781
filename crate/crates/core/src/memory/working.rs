use serde::{Deserialize, Serialize};

use super::{MemoryBank, MemoryEntry, MemoryError, MemoryKind};
use crate::autodiff::Tensor;
use crate::backbone::{self, cosine, normalize, MemoryToken, ModelParams, IMAGE};
use crate::metrics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkingMemoryConfig {
    pub tau_dice: f64,
    pub tau_sim: f64,
    pub alpha0: f64,
    pub capacity: usize,
    pub k_default: usize,
}

impl Default for WorkingMemoryConfig {
    fn default() -> Self {
        Self {
            tau_dice: 0.85,
            tau_sim: 0.99,
            alpha0: 0.5,
            capacity: 32,
            k_default: 8,
        }
    }
}

impl WorkingMemoryConfig {
    pub fn validate(&self) -> Result<(), MemoryError> {
        let bad = |m: &str| Err(MemoryError::ConfigInvalid(m.into()));
        if !(self.tau_dice > 0.0 && self.tau_dice < 1.0) {
            return bad("tau_dice must be in (0, 1)");
        }
        // A non-positive similarity gate would allow merges with alpha <= 0.
        if !(self.tau_sim > 0.0 && self.tau_sim < 1.0) {
            return bad("tau_sim must be in (0, 1)");
        }
        if !(self.alpha0 > 0.0 && self.alpha0 <= 1.0) {
            return bad("alpha0 must be in (0, 1]");
        }
        if self.capacity == 0 || self.k_default == 0 {
            return bad("capacity and k_default must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum UpdateAction {
    Skipped { dice: f64 },
    Added { entry_id: String },
    Merged { entry_id: String, alpha: f64 },
}

impl UpdateAction {
    pub fn name(&self) -> &'static str {
        match self {
            UpdateAction::Skipped { .. } => "skipped",
            UpdateAction::Added { .. } => "added",
            UpdateAction::Merged { .. } => "merged",
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            UpdateAction::Merged { alpha, .. } => *alpha,
            _ => 0.0,
        }
    }
}

fn check_masks(pred: &Tensor, corrected: &Tensor) -> Result<(), MemoryError> {
    for (t, what) in [(pred, "predicted mask"), (corrected, "corrected mask")] {
        if t.shape() != [IMAGE, IMAGE] {
            return Err(MemoryError::RangeViolation(format!("{what} has shape {:?}", t.shape())));
        }
    }
    if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MemoryError::RangeViolation(format!("predicted probability {v}")));
    }
    if let Some(v) = corrected.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(MemoryError::RangeViolation(format!("corrected mask value {v}")));
    }
    Ok(())
}

/// Gated update of the working buffer from one corrected prediction.
pub fn working_update(
    bank: &mut MemoryBank,
    params: &ModelParams,
    image: &Tensor,
    predicted_probs: &Tensor,
    corrected: &Tensor,
    cfg: &WorkingMemoryConfig,
    source_id: &str,
) -> Result<UpdateAction, MemoryError> {
    working_update_with_embedding(bank, params, image, None, predicted_probs, corrected, cfg, source_id)
}

/// As [`working_update`], reusing the image's semantic embedding when the
/// caller already has it.
#[allow(clippy::too_many_arguments)]
pub fn working_update_with_embedding(
    bank: &mut MemoryBank,
    params: &ModelParams,
    image: &Tensor,
    embedding: Option<&[f64]>,
    predicted_probs: &Tensor,
    corrected: &Tensor,
    cfg: &WorkingMemoryConfig,
    source_id: &str,
) -> Result<UpdateAction, MemoryError> {
    cfg.validate()?;
    check_masks(predicted_probs, corrected)?;
    let d = metrics::dice(&metrics::binarize(predicted_probs, 0.5), corrected)
        .map_err(|e| MemoryError::RangeViolation(e.to_string()))?;
    if d >= cfg.tau_dice {
        return Ok(UpdateAction::Skipped { dice: d });
    }
    let m_t = backbone::encode_memory(params, image, corrected)?;
    let e_t = match embedding {
        Some(e) => e.to_vec(),
        None => backbone::encode_image(params, image)?.embedding,
    };

    // Most similar working entry; the first one wins ties.
    let best = bank
        .working_entries()
        .iter()
        .enumerate()
        .map(|(j, e)| (j, cosine(&e_t, &e.embedding)))
        .fold(None, |acc: Option<(usize, f64)>, (j, s)| match acc {
            Some((_, best)) if best >= s => acc,
            _ => Some((j, s)),
        });
    let s_star = best.map_or(f64::NEG_INFINITY, |(_, s)| s);

    if s_star < cfg.tau_sim {
        let tick = bank.next_tick();
        let capacity = bank.capacity();
        let working = bank.working_mut();
        if working.len() >= capacity {
            // Least recently used; the oldest insertion wins ties.
            let lru = (0..working.len())
                .min_by_key(|&j| working[j].last_used)
                .expect("nonempty");
            working.remove(lru);
        }
        let mut entry = MemoryEntry::new(MemoryKind::Working, source_id.to_string(), m_t, e_t);
        entry.last_used = tick;
        working.push(entry);
        return Ok(UpdateAction::Added {
            entry_id: source_id.to_string(),
        });
    }

    let (j, _) = best.expect("similarity above a finite gate implies an entry");
    let conf = (1.0 - d).clamp(0.0, 1.0);
    let alpha = cfg.alpha0 * s_star * conf;
    let tick = bank.next_tick();
    let e = &mut bank.working_mut()[j];
    e.token = MemoryToken(
        e.token
            .0
            .iter()
            .zip(&m_t.0)
            .map(|(old, new)| (1.0 - alpha) * old + alpha * new)
            .collect(),
    );
    let blended: Vec<f64> = e
        .embedding
        .iter()
        .zip(&e_t)
        .map(|(old, new)| (1.0 - alpha) * old + alpha * new)
        .collect();
    e.embedding = normalize(&blended);
    e.ema_count += 1;
    e.last_used = tick;
    Ok(UpdateAction::Merged {
        entry_id: e.source_id.clone(),
        alpha,
    })
}
