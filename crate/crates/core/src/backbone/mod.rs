//! The frozen toy segmenter.
//!
//! Image encoder: 4x4 patches of a 32x32 image, a ReLU patch embedding plus
//! learned positions, and one self-attention block. Memory encoder: the same
//! patching over (image, mask) channels, mean-pooled and projected to a
//! single token. Decoder: single-head cross-attention from image tokens to
//! memory tokens, a residual MLP, a per-token 16-pixel head and a pooled
//! objectness head.

pub mod graph;
mod pretrain;
mod weights;

pub use pretrain::{pretrain, random_domain, synth_episodes, Episode, PretrainConfig, PretrainReport};
pub use weights::{
    param_count, ArchConstants, Checkpoint, ModelParams, NamedArray, Weights, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};

pub const IMAGE: usize = 32;
pub const PATCH: usize = 4;
pub const PATCH_AREA: usize = PATCH * PATCH;
pub const TOKENS: usize = (IMAGE / PATCH) * (IMAGE / PATCH);
pub const DIM: usize = 32;
pub const MLP_HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{what} value {value} outside [0, 1]")]
    RangeViolation { what: &'static str, value: f64 },
    #[error("segment needs at least one memory token")]
    EmptyMemory,
    #[error("model weights are frozen")]
    FrozenViolation,
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A point in memory space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MemoryToken(pub Vec<f64>);

impl MemoryToken {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// An image with its mask, both 32x32 with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SliceObservation {
    pub image: Tensor,
    pub mask: Tensor,
}

impl SliceObservation {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self, BackboneError> {
        check_image(&image, "image")?;
        check_image(&mask, "mask")?;
        Ok(Self { image, mask })
    }
}

fn check_image(t: &Tensor, what: &'static str) -> Result<(), BackboneError> {
    if t.shape() != [IMAGE, IMAGE] {
        return Err(BackboneError::ShapeMismatch(format!(
            "{what} must be {IMAGE}x{IMAGE}, got {:?}",
            t.shape()
        )));
    }
    const SLACK: f64 = 1e-9;
    if let Some(&value) = t.data().iter().find(|&&v| !(-SLACK..=1.0 + SLACK).contains(&v)) {
        return Err(BackboneError::RangeViolation { what, value });
    }
    Ok(())
}

fn check_shape(t: &Tensor, what: &str) -> Result<(), BackboneError> {
    if t.shape() != [IMAGE, IMAGE] {
        return Err(BackboneError::ShapeMismatch(format!(
            "{what} must be {IMAGE}x{IMAGE}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Encoder tokens plus the pooled, L2-normalised semantic embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding {
    pub tokens: Tensor,
    pub embedding: Vec<f64>,
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Degenerate input; fall back to a fixed unit vector.
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        return e;
    }
    v.iter().map(|x| x / norm).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Semantic embedding of an encoder token matrix.
pub fn embed_tokens(tokens: &Tensor) -> Vec<f64> {
    let (rows, cols) = tokens.dims2().expect("token matrix");
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(tokens.row_slice(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    normalize(&mean)
}

/// Runs the image encoder. Pixel values are not range-checked because
/// pseudo-images are unconstrained reals.
pub fn encode_image(params: &ModelParams, image: &Tensor) -> Result<ImageEncoding, BackboneError> {
    check_shape(image, "image")?;
    let mut tape = Tape::new();
    let w = graph::bind(&mut tape, params.weights(), false);
    let x = tape.constant(image.clone());
    let tokens = graph::image_tokens(&mut tape, &w, x)?;
    let tokens = tape.value(tokens).clone();
    let embedding = embed_tokens(&tokens);
    Ok(ImageEncoding { tokens, embedding })
}

pub fn encode_memory(params: &ModelParams, image: &Tensor, mask_probs: &Tensor) -> Result<MemoryToken, BackboneError> {
    check_shape(image, "image")?;
    check_image(mask_probs, "mask_probs")?;
    let mut tape = Tape::new();
    let w = graph::bind(&mut tape, params.weights(), false);
    let x = tape.constant(image.clone());
    let y = tape.constant(mask_probs.clone());
    let m = graph::memory_token(&mut tape, &w, x, y)?;
    Ok(MemoryToken(tape.value(m).data().to_vec()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentOutput {
    pub mask_logits: Tensor,
    pub obj_logit: f64,
    /// 64 x n cross-attention weights, columns in canonical memory order.
    pub attention: Tensor,
}

/// Memory tokens sorted into a canonical order. Attention is mathematically
/// invariant to key order; sorting makes it bit-exact too, since the softmax
/// and weighted sums then always accumulate in the same order.
fn canonical_memory(memories: &[MemoryToken]) -> Result<Tensor, BackboneError> {
    if memories.is_empty() {
        return Err(BackboneError::EmptyMemory);
    }
    let mut sorted: Vec<&MemoryToken> = memories.iter().collect();
    for m in &sorted {
        if m.0.len() != DIM {
            return Err(BackboneError::ShapeMismatch(format!(
                "memory token of length {}",
                m.0.len()
            )));
        }
    }
    sorted.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(Tensor::matrix(
        sorted.len(),
        DIM,
        sorted.iter().flat_map(|m| m.0.iter().copied()).collect(),
    ))
}

pub fn segment(params: &ModelParams, image: &Tensor, memories: &[MemoryToken]) -> Result<SegmentOutput, BackboneError> {
    check_shape(image, "image")?;
    let encoding = encode_image(params, image)?;
    segment_encoded(params, &encoding.tokens, memories)
}

/// `segment` for an image whose encoder tokens are already known.
pub fn segment_encoded(
    params: &ModelParams,
    tokens: &Tensor,
    memories: &[MemoryToken],
) -> Result<SegmentOutput, BackboneError> {
    if tokens.shape() != [TOKENS, DIM] {
        return Err(BackboneError::ShapeMismatch(format!("tokens {:?}", tokens.shape())));
    }
    let memory = canonical_memory(memories)?;
    let mut tape = Tape::new();
    let w = graph::bind(&mut tape, params.weights(), false);
    let t = tape.constant(tokens.clone());
    let m = tape.constant(memory);
    let out = graph::decode(&mut tape, &w, t, m)?;
    Ok(SegmentOutput {
        mask_logits: tape.value(out.mask_logits).clone(),
        obj_logit: tape.value(out.obj_logit).item(),
        attention: tape.value(out.attention).clone(),
    })
}

/// `L_dice + 0.3 * L_obj` for one prediction.
pub fn loss(mask_logits: &Tensor, obj_logit: f64, gt_mask: &Tensor) -> Result<f64, BackboneError> {
    check_shape(mask_logits, "mask_logits")?;
    check_shape(gt_mask, "gt_mask")?;
    let mut tape = Tape::new();
    let z = tape.constant(mask_logits.clone());
    let o = tape.constant(Tensor::scalar(obj_logit));
    let l = graph::loss(&mut tape, z, o, gt_mask)?;
    Ok(tape.value(l).item())
}
