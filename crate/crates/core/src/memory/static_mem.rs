//! Static memory learned by optimising pseudo-observations through the
//! frozen memory encoder and segmenter. Only the pseudo-observations move.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MemoryEntry, MemoryError, MemoryKind};
use crate::autodiff::{sigmoid, OpKind, Tape, Tensor};
use crate::backbone::{self, graph, ModelParams};
use crate::metrics::{self, EvalRecord};
use crate::optim::{AdamW, OptimConfig};
use crate::synthdata::SampleRecord;

/// Clamp applied to seed masks before taking the logit.
const LOGIT_CLAMP: f64 = 1e-3;

/// A learnable image/mask pair; the mask is stored as logits so the encoder
/// always sees probabilities in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoObservation {
    pub x_hat: Tensor,
    pub y_logits: Tensor,
}

impl PseudoObservation {
    pub fn from_sample(image: &Tensor, mask: &Tensor) -> Self {
        let y_logits = mask.map(|m| {
            let p = m.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
            (p / (1.0 - p)).ln()
        });
        Self {
            x_hat: image.clone(),
            y_logits,
        }
    }

    pub fn mask_probs(&self) -> Tensor {
        self.y_logits.map(sigmoid)
    }

    pub fn numel(&self) -> usize {
        self.x_hat.numel() + self.y_logits.numel()
    }

    pub fn is_finite(&self) -> bool {
        self.x_hat.all_finite() && self.y_logits.all_finite()
    }
}

/// A labelled sample with its encoder tokens precomputed; the image encoder
/// is frozen, so tokens never change during memory learning.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub tokens: Tensor,
    pub mask: Tensor,
}

impl EncodedSample {
    pub fn encode(params: &ModelParams, sample: &SampleRecord) -> Result<Self, MemoryError> {
        Ok(Self {
            tokens: backbone::encode_image(params, &sample.image)?.tokens,
            mask: sample.mask.clone(),
        })
    }

    pub fn encode_all(params: &ModelParams, samples: &[SampleRecord]) -> Result<Vec<Self>, MemoryError> {
        samples.iter().map(|s| Self::encode(params, s)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StaticConfig {
    pub n: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for StaticConfig {
    fn default() -> Self {
        Self {
            n: 4,
            steps: 300,
            batch_size: 8,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticMemory {
    pub entries: Vec<MemoryEntry>,
    pub pseudo_obs: Vec<PseudoObservation>,
    /// Minibatch loss before each step.
    pub curve: Vec<f64>,
}

/// Minibatch optimiser over a fixed set of pseudo-observations.
#[derive(Clone, Debug)]
pub struct StaticLearner {
    opt: AdamW,
    rng: ChaCha8Rng,
    batch_size: usize,
}

impl StaticLearner {
    pub fn new(n: usize, cfg: &StaticConfig, seed: u64) -> Self {
        let size = 2 * backbone::IMAGE * backbone::IMAGE;
        Self {
            opt: AdamW::new(cfg.optim.clone(), (0..2 * n).map(|_| size / 2)),
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_size: cfg.batch_size,
        }
    }

    /// Indices for the next minibatch: the whole set, in order, when it fits
    /// in one batch, otherwise a seeded draw without replacement.
    fn next_batch(&mut self, len: usize) -> Vec<usize> {
        if len <= self.batch_size {
            (0..len).collect()
        } else {
            index::sample(&mut self.rng, len, self.batch_size).into_vec()
        }
    }

    /// One optimiser step; returns the minibatch loss before the update.
    pub fn step(
        &mut self,
        params: &ModelParams,
        data: &[EncodedSample],
        z: &mut [PseudoObservation],
    ) -> Result<f64, MemoryError> {
        let batch = self.next_batch(data.len());
        let (loss, grads) = loss_and_grad(params, data, &batch, z)?;
        let current: Vec<&Tensor> = z.iter().flat_map(|p| [&p.x_hat, &p.y_logits]).collect();
        let g: Vec<&Tensor> = grads.iter().collect();
        let mut updated = self.opt.step(&current, &g).into_iter();
        for p in z.iter_mut() {
            p.x_hat = updated.next().expect("x_hat");
            p.y_logits = updated.next().expect("y_logits");
        }
        Ok(loss)
    }
}

/// Mean segmentation loss over `batch` when conditioning on the memory
/// encoded from `z`, with gradients for every `x_hat` and `y_logits` (in
/// that interleaved order).
pub fn loss_and_grad(
    params: &ModelParams,
    data: &[EncodedSample],
    batch: &[usize],
    z: &[PseudoObservation],
) -> Result<(f64, Vec<Tensor>), MemoryError> {
    let mut tape = Tape::new();
    let w = graph::bind(&mut tape, params.weights(), false);
    let mut leaves = Vec::with_capacity(2 * z.len());
    let mut mems = Vec::with_capacity(z.len());
    for p in z {
        let x = tape.leaf(p.x_hat.clone());
        let y = tape.leaf(p.y_logits.clone());
        let probs = tape.sigmoid(y)?;
        mems.push(graph::memory_token(&mut tape, &w, x, probs)?);
        leaves.extend([x, y]);
    }
    let memory = tape.concat_rows(&mems)?;
    let mut total = None;
    for &i in batch {
        let t = tape.constant(data[i].tokens.clone());
        let out = graph::decode(&mut tape, &w, t, memory)?;
        let l = graph::loss(&mut tape, out.mask_logits, out.obj_logit, &data[i].mask)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.ok_or(MemoryError::InsufficientData { need: 1, have: 0 })?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
    let grads = tape.backward(mean)?;
    let g = leaves
        .iter()
        .map(|&v| grads.get(v).cloned())
        .collect::<Result<Vec<_>, _>>()?;
    Ok((tape.value(mean).item(), g))
}

/// Seeds `n` pseudo-observations from distinct samples.
pub fn initial_pseudo_obs(
    dataset: &[SampleRecord],
    n: usize,
    seed: u64,
) -> Result<Vec<PseudoObservation>, MemoryError> {
    if n == 0 || dataset.len() < n {
        return Err(MemoryError::InsufficientData {
            need: n.max(1),
            have: dataset.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, dataset.len(), n).into_vec();
    Ok(picks
        .into_iter()
        .map(|i| PseudoObservation::from_sample(&dataset[i].image, &dataset[i].mask))
        .collect())
}

/// Static entries for pseudo-observations: tokens from the memory encoder,
/// embeddings from the image encoder on the pseudo-image.
pub fn static_entries(params: &ModelParams, z: &[PseudoObservation]) -> Result<Vec<MemoryEntry>, MemoryError> {
    z.iter()
        .enumerate()
        .map(|(i, p)| {
            let token = backbone::encode_memory(params, &p.x_hat, &p.mask_probs())?;
            let embedding = backbone::encode_image(params, &p.x_hat)?.embedding;
            Ok(MemoryEntry::new(
                MemoryKind::Static,
                format!("static-{i}"),
                token,
                embedding,
            ))
        })
        .collect()
}

/// Learns `cfg.n` static entries on `dataset` with the backbone frozen.
pub fn learn_static(
    params: &ModelParams,
    dataset: &[SampleRecord],
    cfg: &StaticConfig,
    seed: u64,
) -> Result<StaticMemory, MemoryError> {
    if !params.is_frozen() {
        return Err(MemoryError::NotFrozen);
    }
    let z = initial_pseudo_obs(dataset, cfg.n, seed)?;
    let encoded = EncodedSample::encode_all(params, dataset)?;
    learn_static_encoded(params, &encoded, z, cfg, seed)
}

/// [`learn_static`] from pre-encoded samples and given initial
/// pseudo-observations.
pub fn learn_static_encoded(
    params: &ModelParams,
    encoded: &[EncodedSample],
    mut z: Vec<PseudoObservation>,
    cfg: &StaticConfig,
    seed: u64,
) -> Result<StaticMemory, MemoryError> {
    if !params.is_frozen() {
        return Err(MemoryError::NotFrozen);
    }
    if encoded.is_empty() || z.is_empty() {
        return Err(MemoryError::InsufficientData {
            need: 1,
            have: encoded.len(),
        });
    }
    let before = params.checksum();
    let mut learner = StaticLearner::new(z.len(), cfg, seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        curve.push(learner.step(params, encoded, &mut z)?);
    }
    assert_eq!(
        before,
        params.checksum(),
        "memory learning must not touch model weights"
    );
    Ok(StaticMemory {
        entries: static_entries(params, &z)?,
        pseudo_obs: z,
        curve,
    })
}

/// Dice and HD95 of the segmenter conditioned on `entries`, one record per
/// sample, thresholding probabilities at 0.5.
pub fn evaluate_entries(
    params: &ModelParams,
    entries: &[MemoryEntry],
    samples: &[SampleRecord],
) -> Result<Vec<EvalRecord>, MemoryError> {
    let tokens: Vec<_> = entries.iter().map(|e| e.token().clone()).collect();
    samples
        .iter()
        .map(|s| {
            let out = backbone::segment(params, &s.image, &tokens)?;
            let pred = metrics::binarize(&out.mask_logits.map(sigmoid), 0.5);
            let err = |e: metrics::MetricsError| MemoryError::RangeViolation(e.to_string());
            Ok(EvalRecord {
                sample_id: s.sample_id,
                dice: metrics::dice(&pred, &s.mask).map_err(err)?,
                hd95: metrics::hd95(&pred, &s.mask).map_err(err)?,
            })
        })
        .collect()
}

/// Worst relative error between the tape gradient of the segmentation loss
/// with respect to `(x_hat, y_logits)` and central differences. The two
/// tensors are stacked into one `64 x 32` input so a single check covers
/// both.
pub fn pseudo_obs_grad_check(
    params: &ModelParams,
    sample: &EncodedSample,
    z: &PseudoObservation,
    eps: f64,
) -> Result<f64, MemoryError> {
    let n = backbone::IMAGE;
    let mut stacked = z.x_hat.data().to_vec();
    stacked.extend_from_slice(z.y_logits.data());
    let x = Tensor::new(vec![2 * n, n], stacked).map_err(MemoryError::from)?;
    let err = crate::autodiff::grad_check(
        |tape, v| {
            let w = graph::bind(tape, params.weights(), false);
            let img = tape.apply(OpKind::SliceRows { start: 0, end: n }, &[v])?;
            let logits = tape.apply(OpKind::SliceRows { start: n, end: 2 * n }, &[v])?;
            let probs = tape.sigmoid(logits)?;
            let mem = graph::memory_token(tape, &w, img, probs)?;
            let t = tape.constant(sample.tokens.clone());
            let out = graph::decode(tape, &w, t, mem)?;
            graph::loss(tape, out.mask_logits, out.obj_logit, &sample.mask)
        },
        &x,
        eps,
    )?;
    Ok(err)
}
