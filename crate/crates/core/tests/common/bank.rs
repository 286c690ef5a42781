//! Random working-memory updates with everything needed to check the
//! update gates afterwards.

use std::sync::OnceLock;

use memseg::autodiff::Tensor;
use memseg::backbone::{self, cosine, ModelParams};
use memseg::memory::{self, MemoryBank, UpdateAction, WorkingMemoryConfig};
use memseg::metrics;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn model() -> &'static ModelParams {
    static MODEL: OnceLock<ModelParams> = OnceLock::new();
    MODEL.get_or_init(|| super::frozen_init(3))
}

/// A handful of base images; updates draw from them (with small jitter
/// sometimes) so merges are as common as additions.
pub fn image(rng: &mut ChaCha8Rng) -> Tensor {
    let base = rng.random_range(0..4u64);
    let jitter = if rng.random_bool(0.5) { 0.0 } else { 0.05 };
    let mut pick = ChaCha8Rng::seed_from_u64(base);
    Tensor::from_fn(32, 32, |_, _| {
        (pick.random::<f64>() + jitter * rng.random::<f64>()).clamp(0.0, 1.0)
    })
}

pub fn probs(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(32, 32, |_, _| rng.random::<f64>())
}

pub fn binary(rng: &mut ChaCha8Rng, p: f64) -> Tensor {
    Tensor::from_fn(32, 32, |_, _| rng.random_bool(p) as u8 as f64)
}

pub fn wm_config(rng: &mut ChaCha8Rng, capacity: usize) -> WorkingMemoryConfig {
    WorkingMemoryConfig {
        tau_dice: rng.random_range(0.05..0.95),
        tau_sim: rng.random_range(0.5..0.999),
        alpha0: rng.random_range(0.05..1.0),
        capacity,
        k_default: 4,
    }
}

pub struct Outcome {
    pub before: MemoryBank,
    pub after: MemoryBank,
    pub action: UpdateAction,
    pub dice: f64,
    pub s_star: f64,
    pub m_t: Vec<f64>,
}

pub fn step(bank: &mut MemoryBank, rng: &mut ChaCha8Rng, cfg: &WorkingMemoryConfig, id: usize) -> Outcome {
    let params = model();
    let img = image(rng);
    let pred = probs(rng);
    let density = rng.random_range(0.1..0.9);
    let corrected = binary(rng, density);
    let before = bank.clone();
    let e_t = backbone::encode_image(params, &img).unwrap().embedding;
    let s_star = before
        .working_entries()
        .iter()
        .map(|e| cosine(&e_t, e.embedding()))
        .fold(f64::NEG_INFINITY, f64::max);
    let dice = metrics::dice(&metrics::binarize(&pred, 0.5), &corrected).unwrap();
    let m_t = backbone::encode_memory(params, &img, &corrected).unwrap().0;
    let action = memory::working_update(bank, params, &img, &pred, &corrected, cfg, &format!("s{id}")).unwrap();
    Outcome {
        before,
        after: bank.clone(),
        action,
        dice,
        s_star,
        m_t,
    }
}
