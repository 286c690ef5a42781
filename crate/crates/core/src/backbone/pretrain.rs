use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{graph, BackboneError, ModelParams, Weights};
use crate::autodiff::{Tape, Tensor};
use crate::optim::{AdamW, OptimConfig};
use crate::synthdata::{self, DomainSpec, SampleRecord, SynthError, TaskSpec, Texture};

/// A query with support pairs from the same task and domain, plus
/// same-task pairs rendered under a different appearance.
#[derive(Clone, Debug)]
pub struct Episode {
    pub query: SampleRecord,
    pub supports: Vec<SampleRecord>,
    pub off_domain: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Epochs with matching supports only.
    pub epochs: usize,
    /// Epochs of the second stage, which mixes off-domain pairs into the
    /// memory. It restarts the optimiser at `mixed_lr`.
    pub mixed_epochs: usize,
    pub mixed_lr: f64,
    pub batch_size: usize,
    /// Size of the episode pool one epoch sweeps over.
    pub episodes: usize,
    pub max_supports: usize,
    /// Upper bound on off-domain pairs mixed into one episode's memory.
    pub max_off_domain: usize,
    /// Share of second-stage episodes whose memory holds off-domain pairs
    /// only, so the query's target cannot be read from memory.
    pub support_free_prob: f64,
    pub optim: OptimConfig,
    /// Minibatch shuffling.
    pub seed: u64,
    /// Episode pool generation.
    pub episode_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            mixed_epochs: 40,
            mixed_lr: 1e-3,
            batch_size: 8,
            episodes: 1000,
            max_supports: 3,
            max_off_domain: 4,
            support_free_prob: 0.5,
            optim: OptimConfig::default(),
            seed: 0,
            episode_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
}

/// Random appearance for one pretraining episode: foreground, background
/// and distractor intensities at least 0.2 apart, random noise, stripes half
/// of the time. Training across many appearances forces the decoder to read
/// the target's look from memory instead of memorising one contrast.
pub fn random_domain(rng: &mut ChaCha8Rng) -> DomainSpec {
    let (fg, bg, dist) = loop {
        let v: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let gap = (v[0] - v[1]).abs().min((v[0] - v[2]).abs()).min((v[1] - v[2]).abs());
        if gap >= 0.2 {
            break (v[0], v[1], v[2]);
        }
    };
    let noise_std = rng.random_range(0.0..0.1);
    let texture = if rng.random_bool(0.5) {
        Texture::Stripes {
            period: rng.random_range(4..12) as f64,
            amplitude: rng.random_range(0.05..0.2),
        }
    } else {
        Texture::None
    };
    DomainSpec {
        name: "random".into(),
        fg_intensity: fg,
        bg_intensity: bg,
        noise_std,
        texture,
        contrast_inverted: false,
        blur_radius: 0,
        distractor_intensity: Some(dist),
    }
}

/// Builds `n` episodes over `tasks`, each with `max_supports` supports and
/// `max_off_domain` off-domain pairs (training draws a random prefix of
/// each).
pub fn synth_episodes(
    tasks: &[TaskSpec],
    n: usize,
    max_supports: usize,
    max_off_domain: usize,
    seed: u64,
) -> Result<Vec<Episode>, SynthError> {
    if tasks.is_empty() || n == 0 || max_supports == 0 {
        return Err(SynthError::ConfigInvalid(
            "episodes need tasks, n >= 1 and supports >= 1".into(),
        ));
    }
    (0..n as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let task = &tasks[rng.random_range(0..tasks.len())];
            let domain = random_domain(&mut rng);
            let sample_seed: u64 = rng.random();
            let mut samples = (0..=max_supports as u64)
                .map(|j| synthdata::generate_one(task, &domain, sample_seed, j))
                .collect::<Result<Vec<_>, _>>()?;
            let query = samples.remove(0);
            let other = random_domain(&mut rng);
            let other_seed: u64 = rng.random();
            let off_domain = (0..max_off_domain as u64)
                .map(|j| synthdata::generate_one(task, &other, other_seed, j))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Episode {
                query,
                supports: samples,
                off_domain,
            })
        })
        .collect()
}

/// Episode loss summed over a batch, recorded on `tape`.
pub(crate) fn batch_loss(
    tape: &mut Tape,
    w: &Weights<crate::autodiff::Var>,
    batch: &[(&Episode, usize, usize)],
) -> Result<crate::autodiff::Var, BackboneError> {
    let mut total = None;
    for (ep, k, j) in batch {
        let x = tape.constant(ep.query.image.clone());
        let tokens = graph::image_tokens(tape, w, x)?;
        let mems = ep.supports[..*k]
            .iter()
            .chain(&ep.off_domain[..*j])
            .map(|s| {
                let sx = tape.constant(s.image.clone());
                let sy = tape.constant(s.mask.clone());
                graph::memory_token(tape, w, sx, sy)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let memory = tape.concat_rows(&mems)?;
        let out = graph::decode(tape, w, tokens, memory)?;
        let l = graph::loss(tape, out.mask_logits, out.obj_logit, &ep.query.mask)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(tape.scale(total, 1.0 / batch.len() as f64)?)
}

/// Trains every weight on support -> query episodes, then freezes.
///
/// The first stage conditions only on supports that share the query's
/// appearance. The second adds same-task pairs of another appearance, so
/// the decoder learns to rely on the memories that look like the query.
/// A share of those episodes hold off-domain pairs only, which stops the
/// decoder from segmenting without help from memory. Training with mixed memory from the start collapses to a constant
/// prediction. Deterministic in (params, episodes, cfg).
pub fn pretrain(
    params: ModelParams,
    episodes: &[Episode],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(ModelParams, PretrainReport), BackboneError> {
    if params.is_frozen() {
        return Err(BackboneError::FrozenViolation);
    }
    if episodes.is_empty() || cfg.batch_size == 0 || episodes.iter().any(|e| e.supports.is_empty()) {
        return Err(BackboneError::ShapeMismatch(
            "pretraining needs nonempty episodes and batches".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.support_free_prob) {
        return Err(BackboneError::ConfigInvalid(format!(
            "support_free_prob {} must be in [0, 1]",
            cfg.support_free_prob
        )));
    }
    let mut weights: Vec<Tensor> = params.weights().values().into_iter().cloned().collect();
    let mut report = PretrainReport::default();
    let mixed_optim = OptimConfig {
        lr: cfg.mixed_lr,
        ..cfg.optim.clone()
    };
    for (epochs, optim, max_off) in [
        (cfg.epochs, &cfg.optim, None),
        (cfg.mixed_epochs, &mixed_optim, Some(cfg.max_off_domain)),
    ] {
        if epochs == 0 {
            continue;
        }
        weights = run_stage(
            weights,
            episodes,
            cfg,
            epochs,
            optim,
            max_off,
            &mut report,
            &mut progress,
        )?;
    }
    let mut trained = ModelParams::from_weights(Weights::from_values(weights), params.init_seed())?;
    trained.freeze();
    Ok((trained, report))
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    mut weights: Vec<Tensor>,
    episodes: &[Episode],
    cfg: &PretrainConfig,
    epochs: usize,
    optim: &OptimConfig,
    max_off_domain: Option<usize>,
    report: &mut PretrainReport,
    progress: &mut impl FnMut(usize, f64),
) -> Result<Vec<Tensor>, BackboneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(optim.clone(), weights.iter().map(|t| t.numel()));
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Episode, usize, usize)> = chunk
                .iter()
                .map(|&i| {
                    let ep = &episodes[i];
                    let k = rng.random_range(1..=ep.supports.len().min(cfg.max_supports.max(1)));
                    let j = match max_off_domain {
                        Some(m) => rng.random_range(0..=ep.off_domain.len().min(m)),
                        None => 0,
                    };
                    let m = ep.off_domain.len().min(max_off_domain.unwrap_or(0));
                    if m > 0 && cfg.support_free_prob > 0.0 && rng.random_bool(cfg.support_free_prob) {
                        return (ep, 0, j.max(1));
                    }
                    (ep, k, j)
                })
                .collect();
            let mut tape = Tape::new();
            let current = Weights::from_values(weights.clone());
            let w = graph::bind(&mut tape, &current, true);
            let l = batch_loss(&mut tape, &w, &batch)?;
            epoch_loss += tape.value(l).item();
            batches += 1;
            let grads = tape.backward(l)?;
            let vars = w.values();
            let g: Vec<&Tensor> = vars.iter().map(|v| grads.get(**v)).collect::<Result<_, _>>()?;
            let p: Vec<&Tensor> = weights.iter().collect();
            weights = opt.step(&p, &g);
            report.steps += 1;
        }
        let mean = epoch_loss / batches as f64;
        progress(report.epoch_losses.len(), mean);
        report.epoch_losses.push(mean);
    }
    Ok(weights)
}
