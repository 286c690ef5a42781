use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, HarnessError};
use crate::autodiff::Tensor;
use crate::backbone::{self, ModelParams, IMAGE};
use crate::controller::{self, ControllerConfig, TtaRecord};
use crate::fedsim::{self, ClientState, FedResult};
use crate::memory::{self, EncodedSample, MemoryBank, MemoryEntry, MemoryKind, StaticMemory};
use crate::synthdata::{self, client_domain, make_splits, oracle_correct, SampleRecord, Splits};

/// Loads the pretrained weights named by the config; they must be frozen.
pub fn load_checkpoint(cfg: &ExperimentConfig) -> Result<ModelParams, HarnessError> {
    if !cfg.checkpoint.is_file() {
        return Err(HarnessError::MissingCheckpoint(cfg.checkpoint.clone()));
    }
    let params = ModelParams::load(&cfg.checkpoint)?;
    if !params.is_frozen() {
        return Err(HarnessError::CheckpointNotFrozen(cfg.checkpoint.clone()));
    }
    Ok(params)
}

/// Seeded sample-level subset of `round(fraction * len)` records, kept in
/// their original order.
pub fn subsample(records: &[SampleRecord], fraction: f64, seed: u64) -> Vec<SampleRecord> {
    let n = ((fraction * records.len() as f64).round() as usize).min(records.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let mut picks = index::sample(&mut rng, records.len(), n).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| records[i].clone()).collect()
}

/// Static entries encoded from uniform-noise images paired with coin-flip
/// masks: the uninformed baseline and the ablation filler.
pub fn random_pair_entries(params: &ModelParams, n: usize, seed: u64) -> Result<Vec<MemoryEntry>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let image = Tensor::from_fn(IMAGE, IMAGE, |_, _| rng.random::<f64>());
            let mask = Tensor::from_fn(IMAGE, IMAGE, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
            let token = backbone::encode_memory(params, &image, &mask)?;
            let embedding = backbone::encode_image(params, &image)?.embedding;
            Ok(MemoryEntry::new(
                MemoryKind::Static,
                format!("random-{i}"),
                token,
                embedding,
            ))
        })
        .collect()
}

/// Mean Dice and mean HD95 of the segmenter conditioned on `entries`.
pub fn evaluate(
    params: &ModelParams,
    entries: &[MemoryEntry],
    samples: &[SampleRecord],
) -> Result<(f64, f64), HarnessError> {
    let records = memory::evaluate_entries(params, entries, samples)?;
    let n = records.len().max(1) as f64;
    Ok((
        records.iter().map(|r| r.dice).sum::<f64>() / n,
        records.iter().map(|r| r.hd95).sum::<f64>() / n,
    ))
}

/// Static memory for one seed, learned on the configured supervision
/// subset of `adapt_train`.
pub fn learn_for_seed(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    splits: &Splits,
    fraction: f64,
    seed: u64,
) -> Result<StaticMemory, HarnessError> {
    let train = subsample(&splits.adapt_train, fraction, seed);
    Ok(memory::learn_static(params, &train, &cfg.static_memory, seed)?)
}

/// A bank of working capacity B holding `entries` as its static part.
pub fn static_bank(cfg: &ExperimentConfig, entries: Vec<MemoryEntry>) -> Result<MemoryBank, HarnessError> {
    let mut bank = MemoryBank::new(cfg.working_memory.capacity)?;
    bank.insert(entries)?;
    Ok(bank)
}

fn stream_dice(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    bank: MemoryBank,
    stream: &[SampleRecord],
    ctl: &ControllerConfig,
) -> Result<f64, HarnessError> {
    let (records, _) = controller::tta_stream(params, bank, stream, oracle_correct, ctl, &cfg.working_memory)?;
    Ok(records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRow {
    pub fraction: f64,
    pub seed: u64,
    pub dice: f64,
    pub hd95: f64,
}

impl SupervisionRow {
    pub const CSV_HEADER: &'static str = "fraction,seed,dice,hd95";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.fraction, self.seed, self.dice, self.hd95)
    }
}

/// Learns static memory from each supervision fraction and scores it on
/// `adapt_test`; one row per (fraction, seed).
pub fn run_supervision(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    fractions: &[f64],
) -> Result<Vec<SupervisionRow>, HarnessError> {
    let mut rows = Vec::new();
    for &fraction in fractions {
        for &seed in &cfg.seeds {
            let splits = make_splits(&cfg.data, seed)?;
            let learned = learn_for_seed(cfg, params, &splits, fraction, seed)?;
            let (dice, hd95) = evaluate(params, &learned.entries, &splits.adapt_test)?;
            rows.push(SupervisionRow {
                fraction,
                seed,
                dice,
                hd95,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticVsRandomRow {
    pub seed: u64,
    pub static_dice: f64,
    pub random_dice: f64,
    pub checksum_unchanged: bool,
}

impl StaticVsRandomRow {
    pub const CSV_HEADER: &'static str = "seed,static_dice,random_dice,checksum_unchanged";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.seed, self.static_dice, self.random_dice, self.checksum_unchanged
        )
    }
}

/// Learned static memory against `N` random pairs on `adapt_test`.
pub fn run_static_vs_random(
    cfg: &ExperimentConfig,
    params: &ModelParams,
) -> Result<Vec<StaticVsRandomRow>, HarnessError> {
    let before = params.checksum();
    cfg.seeds
        .iter()
        .map(|&seed| {
            let splits = make_splits(&cfg.data, seed)?;
            let learned = learn_for_seed(cfg, params, &splits, cfg.supervision_fraction, seed)?;
            let random = random_pair_entries(params, cfg.static_memory.n, seed)?;
            Ok(StaticVsRandomRow {
                seed,
                static_dice: evaluate(params, &learned.entries, &splits.adapt_test)?.0,
                random_dice: evaluate(params, &random, &splits.adapt_test)?.0,
                checksum_unchanged: params.checksum() == before,
            })
        })
        .collect()
}

/// Test-time adaptation over the shifted stream, starting from the static
/// memory learned for `seed`.
pub fn run_tta(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    seed: u64,
) -> Result<(Vec<TtaRecord>, MemoryBank), HarnessError> {
    let splits = make_splits(&cfg.data, seed)?;
    let learned = learn_for_seed(cfg, params, &splits, cfg.supervision_fraction, seed)?;
    let bank = static_bank(cfg, learned.entries)?;
    Ok(controller::tta_stream(
        params,
        bank,
        &splits.shifted_test,
        oracle_correct,
        &cfg.controller,
        &cfg.working_memory,
    )?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    StaticPlusWorking,
    StaticOnly,
    WorkingOnly,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::StaticPlusWorking, Arm::StaticOnly, Arm::WorkingOnly];

    pub fn name(self) -> &'static str {
        match self {
            Arm::StaticPlusWorking => "static+wm",
            Arm::StaticOnly => "static_only",
            Arm::WorkingOnly => "wm_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub dice: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "arm,seed,dice";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.arm.name(), self.seed, self.dice)
    }
}

/// Seed of the single random pair that stands in for static memory in the
/// working-only arm.
pub const FILLER_SEED: u64 = 0;

/// The three memory arms on the same shifted stream.
pub fn run_ablation(cfg: &ExperimentConfig, params: &ModelParams) -> Result<Vec<AblationRow>, HarnessError> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let splits = make_splits(&cfg.data, seed)?;
        let learned = learn_for_seed(cfg, params, &splits, cfg.supervision_fraction, seed)?;
        for arm in Arm::ALL {
            let (entries, ctl) = match arm {
                Arm::StaticPlusWorking => (learned.entries.clone(), cfg.controller.clone()),
                Arm::StaticOnly => (
                    learned.entries.clone(),
                    ControllerConfig {
                        working_memory: false,
                        ..cfg.controller.clone()
                    },
                ),
                Arm::WorkingOnly => (random_pair_entries(params, 1, FILLER_SEED)?, cfg.controller.clone()),
            };
            let dice = stream_dice(cfg, params, static_bank(cfg, entries)?, &splits.shifted_test, &ctl)?;
            rows.push(AblationRow { arm, seed, dice });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkRow {
    pub k: usize,
    pub domain: String,
    pub seed: u64,
    pub dice: f64,
}

impl TopkRow {
    pub const CSV_HEADER: &'static str = "k,domain,seed,dice";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.k, self.domain, self.seed, self.dice)
    }
}

/// Fixed working retrieval size `k` on the in-domain and the shifted
/// stream.
pub fn run_topk_sweep(
    cfg: &ExperimentConfig,
    params: &ModelParams,
    ks: &[usize],
) -> Result<Vec<TopkRow>, HarnessError> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let splits = make_splits(&cfg.data, seed)?;
        let learned = learn_for_seed(cfg, params, &splits, cfg.supervision_fraction, seed)?;
        for &k in ks {
            let ctl = cfg.controller.with_k(k);
            for (domain, stream) in [
                ("in_domain", &splits.adapt_test),
                ("cross_domain", &splits.shifted_test),
            ] {
                let dice = stream_dice(cfg, params, static_bank(cfg, learned.entries.clone())?, stream, &ctl)?;
                rows.push(TopkRow {
                    k,
                    domain: domain.to_string(),
                    seed,
                    dice,
                });
            }
        }
    }
    Ok(rows)
}

/// Held-out samples for client `c`, rendered in that client's domain.
pub fn client_validation(cfg: &ExperimentConfig, seed: u64, c: usize) -> Result<Vec<SampleRecord>, HarnessError> {
    let n = (cfg.data.n_adapt / 5 / cfg.data.n_clients).max(1);
    let domain = client_domain(&cfg.data.base_domain, c);
    let stream_seed = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(100 + c as u64);
    (0..n as u64)
        .map(|i| {
            let task = &cfg.data.adapt_tasks[i as usize % cfg.data.adapt_tasks.len()];
            let mut r = synthdata::generate_one(task, &domain, stream_seed, i)?;
            r.sample_id = (6u64 << 32) + ((c as u64) << 24) + i;
            Ok(r)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct FedOutcome {
    pub seed: u64,
    pub fed: FedResult,
    /// Centralized memory learning on the pooled shards with the same
    /// initialisation and the same number of optimiser steps.
    pub centralized: StaticMemory,
    pub centralized_dice: f64,
}

impl FedOutcome {
    pub fn final_fed_dice(&self) -> f64 {
        self.fed.reports.last().map_or(0.0, |r| r.global_dice)
    }
}

pub fn run_fed(cfg: &ExperimentConfig, params: &ModelParams, seed: u64) -> Result<FedOutcome, HarnessError> {
    let splits = make_splits(&cfg.data, seed)?;
    let shards = &splits.federated_shards;
    let init = memory::initial_pseudo_obs(&shards[0], cfg.static_memory.n, seed)?;
    let mut clients = Vec::with_capacity(shards.len());
    let mut validation = Vec::new();
    for (c, shard) in shards.iter().enumerate() {
        let val = client_validation(cfg, seed, c)?;
        validation.extend(val.iter().cloned());
        clients.push(ClientState::new(
            c,
            shard.clone(),
            val,
            init.clone(),
            seed.wrapping_mul(1000).wrapping_add(c as u64),
        ));
    }
    let fed = fedsim::fed_run(
        &mut clients,
        cfg.fed.rounds,
        cfg.fed.local_steps,
        params,
        &cfg.static_memory,
        cfg.fed.bytes_per_param,
    )?;

    let pooled: Vec<SampleRecord> = shards.iter().flatten().cloned().collect();
    let encoded = EncodedSample::encode_all(params, &pooled)?;
    let central_cfg = memory::StaticConfig {
        steps: cfg.fed.rounds * cfg.fed.local_steps,
        ..cfg.static_memory.clone()
    };
    let centralized = memory::learn_static_encoded(params, &encoded, init, &central_cfg, seed)?;
    let centralized_dice = evaluate(params, &centralized.entries, &validation)?.0;
    Ok(FedOutcome {
        seed,
        fed,
        centralized,
        centralized_dice,
    })
}
