//! Memory-only federated averaging.
//!
//! Clients optimise their copy of the static pseudo-observations on private
//! shards; the server averages the pseudo-observations weighted by shard
//! size. Backbone weights and raw pixels never leave a client, which is why
//! the per-round payload is tiny next to a weight-sharing scheme.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::backbone::{ModelParams, IMAGE};
use crate::memory::{self, EncodedSample, MemoryEntry, MemoryError, PseudoObservation, StaticConfig, StaticLearner};
use crate::synthdata::SampleRecord;

#[derive(Debug, Error)]
pub enum FedError {
    #[error("client shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("model must be frozen before federated memory learning")]
    NotFrozen,
    #[error("parameter counts must be positive")]
    ZeroParams,
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: Vec<SampleRecord>,
    /// Local held-out samples the global memory is scored on each round.
    pub validation: Vec<SampleRecord>,
    pub local_pseudo_obs: Vec<PseudoObservation>,
    pub n_samples: usize,
    pub rng_seed: u64,
}

impl ClientState {
    pub fn new(
        client_id: usize,
        shard: Vec<SampleRecord>,
        validation: Vec<SampleRecord>,
        init: Vec<PseudoObservation>,
        rng_seed: u64,
    ) -> Self {
        Self {
            client_id,
            n_samples: shard.len(),
            shard,
            validation,
            local_pseudo_obs: init,
            rng_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_index: usize,
    pub per_client_dice: BTreeMap<usize, f64>,
    pub global_dice: f64,
    /// Totals over all clients for this round.
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl RoundReport {
    pub const CSV_HEADER: &'static str = "round,client,dice,bytes_up,bytes_down,cumulative_bytes";

    /// One row per client and a closing `GLOBAL` row carrying the round
    /// totals. `cumulative_before` is the traffic of all earlier rounds.
    pub fn csv_rows(&self, cumulative_before: u64) -> Vec<String> {
        let clients = self.per_client_dice.len().max(1) as u64;
        let (up, down) = (self.bytes_up / clients, self.bytes_down / clients);
        let mut cumulative = cumulative_before;
        let mut rows = Vec::with_capacity(self.per_client_dice.len() + 1);
        for (c, dice) in &self.per_client_dice {
            cumulative += up + down;
            rows.push(format!("{},{c},{dice},{up},{down},{cumulative}", self.round_index));
        }
        rows.push(format!(
            "{},GLOBAL,{},{},{},{}",
            self.round_index,
            self.global_dice,
            self.bytes_up,
            self.bytes_down,
            cumulative_before + self.bytes_up + self.bytes_down
        ));
        rows
    }
}

#[derive(Clone, Debug)]
pub struct FedResult {
    pub reports: Vec<RoundReport>,
    pub global_pseudo_obs: Vec<PseudoObservation>,
    pub global_entries: Vec<MemoryEntry>,
}

/// Wire bytes one client sends (or receives) per round.
pub fn payload_bytes(n_entries: usize, bytes_per_param: usize) -> u64 {
    (n_entries * 2 * IMAGE * IMAGE * bytes_per_param) as u64
}

/// `Σ_c w_c z_c` accumulated in client order.
pub fn aggregate(locals: &[&[PseudoObservation]], weights: &[f64]) -> Vec<PseudoObservation> {
    let blend = |pick: &dyn Fn(&PseudoObservation) -> &Tensor, i: usize| -> Tensor {
        let mut acc = pick(&locals[0][i]).map(|_| 0.0);
        for (z, &w) in locals.iter().zip(weights) {
            acc = acc.zip_map(pick(&z[i]), |a, b| a + w * b);
        }
        acc
    };
    (0..locals[0].len())
        .map(|i| PseudoObservation {
            x_hat: blend(&|p| &p.x_hat, i),
            y_logits: blend(&|p| &p.y_logits, i),
        })
        .collect()
}

fn check_clients(clients: &[ClientState]) -> Result<(), FedError> {
    let first = clients
        .first()
        .ok_or_else(|| FedError::ShapeMismatch("no clients".into()))?;
    let n = first.local_pseudo_obs.len();
    if n == 0 {
        return Err(FedError::ShapeMismatch("clients hold no pseudo-observations".into()));
    }
    for c in clients {
        if c.local_pseudo_obs.len() != n {
            return Err(FedError::ShapeMismatch(format!(
                "client {} holds {} pseudo-observations, expected {n}",
                c.client_id,
                c.local_pseudo_obs.len()
            )));
        }
        for p in &c.local_pseudo_obs {
            if p.x_hat.shape() != [IMAGE, IMAGE] || p.y_logits.shape() != [IMAGE, IMAGE] {
                return Err(FedError::ShapeMismatch(format!(
                    "client {} pseudo-observation shape",
                    c.client_id
                )));
            }
        }
        if c.shard.is_empty() {
            return Err(FedError::ShapeMismatch(format!(
                "client {} has an empty shard",
                c.client_id
            )));
        }
    }
    Ok(())
}

fn mean_dice(params: &ModelParams, entries: &[MemoryEntry], samples: &[SampleRecord]) -> Result<f64, FedError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let records = memory::evaluate_entries(params, entries, samples)?;
    Ok(records.iter().map(|r| r.dice).sum::<f64>() / records.len() as f64)
}

/// Runs `rounds` synchronous rounds with full participation. Client 0's
/// initial pseudo-observations are the round-0 broadcast. Every client
/// keeps its own optimiser state across rounds. Local steps run on scoped
/// threads; the result is independent of scheduling because aggregation
/// happens afterwards in client order.
pub fn fed_run(
    clients: &mut [ClientState],
    rounds: usize,
    local_steps: usize,
    params: &ModelParams,
    cfg: &StaticConfig,
    bytes_per_param: usize,
) -> Result<FedResult, FedError> {
    if !params.is_frozen() {
        return Err(FedError::NotFrozen);
    }
    check_clients(clients)?;
    let n_entries = clients[0].local_pseudo_obs.len();
    let mut global = clients[0].local_pseudo_obs.clone();
    let total: usize = clients.iter().map(|c| c.n_samples).sum();
    let weights: Vec<f64> = clients.iter().map(|c| c.n_samples as f64 / total as f64).collect();
    let encoded = clients
        .iter()
        .map(|c| EncodedSample::encode_all(params, &c.shard))
        .collect::<Result<Vec<_>, _>>()?;
    let mut learners: Vec<StaticLearner> = clients
        .iter()
        .map(|c| StaticLearner::new(n_entries, cfg, c.rng_seed))
        .collect();
    let per_client = payload_bytes(n_entries, bytes_per_param);
    let mut reports = Vec::with_capacity(rounds);
    let before = params.checksum();

    for round_index in 0..rounds {
        let outcomes: Vec<Result<(), MemoryError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = clients
                .iter_mut()
                .zip(learners.iter_mut())
                .zip(&encoded)
                .map(|((client, learner), data)| {
                    client.local_pseudo_obs = global.clone();
                    scope.spawn(move || {
                        for _ in 0..local_steps {
                            learner.step(params, data, &mut client.local_pseudo_obs)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        });
        outcomes.into_iter().collect::<Result<(), _>>()?;

        let locals: Vec<&[PseudoObservation]> = clients.iter().map(|c| c.local_pseudo_obs.as_slice()).collect();
        global = aggregate(&locals, &weights);

        let entries = memory::static_entries(params, &global)?;
        let mut per_client_dice = BTreeMap::new();
        let (mut weighted, mut count) = (0.0, 0usize);
        for c in clients.iter() {
            let d = mean_dice(params, &entries, &c.validation)?;
            per_client_dice.insert(c.client_id, d);
            weighted += d * c.validation.len() as f64;
            count += c.validation.len();
        }
        reports.push(RoundReport {
            round_index,
            per_client_dice,
            global_dice: if count == 0 { 0.0 } else { weighted / count as f64 },
            bytes_up: per_client * clients.len() as u64,
            bytes_down: per_client * clients.len() as u64,
        });
    }
    assert_eq!(
        before,
        params.checksum(),
        "federated memory learning must not touch model weights"
    );
    Ok(FedResult {
        reports,
        global_entries: memory::static_entries(params, &global)?,
        global_pseudo_obs: global,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub payload_params_memory: u64,
    pub payload_params_backbone: u64,
    pub bytes_per_param: u64,
    pub bytes_memory: u64,
    pub bytes_backbone: u64,
    /// Backbone over memory, to one decimal.
    pub reduction_ratio: f64,
    /// Saving in percent, to two decimals.
    pub reduction_percent: f64,
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

pub fn comm_report(memory_params: u64, backbone_params: u64, bytes_per_param: u64) -> Result<CommReport, FedError> {
    if memory_params == 0 || backbone_params == 0 || bytes_per_param == 0 {
        return Err(FedError::ZeroParams);
    }
    let (m, b) = (memory_params as f64, backbone_params as f64);
    Ok(CommReport {
        payload_params_memory: memory_params,
        payload_params_backbone: backbone_params,
        bytes_per_param,
        bytes_memory: memory_params * bytes_per_param,
        bytes_backbone: backbone_params * bytes_per_param,
        reduction_ratio: round_to(b / m, 1),
        reduction_percent: round_to(100.0 * (1.0 - m / b), 2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn large_model_accounting() {
        let r = comm_report(2_000_000, 148_630_000, 4).unwrap();
        assert_eq!(r.reduction_ratio, 74.3);
        assert_eq!(r.reduction_percent, 98.65);
        let same = comm_report(8192, 8192, 4).unwrap();
        assert_eq!((same.reduction_ratio, same.reduction_percent), (1.0, 0.0));
        assert!(matches!(comm_report(0, 1, 4), Err(FedError::ZeroParams)));
    }

    #[test]
    fn equal_weight_average() {
        let z = |a: f64, b: f64| PseudoObservation {
            x_hat: Tensor::row(vec![a]),
            y_logits: Tensor::row(vec![b]),
        };
        let (c0, c1) = ([z(1.0, 3.0)], [z(3.0, 5.0)]);
        let g = aggregate(&[&c0, &c1], &[0.5, 0.5]);
        assert_eq!(g[0].x_hat.data(), &[2.0]);
        assert_eq!(g[0].y_logits.data(), &[4.0]);
    }

    #[test]
    fn bytes_per_round() {
        assert_eq!(payload_bytes(4, 4), 4 * 2 * 32 * 32 * 4);
    }
}
