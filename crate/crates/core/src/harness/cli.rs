//! `memseg` subcommands. Every artifact lands under the output directory
//! and depends only on the config and seed; progress goes to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::*;
use crate::autodiff::{op_suite, Tensor};
use crate::backbone::{self, synth_episodes, ModelParams};
use crate::controller::TtaRecord;
use crate::fedsim::{self, RoundReport};
use crate::memory::{self, EncodedSample, PseudoObservation};
use crate::synthdata::{self, make_splits};

/// Worst relative gradient error the gradcheck subcommand accepts.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "memseg", about = "Memory-space adaptation for a frozen toy segmenter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` and restricts multi-seed experiments to this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Supervision fraction (1.0, 0.3 or 0.1); `eval` also accepts `all`.
    #[arg(long, global = true)]
    supervision: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write every split as JSON lines.
    GenData,
    /// Pretrain the backbone on base-task episodes and freeze it.
    Pretrain,
    /// Learn static memory and write the bank.
    LearnStatic,
    /// Static memory across supervision levels, plus the random-pair baseline.
    Eval,
    /// Test-time adaptation over the shifted stream.
    Tta,
    /// Static+working, static-only and working-only arms.
    Ablate,
    /// Working retrieval size sweep.
    TopkSweep {
        /// Comma-separated k values; the config's list when absent.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Memory-only federated averaging against centralized learning.
    Fed,
    /// Communication saving of memory-only exchange.
    CommReport {
        /// Defaults to this model's static memory size, N * 2 * 32 * 32.
        #[arg(long)]
        memory_params: Option<u64>,
        /// Defaults to this model's parameter count.
        #[arg(long)]
        backbone_params: Option<u64>,
        #[arg(long)]
        bytes_per_param: Option<u64>,
    },
    /// Finite-difference check of every op and of the memory gradient.
    Gradcheck,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<(ExperimentConfig, Option<Vec<f64>>), HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    let mut fractions = None;
    match cli.supervision.as_deref() {
        None => {}
        Some("all") => fractions = Some(SUPERVISION_LEVELS.to_vec()),
        Some(s) => {
            cfg.supervision_fraction = s
                .parse()
                .map_err(|_| HarnessError::ConfigInvalid(format!("--supervision {s} is not a number")))?;
        }
    }
    cfg.validate()?;
    Ok((cfg, fractions))
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.join(name))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    let (cfg, fractions) = resolve_config(&cli)?;
    match cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Pretrain => pretrain(&cfg),
        Command::LearnStatic => learn_static(&cfg),
        Command::Eval => eval(&cfg, fractions.unwrap_or_else(|| vec![cfg.supervision_fraction])),
        Command::Tta => tta(&cfg),
        Command::Ablate => ablate(&cfg),
        Command::TopkSweep { ks } => topk(&cfg, ks.unwrap_or_else(|| cfg.topk.clone())),
        Command::Fed => fed(&cfg),
        Command::CommReport {
            memory_params,
            backbone_params,
            bytes_per_param,
        } => comm(&cfg, memory_params, backbone_params, bytes_per_param),
        Command::Gradcheck => gradcheck(&cfg),
    }
}

fn gen_data(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let splits = make_splits(&cfg.data, cfg.seed)?;
    let mut parts = vec![
        ("pretrain_base".to_string(), &splits.pretrain_base),
        ("adapt_train".to_string(), &splits.adapt_train),
        ("adapt_val".to_string(), &splits.adapt_val),
        ("adapt_test".to_string(), &splits.adapt_test),
        ("shifted_test".to_string(), &splits.shifted_test),
    ];
    for (c, shard) in splits.federated_shards.iter().enumerate() {
        parts.push((format!("shard_{c}"), shard));
    }
    for (name, records) in parts {
        let path = out_path(cfg, &format!("{name}.jsonl"))?;
        synthdata::write_jsonl(records, BufWriter::new(File::create(&path)?))?;
        eprintln!("{}: {} records", path.display(), records.len());
    }
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let p = &cfg.pretrain;
    let episodes = synth_episodes(
        &cfg.data.base_tasks,
        p.episodes,
        p.max_supports,
        p.max_off_domain,
        p.episode_seed,
    )?;
    let (params, report) = backbone::pretrain(ModelParams::init(cfg.seed), &episodes, p, |epoch, loss| {
        eprintln!("epoch {epoch} loss {loss:.4}")
    })?;
    let path = out_path(cfg, "pretrained.json")?;
    params.save(&path)?;
    let mut table = CsvTable::new("epoch,loss");
    table.rows = report
        .epoch_losses
        .iter()
        .enumerate()
        .map(|(e, l)| format!("{e},{l}"))
        .collect();
    write_csv(&out_path(cfg, "pretrain_loss.csv")?, &table, cfg)?;
    eprintln!(
        "{} ({} steps, checksum {})",
        path.display(),
        report.steps,
        params.checksum()
    );
    Ok(())
}

fn learn_static(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let params = load_checkpoint(cfg)?;
    let splits = make_splits(&cfg.data, cfg.seed)?;
    let learned = learn_for_seed(cfg, &params, &splits, cfg.supervision_fraction, cfg.seed)?;
    let bank = static_bank(cfg, learned.entries.clone())?;
    memory::save_bank(&bank, &out_path(cfg, "bank.json")?)?;
    write_json(&out_path(cfg, "pseudo_obs.json")?, &learned.pseudo_obs)?;
    let mut table = CsvTable::new("step,loss").note("supervision", cfg.supervision_fraction);
    table.rows = learned
        .curve
        .iter()
        .enumerate()
        .map(|(s, l)| format!("{s},{l}"))
        .collect();
    write_csv(&out_path(cfg, "static_loss.csv")?, &table, cfg)?;
    let (dice, hd95) = evaluate(&params, &learned.entries, &splits.adapt_test)?;
    eprintln!("adapt_test dice {dice:.4} hd95 {hd95:.3}");
    Ok(())
}

fn eval(cfg: &ExperimentConfig, fractions: Vec<f64>) -> Result<(), HarnessError> {
    let params = load_checkpoint(cfg)?;
    let rows = run_supervision(cfg, &params, &fractions)?;
    let mut table = CsvTable::new(SupervisionRow::CSV_HEADER);
    table.rows = rows.iter().map(SupervisionRow::csv_row).collect();
    write_csv(&out_path(cfg, "supervision.csv")?, &table, cfg)?;

    let baseline = run_static_vs_random(cfg, &params)?;
    let mut table = CsvTable::new(StaticVsRandomRow::CSV_HEADER).note("supervision", cfg.supervision_fraction);
    table.rows = baseline.iter().map(StaticVsRandomRow::csv_row).collect();
    write_csv(&out_path(cfg, "static_vs_random.csv")?, &table, cfg)?;
    for r in &baseline {
        eprintln!(
            "seed {} static {:.4} random {:.4}",
            r.seed, r.static_dice, r.random_dice
        );
    }
    Ok(())
}

fn tta(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let params = load_checkpoint(cfg)?;
    let (records, bank) = run_tta(cfg, &params, cfg.seed)?;
    let mut table = CsvTable::new(TtaRecord::CSV_HEADER);
    table.rows = records.iter().map(TtaRecord::csv_row).collect();
    write_csv(&out_path(cfg, "tta.csv")?, &table, cfg)?;
    memory::save_bank(&bank, &out_path(cfg, "bank_after_tta.json")?)?;
    let q = records.len() / 4;
    let mean = |r: &[TtaRecord]| r.iter().map(|x| x.dice).sum::<f64>() / r.len().max(1) as f64;
    let (first, last, overall) = (mean(&records[..q]), mean(&records[records.len() - q..]), mean(&records));
    let summary = json!({
        "seed": cfg.seed,
        "samples": records.len(),
        "mean_dice": overall,
        "first_quarter_dice": first,
        "last_quarter_dice": last,
        "eval_window": cfg.eval_window,
        "window_dice": records.chunks(cfg.eval_window).map(mean).collect::<Vec<_>>(),
    });
    write_json(&out_path(cfg, "tta_summary.json")?, &summary)?;
    eprintln!("first quarter {first:.4} last quarter {last:.4} overall {overall:.4}");
    Ok(())
}

fn ablate(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let params = load_checkpoint(cfg)?;
    let rows = run_ablation(cfg, &params)?;
    let mut table = CsvTable::new(AblationRow::CSV_HEADER).note("wm_only_filler", "random_pair_seed0");
    table.rows = rows.iter().map(AblationRow::csv_row).collect();
    write_csv(&out_path(cfg, "ablation.csv")?, &table, cfg)
}

fn topk(cfg: &ExperimentConfig, ks: Vec<usize>) -> Result<(), HarnessError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(HarnessError::ConfigInvalid("--ks needs positive values".into()));
    }
    let params = load_checkpoint(cfg)?;
    let rows = run_topk_sweep(cfg, &params, &ks)?;
    let mut table = CsvTable::new(TopkRow::CSV_HEADER);
    table.rows = rows.iter().map(TopkRow::csv_row).collect();
    write_csv(&out_path(cfg, "topk.csv")?, &table, cfg)
}

fn fed(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let params = load_checkpoint(cfg)?;
    let outcome = run_fed(cfg, &params, cfg.seed)?;
    let mut table = CsvTable::new(RoundReport::CSV_HEADER);
    let mut cumulative = 0;
    for r in &outcome.fed.reports {
        table.rows.extend(r.csv_rows(cumulative));
        cumulative += r.bytes_up + r.bytes_down;
    }
    write_csv(&out_path(cfg, "fed.csv")?, &table, cfg)?;
    let memory_params = (cfg.static_memory.n * 2 * backbone::IMAGE * backbone::IMAGE) as u64;
    let comm = fedsim::comm_report(
        memory_params,
        params.param_count() as u64,
        cfg.fed.bytes_per_param as u64,
    )?;
    let summary = json!({
        "seed": cfg.seed,
        "rounds": cfg.fed.rounds,
        "local_steps": cfg.fed.local_steps,
        "final_federated_dice": outcome.final_fed_dice(),
        "centralized_dice": outcome.centralized_dice,
        "total_bytes": cumulative,
        "comm": comm,
    });
    write_json(&out_path(cfg, "fed_summary.json")?, &summary)?;
    eprintln!(
        "federated {:.4} centralized {:.4}",
        outcome.final_fed_dice(),
        outcome.centralized_dice
    );
    Ok(())
}

fn comm(
    cfg: &ExperimentConfig,
    memory_params: Option<u64>,
    backbone_params: Option<u64>,
    bytes_per_param: Option<u64>,
) -> Result<(), HarnessError> {
    let memory_params = memory_params.unwrap_or((cfg.static_memory.n * 2 * backbone::IMAGE * backbone::IMAGE) as u64);
    let backbone_params = backbone_params.unwrap_or(backbone::param_count() as u64);
    let bytes = bytes_per_param.unwrap_or(cfg.fed.bytes_per_param as u64);
    let report = fedsim::comm_report(memory_params, backbone_params, bytes)
        .map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    write_json(&out_path(cfg, "comm_report.json")?, &report)
}

/// Pseudo-observation and target sample for the end-to-end check: the
/// mask logits are softened so the sigmoid is away from saturation.
pub fn gradcheck_fixture(params: &ModelParams, seed: u64) -> Result<(EncodedSample, PseudoObservation), HarnessError> {
    let task = synthdata::TaskSpec::new(synthdata::ShapeFamily::Ring);
    let domain = synthdata::DomainSpec::default();
    let target = synthdata::generate_one(&task, &domain, seed, 0)?;
    let source = synthdata::generate_one(&task, &domain, seed, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = PseudoObservation {
        x_hat: source.image.clone(),
        y_logits: Tensor::from_fn(backbone::IMAGE, backbone::IMAGE, |r, c| {
            2.0 * (2.0 * source.mask.get(r, c) - 1.0) + rng.random_range(-0.5..0.5)
        }),
    };
    Ok((EncodedSample::encode(params, &target)?, z))
}

/// Finite-difference step for the end-to-end check. Many coordinates of
/// the memory gradient are around 1e-8, so much smaller steps are dominated
/// by rounding in the loss.
pub const END_TO_END_EPS: f64 = 1e-5;

/// Worst relative error of the full memory gradient for `seed`.
pub fn end_to_end_gradcheck(params: &ModelParams, seed: u64) -> Result<f64, HarnessError> {
    let (sample, z) = gradcheck_fixture(params, seed)?;
    Ok(memory::pseudo_obs_grad_check(params, &sample, &z, END_TO_END_EPS)?)
}

fn gradcheck(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let params = match load_checkpoint(cfg) {
        Ok(p) => p,
        Err(HarnessError::MissingCheckpoint(path)) => {
            eprintln!("{} missing, checking a freshly initialised model", path.display());
            let mut p = ModelParams::init(cfg.seed);
            p.freeze();
            p
        }
        Err(e) => return Err(e),
    };
    let mut table = CsvTable::new("case,max_rel_err");
    let mut worst: Vec<String> = Vec::new();
    let mut results = op_suite(cfg.seed)?;
    results.push(("end_to_end_pseudo_obs", end_to_end_gradcheck(&params, cfg.seed)?));
    for (name, err) in results {
        println!("{name:<24} {err:.3e}");
        table.rows.push(format!("{name},{err}"));
        if err.is_nan() || err > GRAD_TOLERANCE {
            worst.push(format!("{name} ({err:.3e})"));
        }
    }
    write_csv(&out_path(cfg, "gradcheck.csv")?, &table, cfg)?;
    if worst.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::GradCheckFailed(worst.join(", ")))
    }
}
