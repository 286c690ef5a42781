//! Browser front end for the memseg model.
//!
//! The page can draw a synthetic sample, segment a query from a handful of
//! labelled examples, and replay test-time adaptation on the shifted domain.
//! The pretrained checkpoint is compiled into the module. Every export is a
//! thin wrapper over a plain Rust function so the logic is testable natively.

use memseg::backbone::ModelParams;
use memseg::controller::{tta_stream, ControllerConfig};
use memseg::memory::{self, MemoryBank, PseudoObservation, WorkingMemoryConfig};
use memseg::synthdata::{self, DomainSpec, SampleRecord, ShapeFamily, TaskSpec};
use wasm_bindgen::prelude::*;

const CHECKPOINT: &str = include_str!("../../core/assets/pretrained.json");

/// Pixels per image.
pub const PIXELS: usize = 32 * 32;

pub fn load_model() -> Result<ModelParams, String> {
    ModelParams::from_json(CHECKPOINT).map_err(|e| e.to_string())
}

fn family(name: &str) -> Result<ShapeFamily, String> {
    ShapeFamily::ALL
        .into_iter()
        .find(|f| f.name() == name)
        .ok_or_else(|| format!("unknown shape family {name:?}"))
}

fn domain(shifted: bool) -> DomainSpec {
    if shifted {
        DomainSpec::shifted()
    } else {
        DomainSpec::default()
    }
}

fn samples(shape: &str, shifted: bool, n: usize, seed: u32) -> Result<Vec<SampleRecord>, String> {
    synthdata::generate(&TaskSpec::new(family(shape)?), &domain(shifted), n, seed.into()).map_err(|e| e.to_string())
}

/// Image followed by mask, row-major, `2 * PIXELS` values.
pub fn sample_pixels(shape: &str, shifted: bool, seed: u32) -> Result<Vec<f64>, String> {
    let r = samples(shape, shifted, 1, seed)?.remove(0);
    Ok(r.image.data().iter().chain(r.mask.data()).copied().collect())
}

/// Segments one query of `shape` using `k` labelled examples as memory.
/// Returns the query image, its ground truth, the predicted probabilities
/// and finally the Dice score: `3 * PIXELS + 1` values.
pub fn few_shot(
    params: &ModelParams,
    shape: &str,
    query_shifted: bool,
    support_shifted: bool,
    k: usize,
    seed: u32,
) -> Result<Vec<f64>, String> {
    if k == 0 {
        return Err("need at least one example".into());
    }
    let query = samples(shape, query_shifted, k + 1, seed)?
        .pop()
        .expect("k + 1 samples");
    let support = samples(shape, support_shifted, k, seed.wrapping_add(1))?;
    let entries = memory::encode_fewshot(params, &support).map_err(|e| e.to_string())?;
    let records =
        memory::evaluate_entries(params, &entries, std::slice::from_ref(&query)).map_err(|e| e.to_string())?;
    let tokens: Vec<_> = entries.iter().map(|e| e.token().clone()).collect();
    let out = memseg::backbone::segment(params, &query.image, &tokens).map_err(|e| e.to_string())?;
    let probs = out.mask_logits.map(memseg::autodiff::sigmoid);
    let mut v: Vec<f64> = query.image.data().to_vec();
    v.extend_from_slice(query.mask.data());
    v.extend_from_slice(probs.data());
    v.push(records[0].dice);
    Ok(v)
}

/// Dice per sample of a shifted ring stream of length `n`. Static memory is
/// four base-domain examples used as pseudo-observations without
/// optimisation, which keeps the page responsive. With `working` off the
/// stream runs on static memory alone.
pub fn tta_curve(params: &ModelParams, n: usize, seed: u32, working: bool) -> Result<Vec<f64>, String> {
    if n == 0 {
        return Err("stream must be nonempty".into());
    }
    let base = samples("ring", false, 4, seed)?;
    let z: Vec<PseudoObservation> = base
        .iter()
        .map(|r| PseudoObservation::from_sample(&r.image, &r.mask))
        .collect();
    let wm = WorkingMemoryConfig::default();
    let mut bank = MemoryBank::new(wm.capacity).map_err(|e| e.to_string())?;
    bank.insert(memory::static_entries(params, &z).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let stream = samples("ring", true, n, seed.wrapping_add(1))?;
    let ctl = ControllerConfig {
        working_memory: working,
        ..ControllerConfig::default()
    };
    let (records, _) =
        tta_stream(params, bank, &stream, synthdata::oracle_correct, &ctl, &wm).map_err(|e| e.to_string())?;
    Ok(records.iter().map(|r| r.dice).collect())
}

fn js(e: String) -> JsError {
    JsError::new(&e)
}

#[wasm_bindgen]
pub struct Demo {
    params: ModelParams,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        Ok(Demo {
            params: load_model().map_err(js)?,
        })
    }

    #[wasm_bindgen(js_name = paramCount)]
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn sample(&self, shape: &str, shifted: bool, seed: u32) -> Result<Vec<f64>, JsError> {
        sample_pixels(shape, shifted, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = fewShot)]
    pub fn few_shot(
        &self,
        shape: &str,
        query_shifted: bool,
        support_shifted: bool,
        k: u32,
        seed: u32,
    ) -> Result<Vec<f64>, JsError> {
        few_shot(&self.params, shape, query_shifted, support_shifted, k as usize, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = ttaCurve)]
    pub fn tta_curve(&self, n: u32, seed: u32, working: bool) -> Result<Vec<f64>, JsError> {
        tta_curve(&self.params, n as usize, seed, working).map_err(js)
    }
}
