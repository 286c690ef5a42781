//! Seeded synthetic image/mask corpus.
//!
//! Each sample shows one target shape and, optionally, a distractor shape of
//! a different family that is not part of the mask. The distractor is what
//! makes memory necessary: without a prior on which family is the target,
//! the segmenter cannot tell the two apart.
//!
//! Randomness is split into independent ChaCha streams per sample (geometry,
//! distractor, appearance), so the same seed under two domains yields the
//! same masks with different images. Transcendental functions go through
//! `libm` so the corpus is bit-stable across platforms.

use std::collections::BTreeSet;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const MIN_FOREGROUND: usize = 8;
const MAX_DRAWS: usize = 100;
const RING_INNER: f64 = 0.45;
const CROSS_ARM: f64 = 0.35;
const DISTRACTOR_SCALE: f64 = 0.8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not draw a {family:?} with at least {MIN_FOREGROUND} pixels in {MAX_DRAWS} attempts")]
    DegenerateShape { family: ShapeFamily },
    #[error("invalid data config: {0}")]
    ConfigInvalid(String),
    #[error("n must be at least 1")]
    EmptyRequest,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Ring,
    Cross,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [
        ShapeFamily::Ellipse,
        ShapeFamily::Rectangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "ellipse",
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Cross => "cross",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub shape_family: ShapeFamily,
    /// Shape extent as a fraction of the image width.
    pub size_min: f64,
    pub size_max: f64,
}

impl TaskSpec {
    pub fn new(shape_family: ShapeFamily) -> Self {
        Self {
            shape_family,
            size_min: 0.25,
            size_max: 0.6,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max < 1.0) {
            return Err(SynthError::ConfigInvalid(format!(
                "size range {}..{} must lie in (0, 1)",
                self.size_min, self.size_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    None,
    /// Vertical sinusoidal stripes added to the image.
    Stripes {
        period: f64,
        amplitude: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub noise_std: f64,
    pub texture: Texture,
    pub contrast_inverted: bool,
    /// 0 or 1 (3x3 box blur).
    pub blur_radius: usize,
    /// Intensity of the distractor shape; `None` draws no distractor.
    pub distractor_intensity: Option<f64>,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: "base".into(),
            fg_intensity: 0.9,
            bg_intensity: 0.1,
            noise_std: 0.02,
            texture: Texture::None,
            contrast_inverted: false,
            blur_radius: 0,
            distractor_intensity: Some(0.5),
        }
    }
}

impl DomainSpec {
    /// The default cross-domain shift: stripes, inverted contrast, more noise.
    pub fn shifted() -> Self {
        Self {
            name: "shifted".into(),
            noise_std: 0.08,
            texture: Texture::Stripes {
                period: 8.0,
                amplitude: 0.15,
            },
            contrast_inverted: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let dist_ok = self.distractor_intensity.is_none_or(unit);
        if !unit(self.fg_intensity) || !unit(self.bg_intensity) || !dist_ok {
            return Err(SynthError::ConfigInvalid(format!(
                "domain {}: intensities must be in [0,1]",
                self.name
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(SynthError::ConfigInvalid(format!(
                "domain {}: bad noise_std",
                self.name
            )));
        }
        if self.blur_radius > 1 {
            return Err(SynthError::ConfigInvalid(format!(
                "domain {}: blur radius must be 0 or 1",
                self.name
            )));
        }
        if let Texture::Stripes { period, amplitude } = self.texture {
            if !(period > 0.0 && amplitude >= 0.0) {
                return Err(SynthError::ConfigInvalid(format!("domain {}: bad stripes", self.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub image: Tensor,
    pub mask: Tensor,
    pub task_id: String,
    pub domain_id: String,
}

/// Placement of one shape, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeGeometry {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes along the rotated u and v directions.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

/// Rasterises a shape by testing pixel centres `(c + 0.5, r + 0.5)`.
pub fn rasterize(family: ShapeFamily, g: &ShapeGeometry) -> Tensor {
    let (cos, sin) = (libm::cos(g.theta), libm::sin(g.theta));
    Tensor::from_fn(IMAGE_SIZE, IMAGE_SIZE, |r, c| {
        let dx = c as f64 + 0.5 - g.cx;
        let dy = r as f64 + 0.5 - g.cy;
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        let inside = match family {
            ShapeFamily::Ellipse => (u / g.a).powi(2) + (v / g.b).powi(2) <= 1.0,
            ShapeFamily::Rectangle => u.abs() <= g.a && v.abs() <= g.b,
            ShapeFamily::Ring => {
                let q = (u / g.a).powi(2) + (v / g.b).powi(2);
                (RING_INNER * RING_INNER..=1.0).contains(&q)
            }
            ShapeFamily::Cross => {
                let arm = g.a * CROSS_ARM;
                (u.abs() <= g.a && v.abs() <= arm) || (v.abs() <= g.a && u.abs() <= arm)
            }
        };
        inside as u8 as f64
    })
}

fn draw_geometry(rng: &mut ChaCha8Rng, family: ShapeFamily, size_min: f64, size_max: f64) -> ShapeGeometry {
    let half = IMAGE_SIZE as f64 / 2.0;
    let a = rng.random_range(size_min..=size_max) * half;
    let b = if family == ShapeFamily::Cross {
        a
    } else {
        a * rng.random_range(0.6..=1.0)
    };
    let lo = 0.7 * a;
    let hi = IMAGE_SIZE as f64 - 0.7 * a;
    ShapeGeometry {
        cx: rng.random_range(lo..=hi),
        cy: rng.random_range(lo..=hi),
        a,
        b,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    }
}

fn count(mask: &Tensor) -> usize {
    mask.data().iter().filter(|&&v| v == 1.0).count()
}

/// Mask grown by one pixel in the 4-neighbourhood.
fn dilate(mask: &Tensor) -> Tensor {
    let n = IMAGE_SIZE as isize;
    Tensor::from_fn(IMAGE_SIZE, IMAGE_SIZE, |r, c| {
        let (r, c) = (r as isize, c as isize);
        let hit = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| {
            let (rr, cc) = (r + dr, c + dc);
            rr >= 0 && cc >= 0 && rr < n && cc < n && mask.get(rr as usize, cc as usize) == 1.0
        });
        hit as u8 as f64
    })
}

fn stream(seed: u64, index: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index * 4 + lane);
    rng
}

/// Standard normal draw via Box-Muller.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

fn box_blur(image: &Tensor) -> Tensor {
    let n = IMAGE_SIZE as isize;
    Tensor::from_fn(IMAGE_SIZE, IMAGE_SIZE, |r, c| {
        let (mut sum, mut k) = (0.0, 0.0);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                if rr >= 0 && cc >= 0 && rr < n && cc < n {
                    sum += image.get(rr as usize, cc as usize);
                    k += 1.0;
                }
            }
        }
        sum / k
    })
}

/// Draws the target mask and the distractor mask for sample `index`.
/// Depends only on (task, seed, index), never on the domain.
pub fn draw_masks(task: &TaskSpec, seed: u64, index: u64) -> Result<(Tensor, Option<Tensor>), SynthError> {
    let family = task.shape_family;
    let mut rng = stream(seed, index, 0);
    let mask = (0..MAX_DRAWS)
        .map(|_| rasterize(family, &draw_geometry(&mut rng, family, task.size_min, task.size_max)))
        .find(|m| count(m) >= MIN_FOREGROUND)
        .ok_or(SynthError::DegenerateShape { family })?;

    let mut rng = stream(seed, index, 1);
    let others: Vec<ShapeFamily> = ShapeFamily::ALL.into_iter().filter(|&f| f != family).collect();
    let other = others[rng.random_range(0..others.len())];
    let grown = dilate(&mask);
    let distractor = (0..MAX_DRAWS)
        .map(|_| {
            let g = draw_geometry(
                &mut rng,
                other,
                task.size_min * DISTRACTOR_SCALE,
                task.size_max * DISTRACTOR_SCALE,
            );
            rasterize(other, &g)
        })
        .find(|d| count(d) >= MIN_FOREGROUND && d.data().iter().zip(grown.data()).all(|(&x, &y)| x * y == 0.0));
    Ok((mask, distractor))
}

/// Renders the image for given masks under a domain.
pub fn render(domain: &DomainSpec, mask: &Tensor, distractor: Option<&Tensor>, seed: u64, index: u64) -> Tensor {
    let (fg, bg) = (domain.fg_intensity, domain.bg_intensity);
    let mut img: Vec<f64> = mask.data().iter().map(|&m| bg + (fg - bg) * m).collect();
    if let (Some(level), Some(d)) = (domain.distractor_intensity, distractor) {
        for (p, &m) in img.iter_mut().zip(d.data()) {
            *p += (level - bg) * m;
        }
    }
    if let Texture::Stripes { period, amplitude } = domain.texture {
        for (i, p) in img.iter_mut().enumerate() {
            let x = (i % IMAGE_SIZE) as f64;
            *p += amplitude * libm::sin(2.0 * std::f64::consts::PI * x / period);
        }
    }
    if domain.contrast_inverted {
        for p in img.iter_mut() {
            *p = 1.0 - *p;
        }
    }
    let mut img = Tensor::matrix(IMAGE_SIZE, IMAGE_SIZE, img);
    if domain.blur_radius == 1 {
        img = box_blur(&img);
    }
    let mut rng = stream(seed, index, 2);
    let noisy: Vec<f64> = img
        .data()
        .iter()
        .map(|&p| {
            let n = if domain.noise_std > 0.0 {
                domain.noise_std * gaussian(&mut rng)
            } else {
                0.0
            };
            (p + n).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::matrix(IMAGE_SIZE, IMAGE_SIZE, noisy)
}

/// Generates sample `index` of the stream defined by `seed`.
pub fn generate_one(task: &TaskSpec, domain: &DomainSpec, seed: u64, index: u64) -> Result<SampleRecord, SynthError> {
    let (mask, distractor) = draw_masks(task, seed, index)?;
    let image = render(domain, &mask, distractor.as_ref(), seed, index);
    Ok(SampleRecord {
        sample_id: index,
        image,
        mask,
        task_id: task.shape_family.name().to_string(),
        domain_id: domain.name.clone(),
    })
}

/// `n` samples with ids `0..n`.
pub fn generate(task: &TaskSpec, domain: &DomainSpec, n: usize, seed: u64) -> Result<Vec<SampleRecord>, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyRequest);
    }
    task.validate()?;
    domain.validate()?;
    (0..n as u64).map(|i| generate_one(task, domain, seed, i)).collect()
}

/// The corrected annotation supplied at test time: the ground-truth mask.
pub fn oracle_correct(record: &SampleRecord) -> Tensor {
    record.mask.clone()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub base_tasks: Vec<TaskSpec>,
    pub adapt_tasks: Vec<TaskSpec>,
    pub base_domain: DomainSpec,
    pub shift_domain: DomainSpec,
    pub n_pretrain: usize,
    pub n_adapt: usize,
    pub n_shifted: usize,
    pub n_clients: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            base_tasks: vec![
                TaskSpec::new(ShapeFamily::Ellipse),
                TaskSpec::new(ShapeFamily::Rectangle),
            ],
            adapt_tasks: vec![TaskSpec::new(ShapeFamily::Ring)],
            base_domain: DomainSpec::default(),
            shift_domain: DomainSpec::shifted(),
            n_pretrain: 200,
            n_adapt: 500,
            n_shifted: 200,
            n_clients: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.base_tasks.is_empty() || self.adapt_tasks.is_empty() {
            return Err(SynthError::ConfigInvalid(
                "base and adaptation tasks must be nonempty".into(),
            ));
        }
        let base: BTreeSet<_> = self.base_tasks.iter().map(|t| t.shape_family).collect();
        if self.adapt_tasks.iter().any(|t| base.contains(&t.shape_family)) {
            return Err(SynthError::ConfigInvalid(
                "adaptation tasks overlap the base tasks".into(),
            ));
        }
        for t in self.base_tasks.iter().chain(&self.adapt_tasks) {
            t.validate()?;
        }
        self.base_domain.validate()?;
        self.shift_domain.validate()?;
        if self.n_adapt < 5 || self.n_pretrain == 0 || self.n_shifted == 0 {
            return Err(SynthError::ConfigInvalid("split sizes too small".into()));
        }
        if self.n_clients == 0 || self.n_clients > self.n_adapt * 3 / 5 {
            return Err(SynthError::ConfigInvalid(
                "n_clients must be in 1..=|adapt_train|".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    /// In-domain base-task samples, held out from pretraining episodes.
    pub pretrain_base: Vec<SampleRecord>,
    pub adapt_train: Vec<SampleRecord>,
    pub adapt_val: Vec<SampleRecord>,
    pub adapt_test: Vec<SampleRecord>,
    pub shifted_test: Vec<SampleRecord>,
    pub federated_shards: Vec<Vec<SampleRecord>>,
}

/// Id ranges keep every split disjoint.
const SPLIT_STRIDE: u64 = 1 << 32;

fn split_seed(seed: u64, lane: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(lane)
}

/// Perturbation applied to federated shard `c`; shard 0 keeps the base domain.
pub fn client_domain(base: &DomainSpec, c: usize) -> DomainSpec {
    let k = c as f64;
    DomainSpec {
        name: format!("{}-client{c}", base.name),
        fg_intensity: (base.fg_intensity - 0.04 * k).clamp(0.0, 1.0),
        bg_intensity: (base.bg_intensity + 0.03 * k).clamp(0.0, 1.0),
        noise_std: base.noise_std + 0.01 * k,
        ..base.clone()
    }
}

/// Builds every split from one seed. Adaptation samples cycle through the
/// adaptation tasks; train/val/test follow a 3:1:1 ratio.
pub fn make_splits(cfg: &DataConfig, seed: u64) -> Result<Splits, SynthError> {
    cfg.validate()?;
    let tagged = |records: Vec<SampleRecord>, split: u64| -> Vec<SampleRecord> {
        records
            .into_iter()
            .map(|mut r| {
                r.sample_id += split * SPLIT_STRIDE;
                r
            })
            .collect()
    };
    let cycle =
        |tasks: &[TaskSpec], domain: &DomainSpec, n: usize, lane: u64| -> Result<Vec<SampleRecord>, SynthError> {
            let s = split_seed(seed, lane);
            (0..n as u64)
                .map(|i| generate_one(&tasks[i as usize % tasks.len()], domain, s, i))
                .collect()
        };

    let pretrain_base = tagged(cycle(&cfg.base_tasks, &cfg.base_domain, cfg.n_pretrain, 1)?, 1);
    let adapt = cycle(&cfg.adapt_tasks, &cfg.base_domain, cfg.n_adapt, 2)?;
    let n_train = cfg.n_adapt * 3 / 5;
    let n_val = cfg.n_adapt / 5;
    let adapt_train = tagged(adapt[..n_train].to_vec(), 2);
    let adapt_val = tagged(adapt[n_train..n_train + n_val].to_vec(), 3);
    let adapt_test = tagged(adapt[n_train + n_val..].to_vec(), 4);
    let shifted_test = tagged(cycle(&cfg.adapt_tasks, &cfg.shift_domain, cfg.n_shifted, 5)?, 5);

    // Shards re-render their slice of adapt_train under a per-client domain;
    // masks and ids are unchanged.
    let train_seed = split_seed(seed, 2);
    let per = n_train.div_ceil(cfg.n_clients);
    let federated_shards = (0..cfg.n_clients)
        .map(|c| {
            let domain = client_domain(&cfg.base_domain, c);
            adapt_train
                .iter()
                .enumerate()
                .skip(c * per)
                .take(per)
                .map(|(i, r)| {
                    let task = &cfg.adapt_tasks[i % cfg.adapt_tasks.len()];
                    let mut rec = generate_one(task, &domain, train_seed, i as u64)?;
                    rec.sample_id = r.sample_id;
                    Ok(rec)
                })
                .collect::<Result<Vec<_>, SynthError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Splits {
        pretrain_base,
        adapt_train,
        adapt_val,
        adapt_test,
        shifted_test,
        federated_shards,
    })
}

#[derive(Serialize)]
struct JsonRecord<'a> {
    sample_id: u64,
    task_id: &'a str,
    domain_id: &'a str,
    image: &'a [f64],
    mask: Vec<u8>,
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(records: &[SampleRecord], mut out: W) -> Result<(), SynthError> {
    for r in records {
        let line = JsonRecord {
            sample_id: r.sample_id,
            task_id: &r.task_id,
            domain_id: &r.domain_id,
            image: r.image.data(),
            mask: r.mask.data().iter().map(|&m| m as u8).collect(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
