//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod bank;

use memseg::autodiff::Tensor;
use memseg::backbone::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 32;

/// Path of the committed pretrained checkpoint.
pub fn checkpoint_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/pretrained.json")
}

pub fn pretrained() -> ModelParams {
    ModelParams::load(&checkpoint_path()).expect("committed checkpoint loads")
}

/// Small untrained but frozen model, for tests that only need the
/// encoders to be deterministic functions.
pub fn frozen_init(seed: u64) -> ModelParams {
    let mut p = ModelParams::init(seed);
    p.freeze();
    p
}

fn grid(m: &Tensor) -> Vec<Vec<bool>> {
    (0..SIDE)
        .map(|r| (0..SIDE).map(|c| m.data()[r * SIDE + c] == 1.0).collect())
        .collect()
}

pub fn brute_dice(a: &Tensor, b: &Tensor) -> f64 {
    let (ga, gb) = (grid(a), grid(b));
    let mut both = 0;
    let mut na = 0;
    let mut nb = 0;
    for r in 0..SIDE {
        for c in 0..SIDE {
            if ga[r][c] {
                na += 1;
            }
            if gb[r][c] {
                nb += 1;
            }
            if ga[r][c] && gb[r][c] {
                both += 1;
            }
        }
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

fn brute_boundary(g: &[Vec<bool>]) -> Vec<(i64, i64)> {
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < SIDE as i64 && c < SIDE as i64 && g[r as usize][c as usize];
    let mut out = Vec::new();
    for r in 0..SIDE as i64 {
        for c in 0..SIDE as i64 {
            if at(r, c)
                && [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
                    .iter()
                    .any(|&(y, x)| !at(y, x))
            {
                out.push((r, c));
            }
        }
    }
    out
}

pub fn brute_hd95(a: &Tensor, b: &Tensor) -> f64 {
    let (ga, gb) = (grid(a), grid(b));
    let empty = |g: &Vec<Vec<bool>>| g.iter().flatten().all(|&v| !v);
    match (empty(&ga), empty(&gb)) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return ((31.0f64).powi(2) * 2.0).sqrt(),
        _ => {}
    }
    let (ba, bb) = (brute_boundary(&ga), brute_boundary(&gb));
    let nearest = |p: &(i64, i64), set: &[(i64, i64)]| {
        set.iter()
            .map(|q| (((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = ba.iter().map(|p| nearest(p, &bb)).collect();
    d.extend(bb.iter().map(|p| nearest(p, &ba)));
    d.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank = 0.95 * (d.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 {
        d[lo]
    } else {
        d[lo] * (1.0 - frac) + d[lo + 1] * frac
    }
}

/// Random binary mask: a union of rectangles and discs, with some
/// speckle, or occasionally empty.
pub fn random_mask(rng: &mut ChaCha8Rng) -> Tensor {
    let mut g = vec![0.0; SIDE * SIDE];
    if rng.random_bool(0.05) {
        return Tensor::new(vec![SIDE, SIDE], g).unwrap();
    }
    for _ in 0..rng.random_range(1..4) {
        let (cy, cx) = (rng.random_range(0.0..32.0), rng.random_range(0.0..32.0));
        let (ry, rx) = (rng.random_range(1.0..10.0), rng.random_range(1.0..10.0));
        let disc = rng.random_bool(0.5);
        for r in 0..SIDE {
            for c in 0..SIDE {
                let (dy, dx) = ((r as f64 - cy) / ry, (c as f64 - cx) / rx);
                let inside = if disc {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    g[r * SIDE + c] = 1.0;
                }
            }
        }
    }
    for _ in 0..rng.random_range(0..6) {
        let i = rng.random_range(0..SIDE * SIDE);
        g[i] = 1.0 - g[i];
    }
    Tensor::new(vec![SIDE, SIDE], g).unwrap()
}

pub fn mask_pairs(n: usize, seed: u64) -> Vec<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (random_mask(&mut rng), random_mask(&mut rng))).collect()
}
