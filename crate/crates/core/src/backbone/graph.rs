//! The model as tape operations. Every public backbone op is a thin wrapper
//! over these builders, so training and inference share one definition.

use std::sync::{Arc, OnceLock};

use super::{Weights, DIM, IMAGE, PATCH, PATCH_AREA, TOKENS};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

type Result<T> = std::result::Result<T, AutodiffError>;

const GRID: usize = IMAGE / PATCH;

/// Flat pixel index for element `j` of patch token `t`.
fn pixel_of(t: usize, j: usize) -> usize {
    let (pr, pc) = (t / GRID, t % GRID);
    let (i, k) = (j / PATCH, j % PATCH);
    (pr * PATCH + i) * IMAGE + pc * PATCH + k
}

/// 32x32 image -> 64x16 patch rows.
fn patch_index() -> Arc<[usize]> {
    static INDEX: OnceLock<Arc<[usize]>> = OnceLock::new();
    INDEX
        .get_or_init(|| {
            (0..TOKENS)
                .flat_map(|t| (0..PATCH_AREA).map(move |j| pixel_of(t, j)))
                .collect()
        })
        .clone()
}

/// Stacked (image; mask) as 2x1024 -> 64x32 rows of two-channel patches.
fn memory_patch_index() -> Arc<[usize]> {
    static INDEX: OnceLock<Arc<[usize]>> = OnceLock::new();
    INDEX
        .get_or_init(|| {
            let plane = IMAGE * IMAGE;
            (0..TOKENS)
                .flat_map(|t| {
                    (0..2 * PATCH_AREA).map(move |j| {
                        let channel = j / PATCH_AREA;
                        channel * plane + pixel_of(t, j % PATCH_AREA)
                    })
                })
                .collect()
        })
        .clone()
}

/// 64x16 per-token outputs -> 32x32 image.
fn unpatch_index() -> Arc<[usize]> {
    static INDEX: OnceLock<Arc<[usize]>> = OnceLock::new();
    INDEX
        .get_or_init(|| {
            let mut inv = vec![0; IMAGE * IMAGE];
            for t in 0..TOKENS {
                for j in 0..PATCH_AREA {
                    inv[pixel_of(t, j)] = t * PATCH_AREA + j;
                }
            }
            inv.into()
        })
        .clone()
}

/// Records the weights on the tape, as leaves when they should receive
/// gradients and as constants otherwise.
pub fn bind(tape: &mut Tape, w: &Weights<crate::autodiff::Tensor>, trainable: bool) -> Weights<Var> {
    w.map(|_, t| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

fn mean_rows(tape: &mut Tape, x: Var, rows: usize) -> Result<Var> {
    let avg = tape.constant(Tensor::filled(1, rows, 1.0 / rows as f64));
    tape.matmul(avg, x)
}

/// Single-head attention of `queries` over `keys_values`, returning the
/// attended values (before the output projection) and the weights.
fn attend(tape: &mut Tape, x: Var, kv: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var)> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(kv, wk)?;
    let v = tape.matmul(kv, wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (DIM as f64).sqrt())?;
    let weights = tape.softmax_rows(scores)?;
    Ok((tape.matmul(weights, v)?, weights))
}

/// Image encoder: patch embedding, positions, one self-attention block.
pub fn image_tokens(tape: &mut Tape, w: &Weights<Var>, image: Var) -> Result<Var> {
    let patches = tape.gather(image, vec![TOKENS, PATCH_AREA], patch_index())?;
    let e = tape.linear(patches, w.patch_w, w.patch_b)?;
    let e = tape.relu(e)?;
    let e = tape.add(e, w.pos)?;
    let (attended, _) = attend(tape, e, e, w.sa_q, w.sa_k, w.sa_v)?;
    let out = tape.matmul(attended, w.sa_o)?;
    tape.add(e, out)
}

/// Memory encoder: one 1x32 token for an (image, mask) pair.
pub fn memory_token(tape: &mut Tape, w: &Weights<Var>, image: Var, mask_probs: Var) -> Result<Var> {
    let flat_image = tape.apply(crate::autodiff::OpKind::Reshape(vec![1, IMAGE * IMAGE]), &[image])?;
    let flat_mask = tape.apply(crate::autodiff::OpKind::Reshape(vec![1, IMAGE * IMAGE]), &[mask_probs])?;
    let stacked = tape.concat_rows(&[flat_image, flat_mask])?;
    let patches = tape.gather(stacked, vec![TOKENS, 2 * PATCH_AREA], memory_patch_index())?;
    let e = tape.linear(patches, w.mem_patch_w, w.mem_patch_b)?;
    let e = tape.add(e, w.pos)?;
    let e = tape.relu(e)?;
    let pooled = mean_rows(tape, e, TOKENS)?;
    tape.matmul(pooled, w.mem_proj)
}

pub struct Decoded {
    pub mask_logits: Var,
    pub obj_logit: Var,
    pub attention: Var,
}

/// Memory cross-attention, MLP, and the two heads.
pub fn decode(tape: &mut Tape, w: &Weights<Var>, tokens: Var, memory: Var) -> Result<Decoded> {
    let (attended, attention) = attend(tape, tokens, memory, w.ca_q, w.ca_k, w.ca_v)?;
    let attended = tape.matmul(attended, w.ca_o)?;
    let c = tape.add(tokens, attended)?;
    let h = tape.linear(c, w.mlp_w1, w.mlp_b1)?;
    let h = tape.relu(h)?;
    let h = tape.linear(h, w.mlp_w2, w.mlp_b2)?;
    let u = tape.add(c, h)?;
    let per_token = tape.linear(u, w.dec_w, w.dec_b)?;
    let mask_logits = tape.gather(per_token, vec![IMAGE, IMAGE], unpatch_index())?;
    let pooled = mean_rows(tape, u, TOKENS)?;
    let obj_logit = tape.linear(pooled, w.obj_w, w.obj_b)?;
    Ok(Decoded {
        mask_logits,
        obj_logit,
        attention,
    })
}

pub const DICE_SMOOTH: f64 = 1.0;
pub const OBJ_WEIGHT: f64 = 0.3;

/// Soft Dice on sigmoid probabilities plus weighted objectness BCE.
pub fn loss(tape: &mut Tape, mask_logits: Var, obj_logit: Var, gt: &Tensor) -> Result<Var> {
    let presence = if gt.data().iter().any(|&v| v > 0.0) { 1.0 } else { 0.0 };
    let gt_sum = gt.sum();
    let y = tape.constant(gt.clone());
    let p = tape.sigmoid(mask_logits)?;
    let py = tape.mul(p, y)?;
    let inter = tape.sum_all(py)?;
    let p_sum = tape.sum_all(p)?;
    let num = tape.scale(inter, 2.0)?;
    let num = add_scalar(tape, num, DICE_SMOOTH)?;
    let den = add_scalar(tape, p_sum, gt_sum + DICE_SMOOTH)?;
    let ratio = tape.div(num, den)?;
    let one = tape.constant(Tensor::scalar(1.0));
    let dice = tape.sub(one, ratio)?;
    // BCE with logits: softplus(z) - presence * z.
    let sp = tape.softplus(obj_logit)?;
    let pz = tape.scale(obj_logit, presence)?;
    let bce = tape.sub(sp, pz)?;
    let bce = tape.scale(bce, OBJ_WEIGHT)?;
    tape.add(dice, bce)
}

fn add_scalar(tape: &mut Tape, x: Var, c: f64) -> Result<Var> {
    let k = tape.constant(Tensor::scalar(c));
    tape.add(x, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_round_trip() {
        let fwd = patch_index();
        let inv = unpatch_index();
        for p in 0..IMAGE * IMAGE {
            assert_eq!(fwd[inv[p]], p);
        }
        let mem = memory_patch_index();
        assert_eq!(mem[0], 0);
        assert_eq!(mem[PATCH_AREA], IMAGE * IMAGE);
    }
}
