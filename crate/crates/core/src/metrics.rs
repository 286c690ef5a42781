//! Dice and HD95 on binary 2-D masks, plus stream summaries.
//!
//! Empty-mask conventions: two empty masks have Dice 1 and HD95 0; when
//! exactly one mask is empty HD95 is the image diagonal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("mask value {value} at index {index} is not 0 or 1")]
    NonBinary { index: usize, value: f64 },
    #[error("no records to aggregate")]
    EmptyRecords,
    #[error("window must be at least 1")]
    InvalidWindow,
}

/// Per-sample evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: u64,
    pub dice: f64,
    pub hd95: f64,
}

/// Global means plus non-overlapping window means in stream order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_dice: f64,
    pub mean_hd95: f64,
    pub window_dice: Vec<f64>,
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<(usize, usize), MetricsError> {
    let dims = a.dims2().filter(|d| Some(*d) == b.dims2());
    let Some(dims) = dims else {
        return Err(MetricsError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    };
    for t in [a, b] {
        if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(MetricsError::NonBinary { index, value });
        }
    }
    Ok(dims)
}

/// Thresholds probabilities at 0.5 (inclusive) into a 0/1 mask.
pub fn binarize(probs: &Tensor, threshold: f64) -> Tensor {
    probs.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    check_pair(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x == 1.0, y == 1.0);
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Foreground pixels with at least one background 4-neighbour; pixels
/// outside the frame count as background.
pub fn boundary(mask: &Tensor) -> Vec<(usize, usize)> {
    let (rows, cols) = mask.dims2().expect("2-D mask");
    let fg = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols && mask.get(r as usize, c as usize) == 1.0
    };
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (ri, ci) = (r as isize, c as isize);
            if fg(ri, ci) && !(fg(ri - 1, ci) && fg(ri + 1, ci) && fg(ri, ci - 1) && fg(ri, ci + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

fn min_distance(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter()
        .map(|q| {
            let dr = p.0 as f64 - q.0 as f64;
            let dc = p.1 as f64 - q.1 as f64;
            dr * dr + dc * dc
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Percentile with linear interpolation between closest ranks
/// (rank = q/100 * (n-1)). `values` must be sorted ascending.
pub fn percentile_sorted(values: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Pooled boundary distances in both directions, sorted ascending.
/// `None` when either mask is empty.
pub fn boundary_distances(a: &Tensor, b: &Tensor) -> Result<Option<Vec<f64>>, MetricsError> {
    check_pair(a, b)?;
    let (ba, bb) = (boundary(a), boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return Ok(None);
    }
    let mut d: Vec<f64> = ba.iter().map(|&p| min_distance(p, &bb)).collect();
    d.extend(bb.iter().map(|&q| min_distance(q, &ba)));
    d.sort_by(f64::total_cmp);
    Ok(Some(d))
}

pub fn hd95(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    let (rows, cols) = check_pair(a, b)?;
    match boundary_distances(a, b)? {
        Some(d) => Ok(percentile_sorted(&d, 95.0)),
        None => {
            let empty_a = a.data().iter().all(|&v| v == 0.0);
            let empty_b = b.data().iter().all(|&v| v == 0.0);
            if empty_a && empty_b {
                Ok(0.0)
            } else {
                let (h, w) = ((rows - 1) as f64, (cols - 1) as f64);
                Ok((h * h + w * w).sqrt())
            }
        }
    }
}

/// Means over all records, plus means over consecutive windows of `window`
/// records. A trailing partial window is averaged over the records it has.
pub fn aggregate(records: &[EvalRecord], window: usize) -> Result<Summary, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    if window == 0 {
        return Err(MetricsError::InvalidWindow);
    }
    let n = records.len() as f64;
    let mean = |xs: &[EvalRecord]| xs.iter().map(|r| r.dice).sum::<f64>() / xs.len() as f64;
    Ok(Summary {
        mean_dice: mean(records),
        mean_hd95: records.iter().map(|r| r.hd95).sum::<f64>() / n,
        window_dice: records.chunks(window).map(mean).collect(),
    })
}
