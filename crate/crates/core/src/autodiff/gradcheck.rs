use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, OpKind, Tape, Tensor, Var};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, eps: f64) -> Result<Tensor, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let eval = |data: Vec<f64>, coord: usize| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(x.shape().to_vec(), data)?);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(value.shape().to_vec()));
        }
        let y = value.item();
        if !y.is_finite() {
            return Err(AutodiffError::NonFiniteEvaluation(coord));
        }
        Ok(y)
    };
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        grad.push((eval(plus, i)? - eval(minus, i)?) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest relative disagreement between the tape gradient and central
/// differences, `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    if !tape.value(out).all_finite() {
        return Err(AutodiffError::NonFiniteEvaluation(0));
    }
    let grads = tape.backward(out)?;
    let analytic = grads.get(v)?;
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / f64::max(1e-8, a.abs() + n.abs()))
        .fold(0.0, f64::max))
}

/// Finite-difference step used by the op suite.
pub const SUITE_EPS: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so kinks and poles stay outside the
/// finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.2..1.5);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// `sum(out * r)` for a fixed random `r`, so every output coordinate
/// contributes a distinct weight to the scalar.
fn weighted_sum(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var, AutodiffError> {
    let w = tape.constant(r.clone());
    let p = tape.mul(out, w)?;
    tape.sum_all(p)
}

/// Checks one op with respect to each of its inputs on random shapes and
/// values drawn from `seed`; returns the worst relative error.
pub fn check_op(op: &str, seed: u64) -> Result<f64, AutodiffError> {
    let kind: OpKind = op.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (
        rng.random_range(1..=5),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    );
    let inputs: Vec<Tensor> = match &kind {
        OpKind::MatMul => vec![random_tensor(&mut rng, m, k), random_tensor(&mut rng, k, n)],
        OpKind::Add | OpKind::Sub | OpKind::MulElem => {
            vec![random_tensor(&mut rng, m, n), random_tensor(&mut rng, m, n)]
        }
        OpKind::DivElem => vec![random_tensor(&mut rng, m, n), away_from_zero(&mut rng, m, n)],
        OpKind::Relu => vec![away_from_zero(&mut rng, m, n)],
        OpKind::ConcatRows => vec![random_tensor(&mut rng, m, n), random_tensor(&mut rng, k, n)],
        OpKind::BroadcastAddRow => vec![random_tensor(&mut rng, m, n), random_tensor(&mut rng, 1, n)],
        _ => vec![random_tensor(&mut rng, m, n).map(|v| 3.0 * v)],
    };
    let kind = match kind {
        OpKind::Scale(_) => OpKind::Scale(rng.random_range(-2.0..2.0)),
        OpKind::SliceRows { .. } => {
            let start = rng.random_range(0..m);
            OpKind::SliceRows {
                start,
                end: rng.random_range(start + 1..=m),
            }
        }
        OpKind::Reshape(_) => OpKind::Reshape(vec![n, m]),
        OpKind::Gather { .. } => {
            let len = rng.random_range(1..=2 * m * n);
            let index: Vec<usize> = (0..len).map(|_| rng.random_range(0..m * n)).collect();
            OpKind::Gather {
                shape: vec![1, len],
                index: index.into(),
            }
        }
        other => other,
    };
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = tape.apply(kind.clone(), &vars)?;
        tape.value(out).shape().to_vec()
    };
    let len = out_shape.iter().product();
    let r = Tensor::new(out_shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let mut worst: f64 = 0.0;
    for which in 0..inputs.len() {
        let err = grad_check(
            |tape, v| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == which { v } else { tape.constant(t.clone()) })
                    .collect();
                let out = tape.apply(kind.clone(), &vars)?;
                weighted_sum(tape, out, &r)
            },
            &inputs[which],
            SUITE_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`check_op`] over every op name, in declaration order.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>, AutodiffError> {
    OpKind::NAMES
        .iter()
        .map(|&name| Ok((name, check_op(name, seed)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::matrix(2, 3, vec![0.3, -1.2, 4.0, 2.5, 0.0, -0.7]);
        let err = grad_check(|t, v| t.sum_all(v), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn every_op_passes_seed_zero() {
        for (name, err) in op_suite(0).unwrap() {
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn non_finite_is_reported() {
        let x = Tensor::row(vec![0.0, 1.0]);
        let r = grad_check(
            |t, v| {
                let d = t.div(v, v)?;
                t.sum_all(d)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(AutodiffError::NonFiniteEvaluation(_))));
    }
}
