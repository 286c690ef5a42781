use memseg::autodiff::{check_op, AutodiffError, OpKind, Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for name in OpKind::NAMES {
            let err = check_op(name, seed).unwrap();
            prop_assert!(err <= 1e-4, "{} seed {}: {}", name, seed, err);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 4, values));
        let s = tape.softmax_rows(x).unwrap();
        let out = tape.value(s);
        for r in 0..3 {
            let row = out.row_slice(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softplus_is_stable(x in -800.0f64..800.0) {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::scalar(x));
        let s = tape.softplus(v).unwrap();
        let y = tape.value(s).item();
        prop_assert!(y.is_finite() && y >= 0.0 && y >= x);
    }
}

#[test]
fn matmul_shape_mismatch_is_rejected() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(2, 3));
    let b = tape.leaf(Tensor::zeros(2, 3));
    assert!(matches!(tape.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn backward_needs_a_scalar() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(2, 3));
    let r = tape.relu(a).unwrap();
    assert!(matches!(tape.backward(r), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn unknown_op_names_fail_to_parse() {
    assert!(matches!("conv2d".parse::<OpKind>(), Err(AutodiffError::UnknownOp(_))));
    for name in OpKind::NAMES {
        assert_eq!(name.parse::<OpKind>().unwrap().name(), name);
    }
}

#[test]
fn variables_do_not_cross_tapes() {
    let mut t1 = Tape::new();
    let mut t2 = Tape::new();
    let a = t1.leaf(Tensor::scalar(1.0));
    let b = t2.leaf(Tensor::scalar(1.0));
    assert!(matches!(t2.add(a, b), Err(AutodiffError::DetachedNode)));
}

#[test]
fn shared_subexpressions_accumulate() {
    // d/dx (x * x + x) = 2x + 1
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    let y = tape.add(sq, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 7.0);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let y = tape.mul(x, c).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 5.0);
    assert!(g.get(c).is_err());
}
