mod common;

use memseg::backbone::{encode_memory, ModelParams};
use memseg::memory::{
    encode_fewshot, initial_pseudo_obs, learn_static, pseudo_obs_grad_check, EncodedSample, MemoryError, MemoryKind,
    StaticConfig,
};
use memseg::optim::OptimConfig;
use memseg::synthdata::{generate, DomainSpec, ShapeFamily, TaskSpec};

fn rings(n: usize, seed: u64) -> Vec<memseg::synthdata::SampleRecord> {
    generate(&TaskSpec::new(ShapeFamily::Ring), &DomainSpec::default(), n, seed).unwrap()
}

/// Adam's step is about `lr` per coordinate whatever the gradient size, so at
/// the default rate a near-optimal sample can overshoot. A small step makes
/// each update a descent step on every sample tried.
#[test]
fn single_pseudo_observation_loss_decreases() {
    let params = common::pretrained();
    let cfg = StaticConfig {
        n: 1,
        steps: 10,
        optim: OptimConfig {
            lr: 1e-4,
            ..OptimConfig::default()
        },
        ..StaticConfig::default()
    };
    let before = params.checksum();
    for family in ShapeFamily::ALL {
        for seed in 0..10 {
            let data = generate(&TaskSpec::new(family), &DomainSpec::default(), 1, seed).unwrap();
            let learned = learn_static(&params, &data, &cfg, 0).unwrap();
            for w in learned.curve.windows(2) {
                assert!(
                    w[1] < w[0] + 1e-9,
                    "{family:?} seed {seed}: loss rose: {:?}",
                    learned.curve
                );
            }
            assert_eq!(learned.entries.len(), 1);
            assert_eq!(learned.entries[0].kind(), MemoryKind::Static);
            let norm: f64 = learned.entries[0].embedding().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }
    assert_eq!(before, params.checksum());
}

#[test]
fn learning_needs_a_frozen_model_and_enough_data() {
    let data = rings(2, 0);
    let cfg = StaticConfig::default();
    assert!(matches!(
        learn_static(&ModelParams::init(0), &data, &cfg, 0),
        Err(MemoryError::NotFrozen)
    ));
    assert!(matches!(
        learn_static(&common::frozen_init(0), &data, &cfg, 0),
        Err(MemoryError::InsufficientData { need: 4, have: 2 })
    ));
}

#[test]
fn initial_pseudo_observations_come_from_distinct_samples() {
    let data = rings(10, 1);
    let z = initial_pseudo_obs(&data, 4, 9).unwrap();
    assert_eq!(z, initial_pseudo_obs(&data, 4, 9).unwrap());
    for p in &z {
        let source = data
            .iter()
            .position(|r| r.image == p.x_hat)
            .expect("x_hat copies a sample image");
        // Logits of the clamped mask map back to the mask after binarising.
        let probs = p.mask_probs();
        for (&q, &m) in probs.data().iter().zip(data[source].mask.data()) {
            assert!((q - m).abs() <= 1e-3 + 1e-12);
        }
    }
    let mut sources: Vec<usize> = z
        .iter()
        .map(|p| data.iter().position(|r| r.image == p.x_hat).unwrap())
        .collect();
    sources.dedup();
    assert_eq!(sources.len(), 4);
}

#[test]
fn fewshot_entries_are_plain_encodings() {
    let params = common::frozen_init(2);
    let support = rings(3, 5);
    let entries = encode_fewshot(&params, &support).unwrap();
    assert_eq!(entries.len(), 3);
    for (e, s) in entries.iter().zip(&support) {
        assert_eq!(e.kind(), MemoryKind::FewShot);
        assert_eq!(e.token(), &encode_memory(&params, &s.image, &s.mask).unwrap());
    }
    assert!(matches!(encode_fewshot(&params, &[]), Err(MemoryError::EmptySupport)));
}

/// Starting logits come from a clamped mask, where the sigmoid saturates
/// and many gradient coordinates sit near 1e-8. A 1e-5 step loses those to
/// rounding in the loss, so this check uses a wider one.
#[test]
fn pseudo_observation_gradient_matches_finite_differences() {
    let params = common::pretrained();
    let data = rings(2, 8);
    let sample = EncodedSample::encode(&params, &data[0]).unwrap();
    let z = initial_pseudo_obs(&data[1..], 1, 0).unwrap();
    let err = pseudo_obs_grad_check(&params, &sample, &z[0], 1e-4).unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}
