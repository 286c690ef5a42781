mod common;

use memseg::autodiff::{grad_check, Tape, Tensor, SUITE_EPS};
use memseg::backbone::{
    cosine, encode_image, encode_memory, graph, loss, pretrain, segment, synth_episodes, BackboneError, MemoryToken,
    ModelParams, PretrainConfig, Weights,
};
use memseg::synthdata::{generate, DomainSpec, ShapeFamily, TaskSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(32, 32, |_, _| rng.random_range(0.0..1.0))
}

fn tokens(params: &ModelParams, n: usize, seed: u64) -> Vec<MemoryToken> {
    (0..n as u64)
        .map(|i| encode_memory(params, &uniform(seed * 100 + i), &uniform(seed * 100 + 50 + i)).unwrap())
        .collect()
}

#[test]
fn embeddings_are_unit_and_deterministic() {
    let p = common::frozen_init(0);
    let x = uniform(1);
    let a = encode_image(&p, &x).unwrap();
    let b = encode_image(&p, &x).unwrap();
    assert_eq!(a, b);
    assert!((cosine(&a.embedding, &b.embedding) - 1.0).abs() < 1e-12);
    let norm = a.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-9);
    assert_eq!(a.tokens.shape(), &[64, 32]);

    let mut data = x.data().to_vec();
    data[300] = 1.0 - data[300];
    let moved = encode_image(&p, &Tensor::matrix(32, 32, data)).unwrap();
    assert!(cosine(&a.embedding, &moved.embedding) < 1.0 - 1e-12);
}

#[test]
fn memory_encoder_gradient_matches_finite_differences() {
    let p = ModelParams::init(3);
    let mask = uniform(4);
    let w_values = p.weights().clone();
    let f = move |tape: &mut Tape, image| {
        let w = graph::bind(tape, &w_values, false);
        let m = tape.constant(mask.clone());
        let token = graph::memory_token(tape, &w, image, m)?;
        let sq = tape.mul(token, token)?;
        tape.sum_all(sq)
    };
    let err = grad_check(f, &uniform(5), SUITE_EPS).unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn zero_input_with_zero_offsets_gives_zero_token() {
    let p = ModelParams::init(0);
    let mut w: Weights<Tensor> = p.weights().clone();
    w.pos = Tensor::zeros(64, 32);
    w.mem_patch_b = Tensor::zeros(1, 32);
    let p = ModelParams::from_weights(w, 0).unwrap();
    let t = encode_memory(&p, &Tensor::zeros(32, 32), &Tensor::zeros(32, 32)).unwrap();
    assert!(t.0.iter().all(|&v| v == 0.0));
}

#[test]
fn memory_encoder_rejects_out_of_range_masks() {
    let p = common::frozen_init(0);
    let bad = Tensor::filled(32, 32, 1.01);
    assert!(matches!(
        encode_memory(&p, &uniform(0), &bad),
        Err(BackboneError::RangeViolation { .. })
    ));
    assert!(matches!(
        encode_memory(&p, &Tensor::zeros(16, 16), &Tensor::zeros(16, 16)),
        Err(BackboneError::ShapeMismatch(_))
    ));
    let same_a = encode_memory(&p, &uniform(1), &uniform(2)).unwrap();
    let same_b = encode_memory(&p, &uniform(1), &uniform(2)).unwrap();
    assert_eq!(same_a, same_b);
}

#[test]
fn single_memory_attends_with_weight_one() {
    let p = common::frozen_init(0);
    let out = segment(&p, &uniform(9), &tokens(&p, 1, 1)).unwrap();
    assert_eq!(out.attention.shape(), &[64, 1]);
    assert!(out.attention.data().iter().all(|&a| a == 1.0));
}

#[test]
fn duplicated_memory_matches_single() {
    let p = common::frozen_init(0);
    let m = tokens(&p, 1, 2);
    let one = segment(&p, &uniform(3), &m).unwrap();
    let two = segment(&p, &uniform(3), &[m[0].clone(), m[0].clone()]).unwrap();
    assert!(one.mask_logits.max_abs_diff(&two.mask_logits) < 1e-12);
    assert!((one.obj_logit - two.obj_logit).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn memory_order_is_irrelevant(seed in 0u64..1000, n in 2usize..6, rot in 1usize..5) {
        let p = common::frozen_init(seed % 3);
        let mems = tokens(&p, n, seed);
        let mut permuted = mems.clone();
        permuted.rotate_left(rot % n);
        permuted.swap(0, n - 1);
        let image = uniform(seed + 7);
        let a = segment(&p, &image, &mems).unwrap();
        let b = segment(&p, &image, &permuted).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn loss_is_nonnegative(seed in 0u64..1000, scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(32, 32, |_, _| scale * rng.random_range(-1.0..1.0));
        let gt = Tensor::from_fn(32, 32, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let obj = scale * rng.random_range(-1.0..1.0);
        prop_assert!(loss(&logits, obj, &gt).unwrap() >= 0.0);
    }
}

#[test]
fn frozen_weights_survive_many_forward_calls() {
    let p = common::frozen_init(1);
    let before = p.checksum();
    let mems = tokens(&p, 3, 4);
    let image = uniform(11);
    let gt = uniform(12).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    for _ in 0..10_000 {
        let out = segment(&p, &image, &mems).unwrap();
        loss(&out.mask_logits, out.obj_logit, &gt).unwrap();
    }
    assert_eq!(before, p.checksum());
}

#[test]
fn checkpoint_file_round_trip() {
    let p = common::frozen_init(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.json");
    p.save(&path).unwrap();
    let q = ModelParams::load(&path).unwrap();
    assert_eq!(p.checksum(), q.checksum());
    assert!(q.is_frozen());
    assert_eq!(q.init_seed(), 5);

    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    json["arch"]["dim"] = serde_json::json!(64);
    assert!(matches!(
        ModelParams::from_json(&json.to_string()),
        Err(BackboneError::ArchMismatch(_))
    ));
}

#[test]
fn committed_checkpoint_is_frozen_and_sized() {
    let p = common::pretrained();
    assert!(p.is_frozen());
    assert_eq!(p.param_count(), 17617);
}

#[test]
fn pretraining_is_deterministic_and_refuses_frozen_models() {
    let tasks = [
        TaskSpec::new(ShapeFamily::Ellipse),
        TaskSpec::new(ShapeFamily::Rectangle),
    ];
    let episodes = synth_episodes(&tasks, 8, 2, 1, 3).unwrap();
    let cfg = PretrainConfig {
        epochs: 1,
        mixed_epochs: 1,
        episodes: 8,
        batch_size: 4,
        ..PretrainConfig::default()
    };
    let (a, _) = pretrain(ModelParams::init(0), &episodes, &cfg, |_, _| {}).unwrap();
    let (b, _) = pretrain(ModelParams::init(0), &episodes, &cfg, |_, _| {}).unwrap();
    assert!(a.is_frozen());
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), ModelParams::init(0).checksum());
    assert!(matches!(
        pretrain(a, &episodes, &cfg, |_, _| {}),
        Err(BackboneError::FrozenViolation)
    ));
}

#[test]
fn pretrained_model_segments_base_tasks() {
    // The committed checkpoint conditions on same-task supports.
    let p = common::pretrained();
    let task = TaskSpec::new(ShapeFamily::Ellipse);
    let data = generate(&task, &DomainSpec::default(), 12, 99).unwrap();
    let mems: Vec<MemoryToken> = data[..3]
        .iter()
        .map(|r| encode_memory(&p, &r.image, &r.mask).unwrap())
        .collect();
    let mut total = 0.0;
    for r in &data[3..] {
        let out = segment(&p, &r.image, &mems).unwrap();
        let pred = out.mask_logits.map(|z| if z > 0.0 { 1.0 } else { 0.0 });
        total += common::brute_dice(&pred, &r.mask);
    }
    let mean = total / 9.0;
    assert!(mean > 0.7, "mean dice {mean}");
}
