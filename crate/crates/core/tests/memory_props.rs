mod common;

use common::bank::{model, step, wm_config};
use memseg::autodiff::Tensor;
use memseg::backbone::{self, cosine};
use memseg::memory::{self, MemoryBank, MemoryError, MemoryKind, UpdateAction, WorkingMemoryConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn buffer_never_exceeds_capacity(seed in any::<u64>(), capacity in 1usize..6, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = wm_config(&mut rng, capacity);
        let mut bank = MemoryBank::new(capacity).unwrap();
        for i in 0..n {
            step(&mut bank, &mut rng, &cfg, i);
            prop_assert!(bank.working_entries().len() <= capacity);
        }
    }

    #[test]
    fn gates_match_their_definitions(seed in any::<u64>(), warmup in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = wm_config(&mut rng, 4);
        let mut bank = MemoryBank::new(4).unwrap();
        for i in 0..warmup {
            step(&mut bank, &mut rng, &cfg, i);
        }
        let o = step(&mut bank, &mut rng, &cfg, warmup);
        let skipped = matches!(o.action, UpdateAction::Skipped { .. });
        prop_assert_eq!(skipped, o.dice >= cfg.tau_dice);
        if !skipped {
            let added = matches!(o.action, UpdateAction::Added { .. });
            prop_assert_eq!(added, o.s_star < cfg.tau_sim);
        } else {
            prop_assert_eq!(&o.before, &o.after);
        }
    }

    #[test]
    fn merges_stay_on_the_segment(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Low similarity gate and a dice gate that never skips: every
        // update after the first one merges.
        let cfg = WorkingMemoryConfig {
            tau_dice: 0.999,
            tau_sim: rng.random_range(0.01..0.5),
            alpha0: rng.random_range(0.05..1.0),
            capacity: 4,
            k_default: 4,
        };
        let mut bank = MemoryBank::new(4).unwrap();
        step(&mut bank, &mut rng, &cfg, 0);
        let o = step(&mut bank, &mut rng, &cfg, 1);
        if let UpdateAction::Merged { entry_id, alpha } = &o.action {
            prop_assert!(*alpha > 0.0 && *alpha <= cfg.alpha0);
            let old = o.before.working_entries().iter().find(|e| e.source_id() == entry_id).unwrap();
            let new = o.after.working_entries().iter().find(|e| e.source_id() == entry_id).unwrap();
            prop_assert_eq!(new.ema_count(), old.ema_count() + 1);
            for ((a, b), m) in old.token().0.iter().zip(&o.m_t).zip(&new.token().0) {
                let (lo, hi) = (a.min(*b), a.max(*b));
                prop_assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
                prop_assert!((m - ((1.0 - alpha) * a + alpha * b)).abs() <= 1e-12);
            }
            let norm: f64 = new.embedding().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        } else {
            let skipped = matches!(o.action, UpdateAction::Skipped { .. });
            prop_assert!(o.s_star < cfg.tau_sim || skipped);
        }
    }

    #[test]
    fn save_load_roundtrip_is_value_identical(seed in any::<u64>(), n in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = wm_config(&mut rng, 3);
        let mut bank = MemoryBank::new(3).unwrap();
        let support = memseg::synthdata::generate(
            &memseg::synthdata::TaskSpec::new(memseg::synthdata::ShapeFamily::Ring),
            &memseg::synthdata::DomainSpec::default(),
            2,
            seed,
        ).unwrap();
        bank.insert(memory::encode_fewshot(model(), &support).unwrap()).unwrap();
        for i in 0..n {
            step(&mut bank, &mut rng, &cfg, i);
        }
        let e = bank.working_entries().first().map(|e| e.embedding().to_vec());
        if let Some(q) = e {
            memory::retrieve(&mut bank, &q, 2, &MemoryKind::ALL);
        }
        let json = bank.to_json().unwrap();
        let back = MemoryBank::from_json(&json).unwrap();
        prop_assert_eq!(&back, &bank);
        prop_assert_eq!(back.to_json().unwrap(), json);
    }
}

#[test]
fn retrieval_orders_by_similarity_and_keeps_tokens() {
    let params = model();
    let support = memseg::synthdata::generate(
        &memseg::synthdata::TaskSpec::new(memseg::synthdata::ShapeFamily::Ellipse),
        &memseg::synthdata::DomainSpec::default(),
        5,
        1,
    )
    .unwrap();
    let mut bank = MemoryBank::new(2).unwrap();
    bank.insert(memory::encode_fewshot(params, &support).unwrap()).unwrap();
    let before = bank.clone();
    let q = backbone::encode_image(params, &support[2].image).unwrap().embedding;
    let got = memory::retrieve(&mut bank, &q, 3, &[MemoryKind::FewShot]);
    assert_eq!(got.len(), 3);
    assert_eq!(got[0].source_id(), "fewshot-2");
    let sims: Vec<f64> = got.iter().map(|e| cosine(&q, e.embedding())).collect();
    assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    for e in &got {
        let old = before
            .fewshot_entries()
            .iter()
            .find(|o| o.source_id() == e.source_id())
            .unwrap();
        assert_eq!(old.token(), e.token());
        assert_eq!(e.hits(), old.hits() + 1);
    }
    assert_eq!(bank.tick(), 1);
    assert!(memory::retrieve(&mut bank, &q, 3, &[MemoryKind::Working]).is_empty());
}

#[test]
fn corrupt_banks_are_rejected() {
    let bank = MemoryBank::new(2).unwrap();
    let json = bank.to_json().unwrap();
    let bad_magic = json.replace("MEMSEG-B", "NOPE");
    assert!(matches!(
        MemoryBank::from_json(&bad_magic),
        Err(MemoryError::BadMagic(_))
    ));
    let bad_version = json.replace("\"version\": 1", "\"version\": 9");
    assert!(matches!(
        MemoryBank::from_json(&bad_version),
        Err(MemoryError::VersionMismatch(9))
    ));

    let mut e0 = vec![0.0; 32];
    e0[0] = 1.0;
    let entry = serde_json::json!({
        "kind": "working", "source_id": "w", "token": vec![0.0; 32], "embedding": e0,
        "hits": 1, "last_used": 5, "ema_count": 0
    });
    let future = serde_json::json!({"magic": "MEMSEG-B", "version": 1, "capacity_B": 2, "tick": 4, "entries": [entry]});
    assert!(matches!(
        MemoryBank::from_json(&future.to_string()),
        Err(MemoryError::CorruptEntry { index: 0, .. })
    ));
}

#[test]
fn working_update_rejects_soft_corrections() {
    let params = model();
    let mut bank = MemoryBank::new(2).unwrap();
    let img = Tensor::zeros(32, 32);
    let soft = Tensor::filled(32, 32, 0.5);
    let r = memory::working_update(
        &mut bank,
        params,
        &img,
        &soft,
        &soft,
        &WorkingMemoryConfig::default(),
        "x",
    );
    assert!(matches!(r, Err(MemoryError::RangeViolation(_))));
}

#[test]
fn eviction_removes_least_recently_used() {
    let params = model();
    let cfg = WorkingMemoryConfig {
        tau_dice: 0.999,
        tau_sim: 0.9999999,
        capacity: 2,
        ..WorkingMemoryConfig::default()
    };
    let mut bank = MemoryBank::new(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let imgs: Vec<Tensor> = (0..3)
        .map(|_| Tensor::from_fn(32, 32, |_, _| rng.random::<f64>()))
        .collect();
    let empty = Tensor::zeros(32, 32);
    let full = Tensor::filled(32, 32, 1.0);
    for (i, img) in imgs.iter().enumerate() {
        let a = memory::working_update(&mut bank, params, img, &empty, &full, &cfg, &format!("w{i}")).unwrap();
        assert!(matches!(a, UpdateAction::Added { .. }), "{a:?}");
        if i == 1 {
            // Touch w0 so w1 becomes the least recently used.
            let q = bank.working_entries()[0].embedding().to_vec();
            memory::retrieve(&mut bank, &q, 1, &[MemoryKind::Working]);
        }
    }
    let ids: Vec<&str> = bank.working_entries().iter().map(|e| e.source_id()).collect();
    assert_eq!(ids, ["w0", "w2"]);
}

#[test]
fn same_image_twice_merges() {
    let params = model();
    let cfg = WorkingMemoryConfig {
        tau_dice: 0.999,
        ..WorkingMemoryConfig::default()
    };
    let mut bank = MemoryBank::new(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Tensor::from_fn(32, 32, |_, _| rng.random::<f64>());
    let empty = Tensor::zeros(32, 32);
    let full = Tensor::filled(32, 32, 1.0);
    let first = memory::working_update(&mut bank, params, &img, &empty, &full, &cfg, "a").unwrap();
    assert!(matches!(first, UpdateAction::Added { .. }));
    let second = memory::working_update(&mut bank, params, &img, &empty, &full, &cfg, "b").unwrap();
    match second {
        // Full confidence and identical embeddings: alpha is exactly alpha0.
        UpdateAction::Merged { entry_id, alpha } => {
            assert_eq!(entry_id, "a");
            assert!((alpha - cfg.alpha0).abs() < 1e-12);
        }
        other => panic!("expected a merge, got {other:?}"),
    }
    assert_eq!(bank.working_entries().len(), 1);
}
