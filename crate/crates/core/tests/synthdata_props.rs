use std::collections::BTreeSet;
use std::f64::consts::PI;

use memseg::synthdata::{
    generate, make_splits, oracle_correct, rasterize, write_jsonl, DataConfig, DomainSpec, ShapeFamily, ShapeGeometry,
    SynthError, TaskSpec, Texture, MIN_FOREGROUND,
};

fn plain_domain() -> DomainSpec {
    DomainSpec {
        noise_std: 0.0,
        texture: Texture::None,
        blur_radius: 0,
        distractor_intensity: None,
        ..DomainSpec::default()
    }
}

#[test]
fn generation_is_bit_identical() {
    for family in ShapeFamily::ALL {
        let task = TaskSpec::new(family);
        let a = generate(&task, &DomainSpec::shifted(), 20, 11).unwrap();
        let b = generate(&task, &DomainSpec::shifted(), 20, 11).unwrap();
        assert_eq!(a, b);
        let mut ja = Vec::new();
        let mut jb = Vec::new();
        write_jsonl(&a, &mut ja).unwrap();
        write_jsonl(&b, &mut jb).unwrap();
        assert_eq!(ja, jb);
    }
}

#[test]
fn circle_area_matches_pixel_centre_count() {
    let g = ShapeGeometry {
        cx: 16.0,
        cy: 16.0,
        a: 8.0,
        b: 8.0,
        theta: 0.3,
    };
    let mask = rasterize(ShapeFamily::Ellipse, &g);
    let area: f64 = mask.data().iter().sum();
    // Independent count over pixel centres.
    let mut oracle = 0.0;
    for r in 0..32 {
        for c in 0..32 {
            let (dx, dy) = (c as f64 + 0.5 - 16.0, r as f64 + 0.5 - 16.0);
            if dx * dx + dy * dy <= 64.0 {
                oracle += 1.0;
            }
        }
    }
    assert_eq!(area, oracle);
    assert!((area - PI * 64.0).abs() <= 20.0, "area {area}");
}

#[test]
fn clean_domain_has_two_intensities() {
    let d = plain_domain();
    for r in generate(&TaskSpec::new(ShapeFamily::Rectangle), &d, 10, 3).unwrap() {
        for (&px, &m) in r.image.data().iter().zip(r.mask.data()) {
            let want = if m == 1.0 { d.fg_intensity } else { d.bg_intensity };
            assert_eq!(px, want);
        }
    }
}

#[test]
fn masks_are_binary_and_large_enough_and_pixels_clipped() {
    for family in ShapeFamily::ALL {
        for r in generate(&TaskSpec::new(family), &DomainSpec::shifted(), 50, 5).unwrap() {
            assert!(r.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            assert!(r.mask.data().iter().sum::<f64>() >= MIN_FOREGROUND as f64);
            assert!(r.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn domain_shift_preserves_labels() {
    let task = TaskSpec::new(ShapeFamily::Ring);
    let base = generate(&task, &DomainSpec::default(), 30, 9).unwrap();
    let shifted = generate(&task, &DomainSpec::shifted(), 30, 9).unwrap();
    for (a, b) in base.iter().zip(&shifted) {
        assert_eq!(a.mask, b.mask);
        assert_ne!(a.image, b.image);
    }
}

#[test]
fn splits_are_disjoint_and_shards_partition_training() {
    let cfg = DataConfig::default();
    let s = make_splits(&cfg, 0).unwrap();
    assert_eq!(
        (s.adapt_train.len(), s.adapt_val.len(), s.adapt_test.len()),
        (300, 100, 100)
    );

    let ids = |v: &[memseg::synthdata::SampleRecord]| v.iter().map(|r| r.sample_id).collect::<BTreeSet<_>>();
    let groups = [
        ids(&s.pretrain_base),
        ids(&s.adapt_train),
        ids(&s.adapt_val),
        ids(&s.adapt_test),
        ids(&s.shifted_test),
    ];
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            assert!(groups[i].is_disjoint(&groups[j]), "splits {i} and {j} overlap");
        }
    }

    assert_eq!(s.federated_shards.len(), 4);
    let mut union = BTreeSet::new();
    for shard in &s.federated_shards {
        for r in shard {
            assert!(union.insert(r.sample_id), "sample {} in two shards", r.sample_id);
        }
    }
    assert_eq!(union, groups[1]);

    // Shards change appearance only.
    let train_masks: std::collections::BTreeMap<u64, _> =
        s.adapt_train.iter().map(|r| (r.sample_id, &r.mask)).collect();
    for r in s.federated_shards.iter().flatten() {
        assert_eq!(&r.mask, train_masks[&r.sample_id]);
    }
    let domains: BTreeSet<_> = s.federated_shards.iter().map(|sh| sh[0].domain_id.clone()).collect();
    assert_eq!(domains.len(), 4);

    let base: BTreeSet<_> = cfg.base_tasks.iter().map(|t| t.shape_family).collect();
    assert!(cfg.adapt_tasks.iter().all(|t| !base.contains(&t.shape_family)));
}

#[test]
fn splits_are_reproducible() {
    let cfg = DataConfig::default();
    let a = make_splits(&cfg, 4).unwrap();
    let b = make_splits(&cfg, 4).unwrap();
    assert_eq!(a.shifted_test, b.shifted_test);
    assert_eq!(a.federated_shards, b.federated_shards);
    let c = make_splits(&cfg, 5).unwrap();
    assert_ne!(a.adapt_train[0].image, c.adapt_train[0].image);
}

#[test]
fn invalid_configs_are_rejected() {
    let overlapping = DataConfig {
        adapt_tasks: vec![TaskSpec::new(ShapeFamily::Ellipse)],
        ..DataConfig::default()
    };
    assert!(matches!(
        make_splits(&overlapping, 0),
        Err(SynthError::ConfigInvalid(_))
    ));

    let bad_size = TaskSpec {
        size_max: 1.2,
        ..TaskSpec::new(ShapeFamily::Cross)
    };
    assert!(matches!(bad_size.validate(), Err(SynthError::ConfigInvalid(_))));

    let bad_domain = DomainSpec {
        fg_intensity: 1.5,
        ..DomainSpec::default()
    };
    assert!(matches!(bad_domain.validate(), Err(SynthError::ConfigInvalid(_))));
    assert!(matches!(
        generate(&TaskSpec::new(ShapeFamily::Ring), &DomainSpec::default(), 0, 0),
        Err(SynthError::EmptyRequest)
    ));
}

#[test]
fn oracle_returns_the_label_untouched() {
    let recs = generate(&TaskSpec::new(ShapeFamily::Cross), &DomainSpec::shifted(), 5, 2).unwrap();
    for r in &recs {
        let before = r.clone();
        let y = oracle_correct(r);
        assert_eq!(y, r.mask);
        assert_eq!(&before, r);
    }
}
