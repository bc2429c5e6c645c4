use krt_core::datagen::{decode, encode, generate, load, save, GenSpec};
use krt_core::metrics::{evaluate, EvalBatch};
use krt_core::protocol::build_plan;
use krt_core::Error;

#[test]
fn mean_label_count_tracks_target() {
    for avg in [1.5, 2.9, 4.0] {
        let spec = GenSpec {
            h: 4,
            w: 4,
            c: 2,
            avg_labels: avg,
            n_train: 10_000,
            n_test: 20,
            ..GenSpec::default()
        };
        let g = generate(&spec, 5).unwrap();
        let mean = g.train.examples.iter().map(|e| e.labels.len()).sum::<usize>() as f64 / 10_000.0;
        assert!((mean - avg).abs() <= 0.1, "avg_labels {avg}: empirical {mean}");
    }
}

#[test]
fn same_seed_same_bytes() {
    let spec = GenSpec {
        n_train: 100,
        n_test: 30,
        ..GenSpec::default()
    };
    let a = generate(&spec, 9).unwrap();
    let b = generate(&spec, 9).unwrap();
    assert_eq!(encode(&a.train).unwrap(), encode(&b.train).unwrap());
    assert_eq!(encode(&a.test).unwrap(), encode(&b.test).unwrap());
    assert_ne!(
        encode(&generate(&spec, 10).unwrap().train).unwrap(),
        encode(&a.train).unwrap()
    );
}

#[test]
fn noise_is_the_only_difference_between_noise_levels() {
    let clean_spec = GenSpec {
        noise_sigma: 0.0,
        n_train: 200,
        n_test: 20,
        ..GenSpec::default()
    };
    let noisy_spec = GenSpec {
        noise_sigma: 0.4,
        ..clean_spec.clone()
    };
    let clean = generate(&clean_spec, 2).unwrap();
    let noisy = generate(&noisy_spec, 2).unwrap();
    let mut sq = 0.0;
    let mut count = 0;
    for (a, b) in clean.train.examples.iter().zip(&noisy.train.examples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.labels, b.labels);
        for (x, y) in a.features.iter().zip(&b.features) {
            sq += f64::from(y - x).powi(2);
            count += 1;
        }
    }
    let sd = (sq / count as f64).sqrt();
    assert!((sd - 0.4).abs() < 0.01, "residual sd {sd}");
}

#[test]
fn noiseless_single_label_images_are_linearly_separable() {
    let spec = GenSpec {
        noise_sigma: 0.0,
        avg_labels: 1.0,
        n_train: 300,
        n_test: 300,
        ..GenSpec::default()
    };
    let g = generate(&spec, 4).unwrap();
    let (cells, c, k) = (spec.cells(), spec.c, spec.n_classes);
    // Linear scorer on globally pooled features with the prototypes as weights,
    // squashed into [0, 1] for the evaluator.
    let mut scores = Vec::new();
    let mut truths = Vec::new();
    for ex in &g.test.examples {
        assert_eq!(ex.labels.len(), 1);
        let mut pooled = vec![0.0f64; c];
        for cell in ex.features.chunks_exact(c) {
            for (p, &f) in pooled.iter_mut().zip(cell) {
                *p += f64::from(f) / cells as f64;
            }
        }
        let logits: Vec<f64> = g
            .prototypes
            .iter()
            .map(|w| w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let best = (0..k).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
        assert!(ex.labels.contains(best));
        scores.extend(logits.iter().map(|z| 1.0 / (1.0 + (-z * 50.0).exp())));
        truths.extend((0..k).map(|j| ex.labels.contains(j)));
    }
    let r = evaluate(&EvalBatch::new(g.test.len(), k, scores, truths).unwrap(), 0.5, 1).unwrap();
    assert_eq!(r.map, 100.0);
}

#[test]
fn every_session_class_has_training_images() {
    let g = generate(&GenSpec::default(), 0).unwrap();
    let plan = build_plan(&g.train.class_names, 0, 5).unwrap();
    for t in 1..=plan.session_count() {
        for &class in plan.classes(t).unwrap() {
            assert!(
                g.train.examples.iter().any(|e| e.labels.contains(class)),
                "class {class}"
            );
        }
    }
}

#[test]
fn file_round_trip_and_integrity() {
    let spec = GenSpec {
        n_train: 60,
        n_test: 20,
        ..GenSpec::default()
    };
    let g = generate(&spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.mlds");
    save(&g.train, &path).unwrap();
    assert_eq!(load(&path).unwrap(), g.train);

    let bytes = std::fs::read(&path).unwrap();
    for at in [bytes.len() / 3, bytes.len() / 2, bytes.len() - 9] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x01;
        assert!(matches!(decode(&bad), Err(Error::Checksum { .. })), "flip at {at}");
    }
    // A flipped header field changes the implied geometry; it must still fail.
    for at in 6..26 {
        let mut bad = bytes.clone();
        bad[at] ^= 0x01;
        assert!(decode(&bad).is_err(), "flip at {at}");
    }
    assert!(matches!(decode(&bytes[..bytes.len() / 2]), Err(Error::Format(_))));
}
