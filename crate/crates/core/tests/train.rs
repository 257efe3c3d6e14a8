use cfsg_core::hierarchy::{build_hierarchy, generate_synthetic_domains, SyntheticDomainConfig};
use cfsg_core::train::{
    evaluate, history_csv, load_checkpoint, save_checkpoint, train, BlockScores, Inference, TrainOutcome,
};
use cfsg_core::{Checkpoint, Dataset, Error, HierarchySpec, Lambda, TrainConfig};

fn small() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        hidden: 16,
        ..TrainConfig::default()
    }
}

fn domains(cfg: &TrainConfig, per_class: usize) -> (Dataset, Dataset) {
    let synthetic = SyntheticDomainConfig {
        samples_per_class: per_class,
        ..SyntheticDomainConfig::default()
    };
    generate_synthetic_domains(&HierarchySpec::benchmark(), &cfg.partition().unwrap(), &synthetic).unwrap()
}

fn trainable(o: &TrainOutcome) -> Vec<Vec<f64>> {
    o.checkpoint
        .model
        .tensors()
        .into_iter()
        .filter(|(_, _, trainable)| *trainable)
        .map(|(_, t, _)| t.data().to_vec())
        .collect()
}

#[test]
fn identical_runs_are_bit_identical() {
    let cfg = small();
    let (source, _) = domains(&cfg, 20);
    let a = train(&cfg, &source).unwrap();
    let b = train(&cfg, &source).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());

    let c = train(&TrainConfig { seed: 1, ..cfg }, &source).unwrap();
    assert_ne!(history_csv(&a.history), history_csv(&c.history));
}

#[test]
fn zero_learning_rate_keeps_parameters_and_history() {
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..small()
    };
    let (source, _) = domains(&cfg, 10);
    let one = train(&TrainConfig { epochs: 1, ..cfg.clone() }, &source).unwrap();
    let many = train(&cfg, &source).unwrap();
    assert_eq!(trainable(&one), trainable(&many));
    let first = &many.history[0];
    for r in &many.history[1..] {
        assert_eq!(r.components, first.components);
        assert_eq!(r.total.to_bits(), first.total.to_bits());
        assert_eq!(r.fine_train_acc, first.fine_train_acc);
    }
}

#[test]
fn default_benchmark_learns_and_stays_finite() {
    let cfg = TrainConfig::default();
    let (source, _) = domains(&cfg, 100);
    let out = train(&cfg, &source).unwrap();
    assert_eq!(out.history.len(), 30);
    let (first, last) = (&out.history[0], &out.history[29]);
    assert!(last.total < first.total, "{} -> {}", first.total, last.total);
    let csv = history_csv(&out.history);
    for line in csv.lines().skip(1) {
        for field in line.split(',') {
            assert!(field.parse::<f64>().unwrap().is_finite(), "{line}");
        }
    }
    let report = evaluate(&out.checkpoint, &source, Lambda::ONES, Inference::Linear).unwrap();
    assert!(report.fine_acc >= 0.9, "source accuracy {}", report.fine_acc);
}

#[test]
fn bias_only_weights_predict_the_top_bias_class() {
    let cfg = small();
    let (source, target) = domains(&cfg, 10);
    let ckpt = train(&cfg, &source).unwrap().checkpoint;
    let bias = ckpt.model.classifiers[0].bias.data().to_vec();
    let mut top = 0;
    for (k, b) in bias.iter().enumerate() {
        if *b > bias[top] {
            top = k;
        }
    }
    let expected = target.fine_labels().iter().filter(|&&y| y == top).count() as f64 / target.len() as f64;
    let report = evaluate(&ckpt, &target, Lambda::new(0.0, 0.0, 0.0), Inference::Linear).unwrap();
    assert_eq!(report.fine_acc, expected);
}

#[test]
fn untrained_models_sit_near_chance() {
    // Averaged over initializations: a single random network maps whole
    // clusters to one class, so its accuracy spreads wider than binomial.
    let (source, target) = domains(&small(), 50);
    let seeds = 10;
    let mut mean = 0.0;
    for seed in 0..seeds {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            seed,
            ..small()
        };
        let ckpt = train(&cfg, &source).unwrap().checkpoint;
        mean += evaluate(&ckpt, &target, Lambda::ONES, Inference::Linear).unwrap().fine_acc / seeds as f64;
    }
    assert!((mean - 0.125).abs() < 0.06, "mean untrained accuracy {mean}");
}

#[test]
fn class_count_mismatch_is_rejected() {
    let cfg = small();
    let (source, _) = domains(&cfg, 5);
    let ckpt = train(&TrainConfig { epochs: 1, ..cfg.clone() }, &source).unwrap().checkpoint;
    let other = build_hierarchy(vec![6, 3, 1], vec![vec![0, 0, 1, 1, 2, 2], vec![0, 0, 0]]).unwrap();
    let (wrong, _) = generate_synthetic_domains(
        &other,
        &cfg.partition().unwrap(),
        &SyntheticDomainConfig {
            samples_per_class: 3,
            ..SyntheticDomainConfig::default()
        },
    )
    .unwrap();
    let err = evaluate(&ckpt, &wrong, Lambda::ONES, Inference::Linear).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
}

#[test]
fn divergence_reports_a_finite_state() {
    let cfg = TrainConfig {
        learning_rate: 1e12,
        momentum: 0.0,
        epochs: 20,
        ..small()
    };
    let (source, _) = domains(&cfg, 10);
    match train(&cfg, &source) {
        Err(Error::Diverged { last_finite, .. }) => {
            assert!(last_finite.to_json().is_ok());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history.len())),
    }
}

fn saved(ckpt: &Checkpoint, dir: &std::path::Path, name: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    save_checkpoint(ckpt, &path).unwrap();
    path
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = TrainConfig {
        subcentroid_bank: true,
        learnable_lambda: true,
        ..small()
    };
    let (source, target) = domains(&cfg, 10);
    let ckpt = train(&cfg, &source).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let first = saved(&ckpt, dir.path(), "a.json");
    let loaded = load_checkpoint(&first).unwrap();
    let second = saved(&loaded, dir.path(), "b.json");
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(loaded, ckpt);

    for inference in [Inference::Linear, Inference::SubCentroid] {
        let lam = Lambda::new(0.5, 0.3, 0.2);
        assert_eq!(
            evaluate(&ckpt, &target, lam, inference).unwrap(),
            evaluate(&loaded, &target, lam, inference).unwrap()
        );
    }
    let (a, b) = (
        BlockScores::compute(&ckpt, &target, 1).unwrap(),
        BlockScores::compute(&loaded, &target, 1).unwrap(),
    );
    for i in 0..target.len() {
        assert_eq!(a.logits(0, i, Lambda::ONES), b.logits(0, i, Lambda::ONES));
    }
}

#[test]
fn damaged_checkpoints_fail_to_load() {
    let cfg = small();
    let (source, _) = domains(&cfg, 5);
    let ckpt = train(&TrainConfig { epochs: 1, ..cfg }, &source).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = saved(&ckpt, dir.path(), "m.json");
    let text = std::fs::read_to_string(&path).unwrap();

    let truncated = dir.path().join("truncated.json");
    std::fs::write(&truncated, &text[..text.len() / 3]).unwrap();
    assert!(load_checkpoint(&truncated).is_err());

    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["schema"] = 2.into();
    let err = Checkpoint::from_json(&doc.to_string()).unwrap_err();
    assert!(err.to_string().contains("schema"), "{err}");

    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["tensors"]["classifier.0.weight"]["data"][0] = serde_json::Value::Null;
    assert!(Checkpoint::from_json(&doc.to_string()).is_err());

    assert!(load_checkpoint(dir.path().join("missing.json")).is_err());
}
