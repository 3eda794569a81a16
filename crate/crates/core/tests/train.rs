use std::path::Path;

use trilevel_core::checkpoint;
use trilevel_core::data::synthetic;
use trilevel_core::train::{evaluate, evaluate_checkpoint, train, train_on, TrainOptions};
use trilevel_core::{CoreError, DatasetKind, RunConfig, SparsityConfig, ViT, ViTConfig};

fn tiny_run(out: &Path) -> RunConfig {
    RunConfig {
        model: ViTConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            depth: 3,
            d_model: 16,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 10,
            use_cls_token: true,
        },
        sparsity: SparsityConfig {
            prune_layers: vec![2, 3],
            ..SparsityConfig::default()
        },
        epochs: 3,
        batch_size: 32,
        base_lr: 2e-3,
        weight_decay: 0.05,
        lr_warmup_epochs: 1,
        seed: 3,
        dataset: DatasetKind::Synthetic { train: 240, test: 100 },
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn writes_all_outputs_and_learns() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig {
        epochs: 6,
        ..tiny_run(dir.path())
    };
    let s = train(&run, &TrainOptions::default()).unwrap();
    for f in ["metrics.csv", "subset_log.txt", "examples_stats.csv", "checkpoint.bin", "cost_report.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = String::from_utf8(read(&dir.path().join("metrics.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(s.metrics.iter().all(|m| m.active_size == 240));
    assert!(s.final_val_acc > 0.3, "{}", s.final_val_acc);
    let json: serde_json::Value =
        serde_json::from_slice(&read(&dir.path().join("cost_report.json"))).unwrap();
    assert!(json["analytic"]["total_per_image"].as_u64().unwrap() > 0);
}

#[test]
fn checkpoint_evaluation_is_deterministic_and_identity_overrides_match() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run(dir.path());
    train(&run, &TrainOptions::default()).unwrap();
    let ck = dir.path().join("checkpoint.bin");
    let a = evaluate_checkpoint(&ck, &run.dataset, &run.data_dir, None, 50, Some(1)).unwrap();
    let b = evaluate_checkpoint(&ck, &run.dataset, &run.data_dir, None, 50, Some(1)).unwrap();
    assert_eq!(a, b);
    let identity = SparsityConfig {
        prune_layers: vec![2, 3],
        ..SparsityConfig::default()
    };
    let c = evaluate_checkpoint(&ck, &run.dataset, &run.data_dir, Some(&identity), 50, Some(1)).unwrap();
    assert_eq!(a, c);
    assert_eq!(a.examples, 100);

    let model = checkpoint::load::<f32>(&ck).unwrap();
    let (tr, _) = synthetic(240, 100, 10, 3, 16, trilevel_core::data::SYNTHETIC_SEED).unwrap();
    assert!(evaluate(&model, &tr, None, 0, 64).unwrap() > 0.1);

    let other = ViTConfig {
        d_model: 8,
        ..run.model.clone()
    };
    assert!(matches!(
        checkpoint::load_for::<f32>(&ck, &other),
        Err(CoreError::Incompatible(_))
    ));
    let wrong_geometry = evaluate_checkpoint(
        &ck,
        &DatasetKind::Synthetic { train: 10, test: 10 },
        &run.data_dir,
        Some(&SparsityConfig {
            prune_layers: vec![9],
            ..SparsityConfig::default()
        }),
        50,
        Some(1),
    );
    assert!(matches!(wrong_geometry, Err(CoreError::Incompatible(_))));
}

#[test]
fn sparse_epochs_cost_less_after_warm_up() {
    let run = RunConfig {
        sparsity: SparsityConfig {
            rt_warmup_epochs: 1,
            ..SparsityConfig::tri_level(0.9, vec![2, 3])
        },
        ..tiny_run(Path::new("unused"))
    };
    let opts = TrainOptions {
        no_outputs: true,
        ..TrainOptions::default()
    };
    let dense_run = RunConfig {
        sparsity: SparsityConfig::default(),
        ..run.clone()
    };
    let dense = train(&dense_run, &opts).unwrap();
    let sparse = train(&run, &opts).unwrap();
    for (d, s) in dense.metrics.iter().zip(&sparse.metrics).skip(1) {
        assert!(s.epoch_macs < d.epoch_macs, "epoch {}", s.epoch);
    }
    assert!(sparse.training_macs < dense.training_macs);
}

#[test]
fn forgetting_removal_runs_on_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let run = RunConfig {
        epochs: 4,
        sparsity: SparsityConfig {
            r_e: 0.8,
            update_period_epochs: 1,
            ..SparsityConfig::default()
        },
        ..tiny_run(dir.path())
    };
    let s = train(&run, &TrainOptions::default()).unwrap();
    assert!(s.metrics.iter().all(|m| m.active_size == 192));
    let log = std::fs::read_to_string(dir.path().join("subset_log.txt")).unwrap();
    let updates: Vec<&str> = log.lines().filter(|l| l.starts_with("epoch=")).collect();
    assert_eq!(updates.len(), 4);
    assert!(updates[0].starts_with("epoch=1 iteration=1 removed=12 restored=12"));
}

#[test]
fn exploding_learning_rate_is_a_divergence_error() {
    let mut run = tiny_run(Path::new("unused"));
    run.base_lr = 1e36;
    run.lr_warmup_epochs = 0;
    run.epochs = 2;
    let opts = TrainOptions {
        no_outputs: true,
        ..TrainOptions::default()
    };
    match train(&run, &opts) {
        Err(CoreError::Divergence { step, .. }) => assert!(step >= 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn geometry_mismatch_is_rejected() {
    let run = tiny_run(Path::new("unused"));
    let (tr, te) = synthetic(10, 10, 10, 1, 16, 1).unwrap();
    assert!(matches!(
        train_on(&run, &TrainOptions::default(), &tr, &te),
        Err(CoreError::Config(_))
    ));
}

#[test]
fn f64_runs_train_too() {
    let run = RunConfig {
        precision: trilevel_core::Precision::F64,
        epochs: 1,
        ..tiny_run(Path::new("unused"))
    };
    let opts = TrainOptions {
        no_outputs: true,
        ..TrainOptions::default()
    };
    let s = train(&run, &opts).unwrap();
    assert_eq!(s.metrics.len(), 1);
    let m = ViT::<f64>::new(&run.model, 0).unwrap();
    assert_eq!(checkpoint::encode(&m)[..8], *checkpoint::MAGIC);
}
