use std::path::Path;
use std::process::{Command, Output};

fn trilevel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trilevel"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{
  "model": {{"image_size": 8, "patch_size": 4, "channels": 3, "depth": 2, "d_model": 8,
            "heads": 2, "mlp_ratio": 2, "num_classes": 10, "use_cls_token": true}},
  "sparsity": {{"r_e": 0.8, "r_t": 0.5, "r_a": 0.5, "prune_layers": [2], "update_period_epochs": 1}},
  "epochs": 2,
  "batch_size": 16,
  "dataset": {{"synthetic": {{"train": 60, "test": 20}}}},
  "out_dir": "{}"
}}"#,
        dir.join("run").display()
    );
    let p = dir.join("run.json");
    std::fs::write(&p, cfg).unwrap();
    p
}

#[test]
fn train_eval_macs_and_dump_stats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let o = trilevel(&["train", "--config", cfg, "--quiet"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in ["metrics.csv", "subset_log.txt", "examples_stats.csv", "checkpoint.bin", "cost_report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let ck = run.join("checkpoint.bin");
    let o = trilevel(&["eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", "synthetic"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("accuracy "));

    let o = trilevel(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--dataset",
        "synthetic:60/20",
        "--sparsity",
        run.join("config.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let val_acc: f64 = metrics.lines().last().unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(stdout(&o), format!("accuracy {val_acc:.4} on 20 test examples\n"));

    let o = trilevel(&["macs", "--config", cfg]);
    assert!(o.status.success());
    let out = stdout(&o);
    let json_start = out.find('{').unwrap();
    let v: serde_json::Value = serde_json::from_str(&out[json_start..]).unwrap();
    assert_eq!(v["per_layer"].as_array().unwrap().len(), 2);
    assert!(v["saving_vs_dense"].as_f64().unwrap() > 0.0);

    let o = trilevel(&["dump-stats", "--run", run.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("examples          60"));
}

#[test]
fn unknown_config_keys_fail_closed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"epochs": 1, "learning_rate": 0.1}"#).unwrap();
    let o = trilevel(&["macs", "--config", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let o = trilevel(&["eval", "--checkpoint", "/nonexistent/ck.bin", "--dataset", "synthetic"]);
    assert!(!o.status.success());
}
