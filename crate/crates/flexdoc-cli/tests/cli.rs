//! End-to-end checks of the command-line surface.

use std::path::Path;
use std::process::{Command, Output};

fn flexdoc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexdoc"))
        .args(args)
        .env("FLEXDOC_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
seed = 21

[generator]
num_train = 60
num_val = 16
num_test = 16

[model]
d_model = 32
num_layers = 2
num_heads = 4
ffn_dim = 64

[train]
epochs = 2
batch_size = 16
lr = 0.001
val_interval = 2
"#,
    )
    .unwrap();
    path
}

#[test]
fn generate_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    for sub in ["a", "b"] {
        let out = flexdoc(&[
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.path().join(sub).to_str().unwrap(),
            "--seed",
            "7",
            "generate",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["schema.json", "train.jsonl", "val.jsonl", "test.jsonl", "gallery.jsonl"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identically seeded runs");
    }
}

#[test]
fn exp_ft_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let data = dir.path().join("data");
    let out = flexdoc(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "generate",
    ]);
    assert!(out.status.success());
    let out = flexdoc(&[
        "--config",
        config.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "--regime",
        "exp-ft",
        "train",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("init-checkpoint"), "{stderr}");
    assert!(stderr.contains("error"), "machine-readable error line: {stderr}");
}

#[test]
fn unknown_config_keys_are_hard_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = flexdoc(&["--config", config.to_str().unwrap(), "generate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rate"), "{stderr}");
}

#[test]
fn quickstart_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let cfg = config.to_str().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();

    let out = flexdoc(&["--config", cfg, "--out", data_s, "generate"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let imp = dir.path().join("imp");
    let out = flexdoc(&[
        "--config", cfg,
        "--data-dir", data_s,
        "--out", imp.to_str().unwrap(),
        "pretrain",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(imp.join("model.ckpt").exists());
    assert!(imp.join("effective_config.json").exists());
    assert!(imp.join("train_log.jsonl").exists());

    let ft = dir.path().join("ft");
    let out = flexdoc(&[
        "--config", cfg,
        "--data-dir", data_s,
        "--out", ft.to_str().unwrap(),
        "--regime", "exp-ft",
        "--init-checkpoint", imp.join("model.ckpt").to_str().unwrap(),
        "train",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let eval_dir = dir.path().join("eval");
    let out = flexdoc(&[
        "--config", cfg,
        "--data-dir", data_s,
        "--out", eval_dir.to_str().unwrap(),
        "eval",
        "--checkpoint", ft.join("model.ckpt").to_str().unwrap(),
        "--baselines",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for column in ["ELEM", "POS", "ATTR", "IMG", "TXT", "mean"] {
        assert!(stdout.contains(column), "missing column {column}: {stdout}");
    }
    assert!(stdout.contains("most-frequent"));
    assert!(stdout.contains("bayes-oracle"));
    assert!(eval_dir.join("eval_report.json").exists());

    // predict a masked document and render it
    let first_line = std::fs::read_to_string(data.join("test.jsonl"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let doc_path = dir.path().join("doc.json");
    std::fs::write(&doc_path, first_line).unwrap();
    let completed = dir.path().join("completed.json");
    let out = flexdoc(&[
        "--config", cfg,
        "--data-dir", data_s,
        "predict",
        "--checkpoint", ft.join("model.ckpt").to_str().unwrap(),
        "--input", doc_path.to_str().unwrap(),
        "--task", "POS",
        "--gallery", data.join("gallery.jsonl").to_str().unwrap(),
        "--out-file", completed.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let svg = dir.path().join("doc.svg");
    let out = flexdoc(&[
        "--config", cfg,
        "--data-dir", data_s,
        "render",
        "--input", completed.to_str().unwrap(),
        "--out-file", svg.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let svg_text = std::fs::read_to_string(&svg).unwrap();
    assert!(svg_text.starts_with("<svg"));
    assert!(svg_text.contains("data-element"));
}
