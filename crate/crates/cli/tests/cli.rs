use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssr::report::mnist::{encode_images, encode_labels};

fn ssr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssr")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Writes a tiny MNIST-shaped set where class `k` lights up a 4×4 patch in
/// row band `k`.
fn synthetic_mnist(dir: &Path, n: usize) {
    let mut pixels = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % 10;
        labels.push(k as u8);
        let r0 = 2 + 2 * k;
        let c0 = 4 + (i * 7) % 16;
        for r in r0..r0 + 4 {
            for c in c0..c0 + 4 {
                pixels[i * 784 + r * 28 + c] = 255;
            }
        }
    }
    let images = encode_images(28, 28, &pixels);
    let labels = encode_labels(&labels);
    for (name, bytes) in [
        ("train-images-idx3-ubyte", &images),
        ("train-labels-idx1-ubyte", &labels),
        ("t10k-images-idx3-ubyte", &images),
        ("t10k-labels-idx1-ubyte", &labels),
    ] {
        std::fs::write(dir.join(name), bytes).unwrap();
    }
}

fn config(dir: &Path) -> PathBuf {
    let data = dir.join("mnist");
    std::fs::create_dir_all(&data).unwrap();
    synthetic_mnist(&data, 200);
    let text = format!(
        r#"regularizer = "l20"
lambdas = [0.3, 0.3, 0.4]
train_epochs = 1
finetune_epochs = 1

[aulm]
max_outer_iters = 2
kstep_max_batches = 1

[bench]
repetitions = 3
warmup = 1

[data]
train_images = "{d}/train-images-idx3-ubyte"
train_labels = "{d}/train-labels-idx1-ubyte"
test_images = "{d}/t10k-images-idx3-ubyte"
test_labels = "{d}/t10k-labels-idx1-ubyte"
"#,
        d = data.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = ssr(&["eval", "--bogus"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_cleanly() {
    let out = ssr(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["train", "solve", "prune", "finetune", "eval", "bench", "sensitivity", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let out = ssr(&["eval", "--checkpoint", "/nonexistent.ckpt", "--out", &out_dir]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOTACKPT....").unwrap();
    let out_dir = dir.path().display().to_string();
    let out = ssr(&["eval", "--checkpoint", bad.to_str().unwrap(), "--out", &out_dir]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn config_typo_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "lamdbas = [0.5, 0.5, 0.5]\n").unwrap();
    let out_dir = dir.path().display().to_string();
    let out = ssr(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", "x", "--out", &out_dir]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamdbas"));
}

#[test]
fn full_pipeline_produces_a_report_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let p = |name: &str| out.join(name).display().to_string();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg, "--out", o, "--seed", "5"];
        all.extend_from_slice(args);
        let res = ssr(&all);
        assert_eq!(code(&res), 0, "{args:?}: {}", String::from_utf8_lossy(&res.stderr));
        String::from_utf8_lossy(&res.stdout).into_owned()
    };

    run(&["train"]);
    assert!(out.join("baseline.manifest.json").exists());
    run(&["solve", "--checkpoint", &p("baseline.ckpt")]);
    assert!(out.join("trace.csv").exists());
    run(&["prune", "--checkpoint", &p("solved.ckpt"), "--masks", &p("masks.json")]);
    run(&["finetune", "--checkpoint", &p("pruned.ckpt")]);
    let eval = run(&["eval", "--checkpoint", &p("finetuned.ckpt")]);
    assert!(eval.contains("top-1 error"));
    let report = run(&["report", "--baseline", &p("baseline.ckpt"), "--pruned", &p("finetuned.ckpt")]);
    assert!(report.contains("#Filter/Node"), "{report}");
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("finetuned.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["checkpoint_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn baseline_criteria_and_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let ckpt = out.join("baseline.ckpt").display().to_string();
    let run = |args: &[&str]| {
        let mut all = vec!["--config", cfg, "--out", o];
        all.extend_from_slice(args);
        ssr(&all)
    };
    assert_eq!(code(&run(&["train"])), 0);

    let res = run(&["prune", "--checkpoint", &ckpt, "--criterion", "filter-l1", "--keep", "4,6,20"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("4-6-20"));
    let res = run(&["prune", "--checkpoint", &ckpt, "--criterion", "apoz", "--keep", "4,6"]);
    assert_eq!(code(&res), 1);

    let res = run(&["sensitivity", "--checkpoint", &ckpt, "--layer", "conv1"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let curve = std::fs::read_to_string(out.join("sensitivity_conv1.csv")).unwrap();
    assert_eq!(curve.lines().count(), 9);

    let res = run(&["bench", "--checkpoint", &ckpt, "--baseline", &ckpt]);
    assert_eq!(code(&res), 0);
    assert!(String::from_utf8_lossy(&res.stdout).contains("speedup"));
}
