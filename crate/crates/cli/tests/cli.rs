use std::path::Path;
use std::process::{Command, Output};

fn capsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn params_reports_full_width_totals() {
    let out = stdout(&capsnet(&["params", "--dataset", "cifar10", "--model", "capsnet", "--profile", "full"]));
    assert!(out.contains("11749120"), "{out}");
    let out = stdout(&capsnet(&["params", "--dataset", "fmnist", "--model", "cfc", "--profile", "full", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["total"], 5_741_793);
    assert_eq!(v["primary_caps"], 36);
}

#[test]
fn params_respects_nk_and_cfc_shape() {
    let out = stdout(&capsnet(&[
        "params", "--dataset", "cifar10", "--model", "capsnet", "--profile", "full", "--nk", "32", "--json",
    ]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["total"], 4_810_272);
    let out = stdout(&capsnet(&["params", "--model", "cfc", "--k", "3", "--d", "16", "--json"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["primary_caps"], 16);
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.csv");
    stdout(&capsnet(&[
        "sweep", "--kind", "kd-grid", "--dataset", "cifar10", "--profile", "full", "--out", path.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.starts_with("nk,k,d,primary_caps,params"));
}

fn train_run(out: &Path) {
    stdout(&capsnet(&[
        "train",
        "--synthetic",
        "48",
        "--nk",
        "16",
        "--epochs",
        "1",
        "--hard-epochs",
        "1",
        "--batch-size",
        "16",
        "--dropout",
        "0.1",
        "--seed",
        "3",
        "--deterministic",
        "--out",
        out.to_str().unwrap(),
    ]));
}

#[test]
fn deterministic_training_is_byte_identical_and_evaluable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_run(a.path());
    train_run(b.path());
    let csv = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(csv(a.path()), csv(b.path()));
    for f in ["last.ckpt", "best.ckpt", "metrics.json", "timings.csv", "config.json"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
    let ck = a.path().join("last.ckpt");
    let recon = a.path().join("recon.pgm");
    let out = stdout(&capsnet(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--synthetic",
        "48",
        "--recon",
        recon.to_str().unwrap(),
    ]));
    assert!(out.starts_with("accuracy "), "{out}");
    assert!(std::fs::read(recon).unwrap().starts_with(b"P5\n"));
}

#[test]
fn routing_bench_lists_every_width() {
    let out = stdout(&capsnet(&[
        "bench", "--routing", "--dataset", "cifar10", "--model", "capsnet", "--profile", "full", "--epochs", "1",
        "--batch-size", "2",
    ]));
    for n in [256, 512, 1024, 1536, 2048] {
        assert!(out.contains(&format!("{n} primary capsules")), "{out}");
    }
}

#[test]
fn bad_inputs_fail_cleanly() {
    let o = capsnet(&["params", "--dataset", "cifar10", "--expanded"]);
    assert!(!o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let o = capsnet(&["train", "--data-dir", dir.path().to_str().unwrap(), "--epochs", "1", "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("mnist"));
    let o = capsnet(&["params", "--model", "cfc", "--k", "9"]);
    assert!(!o.status.success());
}
