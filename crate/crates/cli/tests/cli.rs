use std::path::Path;
use std::process::Command;

fn autolr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_autolr"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let text = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json"),
    )
    .unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["run"]["epochs"] = 4.into();
    v["run"]["pretrain_epochs"] = 3.into();
    let path = dir.join("small.json");
    std::fs::write(&path, v.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn finetune_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = autolr(&[
        "finetune",
        "--config",
        &cfg,
        "--out",
        out_s,
        "--seed",
        "7",
        "--deterministic",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "pretrained.alrs",
        "trace.csv",
        "summary.json",
        "variation.svg",
        "lr.svg",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 7);
    assert!(summary.get("wall_time_s").is_none());

    std::fs::remove_file(out.join("variation.svg")).unwrap();
    let o = autolr(&["report", "--out", out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("variation.svg").exists());
    assert!(out.join("report.json").exists());
}

#[test]
fn pretrain_and_prune_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("p");
    let out_s = out.to_str().unwrap();
    assert!(autolr(&["pretrain", "--config", &cfg, "--out", out_s])
        .status
        .success());
    assert!(out.join("pretrained.alrs").exists());
    assert!(autolr(&["prune", "--config", &cfg, "--out", out_s])
        .status
        .success());
    let csv = std::fs::read_to_string(out.join("prune.csv")).unwrap();
    assert!(csv.starts_with("depth,score,epochs,wall_time_s\n"));
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"network": 1}"#).unwrap();
    let o = autolr(&[
        "finetune",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let o = autolr(&[
        "report",
        "--out",
        dir.path().join("nothing").to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}
