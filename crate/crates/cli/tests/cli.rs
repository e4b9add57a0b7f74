use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
schema_version = 1
master_seed = 9
output_dir = "run"

[world]
pretrain = 16
adapt = 5
eval_per_domain = 4

[denoiser.training]
epochs = 2
baseline_samples = 4

[transfer]
steps = 3

[trainer]
seeds = [0, 1, 2]

[trainer.training]
epochs = 1
"#;

fn zsda(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsda"))
        .args(args)
        .env("ZSDA_OUTPUT_ROOT", root)
        .current_dir(root)
        .output()
        .unwrap()
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = zsda(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    dir
}

fn one_line_error(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

#[test]
fn missing_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let err = one_line_error(&zsda(dir.path(), &["pretrain", "--config", "nope.toml"]));
    assert!(err.contains("nope.toml"), "{err}");
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), format!("{CONFIG}\n[extra]\nx = 1\n")).unwrap();
    one_line_error(&zsda(dir.path(), &["pretrain", "--config", "cfg.toml"]));
}

#[test]
fn transfer_before_pretrain_is_an_error() {
    let dir = setup();
    let err = one_line_error(&zsda(dir.path(), &["transfer", "--config", "cfg.toml", "--domain", "fog"]));
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn train_without_dataset_is_an_error() {
    let dir = setup();
    ok(dir.path(), &["pretrain", "--config", "cfg.toml"]);
    let err = one_line_error(&zsda(dir.path(), &["train", "--config", "cfg.toml", "--mode", "zodi", "--domain", "rain"]));
    assert!(err.contains("manifest"), "{err}");
}

#[test]
fn end_to_end_commands() {
    let dir = setup();
    let root = dir.path();
    let run = root.join("run");
    ok(root, &["pretrain", "--config", "cfg.toml"]);
    let first = fs::read(run.join("denoiser/checkpoint.json")).unwrap();
    ok(root, &["pretrain", "--config", "cfg.toml"]);
    assert_eq!(first, fs::read(run.join("denoiser/checkpoint.json")).unwrap());

    let csv = fs::read_to_string(run.join("denoiser/loss_curve.csv")).unwrap();
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(losses.last().unwrap() < losses.first().unwrap());

    // Zero strength copies originals byte for byte.
    ok(root, &["transfer", "--config", "cfg.toml", "--domain", "night", "--strength", "0"]);
    let ds = run.join("transfer/night_zodi");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(ds.join("manifest.json")).unwrap()).unwrap();
    let items = manifest["items"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    assert_eq!(manifest["count"], 5);
    for item in items {
        let src = fs::read(ds.join(item["source"].as_str().unwrap())).unwrap();
        let gen = fs::read(ds.join(item["generated"].as_str().unwrap())).unwrap();
        assert_eq!(src, gen);
    }
    assert!(ds.join("contact_sheet.png").exists());

    let out = ok(root, &["transfer", "--config", "cfg.toml", "--domain", "night", "--variant", "sdedit"]);
    assert!(out.contains("sdedit"));
    ok(root, &["transfer", "--config", "cfg.toml", "--domain", "night"]);

    ok(root, &["train", "--config", "cfg.toml", "--mode", "source_only", "--domain", "night"]);
    ok(root, &["train", "--config", "cfg.toml", "--mode", "zodi", "--domain", "night"]);
    ok(root, &["train", "--config", "cfg.toml", "--mode", "zodi_no_sim", "--domain", "night"]);

    let read = |label: &str| -> serde_json::Value {
        serde_json::from_slice(&fs::read(run.join("train").join(label).join("metrics.json")).unwrap()).unwrap()
    };
    let no_sim = read("zodi_no_sim");
    assert_eq!(no_sim["lambda"], 0.0);
    assert_eq!(read("zodi")["lambda"], 0.1);
    let night = &read("source_only")["domains"]["night"];
    assert_eq!(night["per_seed"].as_array().unwrap().len(), 3);
    assert_eq!(no_sim["schema"], "zsda-metrics");

    let ckpt = run.join("train/zodi/night_seed0.json");
    let out = ok(root, &["evaluate", "--config", "cfg.toml", "--checkpoint", ckpt.to_str().unwrap(), "--domain", "night"]);
    assert!(out.starts_with("night"));

    // Single run gives a single method column.
    let single = ok(root, &["report", "run/train/zodi"]);
    let header = single.lines().find(|l| l.starts_with('|')).unwrap();
    assert_eq!(header.matches('|').count(), 3, "{single}");

    let args = ["report", "run/train/source_only", "run/train/zodi", "run/train/zodi_no_sim", "--out", "table.md"];
    let a = ok(root, &args);
    let b = ok(root, &args);
    assert_eq!(a, b);
    assert_eq!(fs::read_to_string(root.join("table.md")).unwrap().trim_end(), a.trim_end());
    assert!(a.contains("(+") || a.contains("(-"), "{a}");

    // Tampering with a transfer is detected on the next training run.
    let gen = items[0]["generated"].as_str().unwrap();
    let path = ds.join(gen);
    fs::copy(root.join("table.md"), &path).unwrap();
    one_line_error(&zsda(root, &["train", "--config", "cfg.toml", "--mode", "zodi", "--domain", "night"]));
}

#[test]
fn report_rejects_inconsistent_domains() {
    let dir = setup();
    let root = dir.path();
    ok(root, &["pretrain", "--config", "cfg.toml"]);
    ok(root, &["train", "--config", "cfg.toml", "--mode", "source_only", "--domain", "night", "--label", "a"]);
    ok(root, &["train", "--config", "cfg.toml", "--mode", "source_only", "--domain", "fog", "--label", "b"]);
    one_line_error(&zsda(root, &["report", "run/train/a", "run/train/b"]));
}

#[test]
fn usage_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!zsda(dir.path(), &["transfer", "--config", "x.toml", "--domain", "mars"]).status.success());
    assert!(!zsda(dir.path(), &[]).status.success());
}
