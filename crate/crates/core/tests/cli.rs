use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--n-samples", "400",
    "--image-size", "8",
    "--k-per-label", "5",
    "--n-val", "60",
    "--n-test", "60",
    "--latent-dim", "3",
    "--vae-hidden", "16",
    "--vae-epochs", "2",
    "--ssl-epochs", "2",
    "--head-hidden", "8,8",
    "--lr", "1e-3",
    "--probe-train", "15",
    "--probe-val", "15",
    "--probe-test", "15",
    "--probe-epochs", "20",
    "--sensitivity-samples", "20",
    "--au-threshold", "0",
    "--run-id", "t",
];

fn run(root: &Path, verb: &str, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latent-ssl"))
        .env("LATENT_SSL_OUT", root)
        .arg(verb)
        .args(SMALL)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, verb: &str, extra: &[&str]) -> String {
    let out = run(root, verb, extra);
    assert!(
        out.status.success(),
        "{verb} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(root: &Path) {
    for verb in ["gen-data", "train-vae", "train-ssl", "eval"] {
        ok(root, verb, &[]);
    }
}

#[test]
fn pipeline_smoke_emits_auroc_report() {
    let dir = tempfile::tempdir().unwrap();
    for verb in ["gen-data", "train-vae", "train-ssl"] {
        ok(dir.path(), verb, &[]);
    }
    let report: serde_json::Value = serde_json::from_str(&ok(dir.path(), "eval", &[])).unwrap();
    assert_eq!(report["per_label"].as_array().unwrap().len(), 4);
    for k in ["mean", "n_pos", "n_neg"] {
        assert!(report.get(k).is_some(), "{k}");
    }
    let run = dir.path().join("t");
    let config = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("seed = 42\n") && config.contains("n_samples = 400\n"));
    let log = std::fs::read_to_string(run.join("ssl_latent_ensemble_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["epoch", "loss", "supervised", "consistency", "zeta", "val_mean_auroc"] {
        assert!(first.get(k).is_some(), "{k}");
    }
}

#[test]
fn analyses_write_reports_and_grids() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let run = dir.path().join("t");

    ok(dir.path(), "traverse", &["--traverse-dim", "1"]);
    let pgm = std::fs::read(run.join("traverse_dim1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n56 8\n255\n"));

    ok(dir.path(), "transfer", &["--transfer-dims", "0,2"]);
    assert!(std::fs::read(run.join("transfer.pgm")).unwrap().starts_with(b"P5\n32 8\n255\n"));

    let probe: serde_json::Value = serde_json::from_str(&ok(dir.path(), "probe", &[])).unwrap();
    assert_eq!(probe["dims"].as_array().unwrap().len(), 3);

    let sens: serde_json::Value = serde_json::from_str(&ok(dir.path(), "sensitivity", &[])).unwrap();
    assert!(sens["before"].as_f64().unwrap() >= 0.0 && sens["after"].as_f64().unwrap() >= 0.0);

    let au: serde_json::Value = serde_json::from_str(&ok(dir.path(), "active-units", &[])).unwrap();
    assert_eq!(au["variance"].as_array().unwrap().len(), 3);

    let prune: serde_json::Value = serde_json::from_str(&ok(dir.path(), "prune-rerun", &[])).unwrap();
    for k in ["pre_mean_auroc", "post_mean_auroc", "pruned_dims", "kept_dims", "delta"] {
        assert!(prune.get(k).is_some(), "{k}");
    }
}

#[test]
fn missing_checkpoint_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "eval", &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));

    ok(dir.path(), "gen-data", &[]);
    let out = run(dir.path(), "train-ssl", &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing checkpoint"));
}

#[test]
fn invalid_values_are_rejected_with_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "gen-data", &["--alpha", "1.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha must be in [0,1)"));
    let out = run(dir.path(), "gen-data", &["--mode", "mean_teacher"]);
    assert!(!out.status.success());
}

#[test]
fn identical_config_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "config.txt",
        "data.lten",
        "vae.lten",
        "vae_log.jsonl",
        "ssl_latent_ensemble.lten",
        "ssl_latent_ensemble_log.jsonl",
        "eval_latent_ensemble.json",
    ] {
        let x = std::fs::read(a.path().join("t").join(f)).unwrap();
        let y = std::fs::read(b.path().join("t").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn seed_replicas_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), "gen-data", &["--seeds", "1,2"]);
    for s in ["seed-1", "seed-2"] {
        let cfg = std::fs::read_to_string(dir.path().join("t").join(s).join("config.txt")).unwrap();
        assert!(cfg.contains(&format!("seed = {}\n", &s[5..])));
    }
    let a = std::fs::read(dir.path().join("t/seed-1/data.lten")).unwrap();
    let b = std::fs::read(dir.path().join("t/seed-2/data.lten")).unwrap();
    assert_ne!(a, b);
}
