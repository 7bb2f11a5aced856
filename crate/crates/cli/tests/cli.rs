use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use owseg_cli::commands::parse_binary_dump;
use owseg_cli::config::ROOT_ENV;
use owseg_core::eval::EvalReport;

fn tiny_config(dir: &Path, output: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "output_dir": output,
        "dataset": { "kind": "synthetic", "train_scenes": 2, "val_scenes": 2,
                     "scene": { "points_per_scan": 768 } },
        "arch": { "encoder_width": 4, "hidden_width": 8 },
        "training": {
            "closed": { "epochs": 1, "learning_rate": 0.01 },
            "oseg": { "epochs": 1, "learning_rate": 0.003 },
            "il_epochs": 1
        }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    path
}

fn owseg(config: &Path, args: &[&str], root: Option<&Path>) -> (i32, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_owseg"));
    cmd.arg("--config")
        .arg(config)
        .args(args)
        .env_remove(ROOT_ENV);
    if let Some(r) = root {
        cmd.env(ROOT_ENV, r);
    }
    let out = cmd.output().unwrap();
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.code().unwrap(), text)
}

fn run_ok(config: &Path, args: &[&str]) -> String {
    let (code, text) = owseg(config, args, None);
    assert_eq!(code, 0, "owseg {args:?}: {text}");
    text
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(owseg(&missing, &["gen-data"], None).0, 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "no_such_field": true}"#).unwrap();
    assert_eq!(owseg(&bad, &["gen-data"], None).0, 2);

    let cfg = tiny_config(dir.path(), &dir.path().join("exp"));
    assert_eq!(owseg(&cfg, &["no-such-verb"], None).0, 2);
    assert_eq!(
        owseg(&cfg, &["train-closed"], None).0,
        2,
        "training before data exists"
    );
    run_ok(&cfg, &["gen-data"]);
    assert_eq!(
        owseg(&cfg, &["finetune-oseg"], None).0,
        2,
        "open-set stage before closed stage"
    );
    run_ok(&cfg, &["train-closed"]);
    assert_eq!(
        owseg(&cfg, &["il", "--class", "5"], None).0,
        2,
        "IL before open-set stage"
    );
    assert_eq!(
        owseg(
            &cfg,
            &["evaluate", "--stage", "closed", "--method", "real"],
            None
        )
        .0,
        2
    );
    assert_eq!(
        owseg(
            &cfg,
            &["evaluate", "--stage", "closed", "--prediction", "open"],
            None
        )
        .0,
        2
    );
    run_ok(&cfg, &["finetune-oseg"]);
    assert_eq!(
        owseg(&cfg, &["il", "--class", "2"], None).0,
        2,
        "old class is not novel"
    );
    run_ok(&cfg, &["il", "--class", "5"]);
    assert_eq!(
        owseg(&cfg, &["il", "--class", "5", "--source", "il-5"], None).0,
        2
    );
    assert_eq!(owseg(&cfg, &["evaluate", "--stage", "nowhere"], None).0, 2);
}

#[test]
fn root_override_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), &dir.path().join("configured"));
    let root = dir.path().join("override");
    for args in [
        &["gen-data"][..],
        &["train-closed"],
        &["finetune-oseg"],
        &[
            "evaluate", "--stage", "oseg", "--method", "real", "--bins", "7",
        ],
        &[
            "dump-scores",
            "--stage",
            "oseg",
            "--method",
            "msp",
            "--format",
            "binary",
        ],
        &["plot-data", "--stage", "oseg", "--bins", "7"],
    ] {
        let (code, text) = owseg(&cfg, args, Some(&root));
        assert_eq!(code, 0, "{args:?}: {text}");
    }
    assert!(!dir.path().join("configured").exists());

    let report: EvalReport =
        serde_json::from_slice(&fs::read(root.join("reports/oseg-real.json")).unwrap()).unwrap();
    assert!(report.auroc.is_some_and(|a| (0.0..=1.0).contains(&a)));
    let hist = fs::read_to_string(root.join("reports/oseg-real.histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 8);

    let dump = parse_binary_dump(&fs::read(root.join("scores/oseg-msp.bin")).unwrap()).unwrap();
    let val_points: usize = report
        .confusion
        .counts
        .iter()
        .flatten()
        .map(|&c| c as usize)
        .sum();
    assert_eq!(dump.len(), val_points);
    assert!(dump.iter().all(|r| (0.0..=1.0).contains(&r.score)));

    for m in ["real", "msp", "maxlogit", "mcdropout"] {
        assert!(root.join(format!("plots/oseg/{m}.csv")).exists(), "{m}");
    }
    assert!(root.join("plots/oseg/summary.json").exists());
}

#[test]
fn changed_config_reruns_stage() {
    let dir = tempfile::tempdir().unwrap();
    let exp = dir.path().join("exp");
    let cfg = tiny_config(dir.path(), &exp);
    run_ok(&cfg, &["gen-data"]);
    assert!(run_ok(&cfg, &["train-closed"]).contains("done"));
    assert!(run_ok(&cfg, &["train-closed"]).contains("up to date"));

    let mut value: serde_json::Value = serde_json::from_slice(&fs::read(&cfg).unwrap()).unwrap();
    value["training"]["closed"]["epochs"] = 2.into();
    fs::write(&cfg, serde_json::to_vec(&value).unwrap()).unwrap();
    assert!(run_ok(&cfg, &["train-closed"]).contains("done"));

    let ckpts: Vec<_> = fs::read_dir(exp.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 2);
}
