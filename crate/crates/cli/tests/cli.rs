use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--model.width",
    "8",
    "--model.embed_layers",
    "2",
    "--model.heads",
    "2",
    "--model.predictor_layers",
    "1",
    "--model.decoder_layers",
    "2",
    "--train.batch_size",
    "1",
    "--train.batches_per_epoch",
    "2",
    "--train.validation_contexts",
    "2",
    "--train.shape",
    r#"{"n": 2, "n_h": 1, "s": 24, "h": 6}"#,
];

fn run(cfg_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latpfn"))
        .env("LATPFN_CONFIG_DIR", cfg_dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn unknown_override_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(
        dir.path(),
        &["synth", "--prior.no_such_key", "1", "-o", out.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("no_such_key"));
}

#[test]
fn overrides_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(
        dir.path(),
        &[
            "synth",
            "--contexts",
            "1",
            "--prior.kappa_rho",
            "53.6",
            "-o",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&out.join("resolved_config.json"))["prior"]["kappa_rho"], 53.6);
}

#[test]
fn explicit_seed_beats_config_file_and_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("latpfn.json"), r#"{"train": {"seed": 11}}"#).unwrap();
    let out = dir.path().join("o");
    let o = run(dir.path(), &["synth", "--contexts", "1", "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&out.join("resolved_config.json"))["train"]["seed"], 11);

    let o = run(
        dir.path(),
        &[
            "synth",
            "--contexts",
            "1",
            "--train.seed",
            "12",
            "--seed",
            "13",
            "-o",
            out.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&out.join("resolved_config.json"))["train"]["seed"], 13);
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = run(
            dir.path(),
            &["synth", "--seed", seed, "--contexts", "3", "-o", out.to_str().unwrap()],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("batches.bin")).unwrap()
    };
    assert_eq!(bytes("a", "4"), bytes("b", "4"));
    assert_ne!(bytes("a", "4"), bytes("c", "5"));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("nope.bin");
    let out = dir.path().join("o");
    let o = run(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "-o",
            out.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.bin"), "{}", stderr(&o));
}

#[test]
fn train_then_evaluate_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let mut args = vec!["train", "--epochs", "1", "--seed", "3", "-o", run_dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = run(dir.path(), &args);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = run_dir.join("checkpoint.bin");
    assert!(ckpt.exists());

    let resumed = dir.path().join("resumed");
    let o = run(
        dir.path(),
        &[
            "train",
            "--epochs",
            "2",
            "--resume",
            ckpt.to_str().unwrap(),
            "-o",
            resumed.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(resumed.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let data = dir.path().join("data");
    let mut args = vec!["synth", "--seed", "9", "--contexts", "2", "-o", data.to_str().unwrap()];
    args.extend_from_slice(TINY);
    assert!(run(dir.path(), &args).status.success());

    let ev = dir.path().join("eval");
    let o = run(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            resumed.join("checkpoint.bin").to_str().unwrap(),
            "--input",
            data.join("batches.bin").to_str().unwrap(),
            "-o",
            ev.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let m = json(&ev.join("metrics.json"));
    assert_eq!(m["contexts"], 2);
    assert!(m["model"]["mse"]["mean"].as_f64().unwrap().is_finite());
    assert!(m["baselines"]["seasonal"].as_f64().is_some());

    let fc = dir.path().join("fc");
    let o = run(
        dir.path(),
        &[
            "forecast",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            data.join("batches.bin").to_str().unwrap(),
            "-o",
            fc.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(fc.join("forecast.csv")).unwrap();
    // 2 contexts x 1 held-out series x 6 steps
    assert_eq!(csv.lines().count(), 1 + 12);
}
