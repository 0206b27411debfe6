use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
    "data": {"demos": 30},
    "arch": {"mix_width": 16, "dec_width": 8},
    "train": {"epochs": 2, "batch_size": 64}
}"#;

fn qplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qplan"))
        .current_dir(dir)
        .env_remove("QPLAN_OUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(
        &std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())),
    )
    .unwrap()
}

/// A tiny trained checkpoint shared by the tests that only need some model.
fn tiny() -> &'static (TempDir, PathBuf) {
    static CK: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    CK.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        let o = qplan(
            dir.path(),
            &["--config", "tiny.json", "train", "--output", "ck.json"],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let path = dir.path().join("ck.json");
        (dir, path)
    })
}

fn ck() -> &'static str {
    tiny().1.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&qplan(dir.path(), &["--help"])), 0);
    assert_eq!(code(&qplan(dir.path(), &["--version"])), 0);
    assert_eq!(code(&qplan(dir.path(), &["eval", "--help"])), 0);
}

#[test]
fn bad_arguments_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&qplan(dir.path(), &[])), 1);
    assert_eq!(code(&qplan(dir.path(), &["train", "--no-such-flag"])), 1);
    assert_eq!(
        code(&qplan(
            dir.path(),
            &["sweep", "--axis", "colour", "--values", "1"]
        )),
        1
    );
    let o = qplan(dir.path(), &["eval", "--checkpoint", ck(), "--seeds", "0"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn unknown_config_key_exits_one_and_names_it() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    let o = qplan(dir.path(), &["--config", "bad.json", "train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.epoch"), "{}", stderr(&o));
}

#[test]
fn invalid_training_values_exit_one() {
    let dir = TempDir::new().unwrap();
    let o = qplan(dir.path(), &["train", "--mix-ratio", "1.5"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_exits_two() {
    let dir = TempDir::new().unwrap();
    let o = qplan(
        dir.path(),
        &["eval", "--checkpoint", "nope.json", "--seeds", "1"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("nope.json"));
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("junk.json"), "{\"format\": 3}").unwrap();
    let o = qplan(dir.path(), &["freq", "--checkpoint", "junk.json"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoint_and_loss_curve() {
    let dir = tiny().0.path();
    let ck = read_json(&dir.join("ck.json"));
    assert_eq!(ck["format"], "qplan-checkpoint");
    assert_eq!(ck["state"]["epochs_done"], 2);
    assert_eq!(ck["arch"]["mix_width"], 16);
    let csv = std::fs::read_to_string(dir.join("ck.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn stopped_and_resumed_training_matches_an_uninterrupted_run() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = qplan(
        dir.path(),
        &[
            "--config",
            "tiny.json",
            "train",
            "--stop-after",
            "1",
            "--output",
            "half.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        read_json(&dir.path().join("half.json"))["state"]["epochs_done"],
        1
    );

    let o = qplan(
        dir.path(),
        &[
            "--config",
            "tiny.json",
            "train",
            "--resume",
            "half.json",
            "--output",
            "full.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resumed = read_json(&dir.path().join("full.json"));
    let straight = read_json(&tiny().1);
    assert_eq!(resumed["state"]["epochs_done"], 2);
    assert_eq!(resumed["config_hash"], straight["config_hash"]);
    assert_eq!(resumed["params"], straight["params"]);
}

#[test]
fn saved_dataset_trains_the_same_model() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let o = qplan(
        dir.path(),
        &[
            "--config",
            "tiny.json",
            "train",
            "--save-dataset",
            "data/demos.json",
            "--stop-after",
            "1",
            "--output",
            "a.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = qplan(
        dir.path(),
        &[
            "--config",
            "tiny.json",
            "train",
            "--dataset",
            "data/demos.json",
            "--stop-after",
            "1",
            "--output",
            "b.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (a, b) = (
        read_json(&dir.path().join("a.json")),
        read_json(&dir.path().join("b.json")),
    );
    assert_eq!(a["dataset_hash"], b["dataset_hash"]);
    assert_eq!(a["params"], b["params"]);
}

#[test]
fn eval_writes_reports_for_both_engines() {
    let dir = TempDir::new().unwrap();
    let o = qplan(
        dir.path(),
        &[
            "--out-dir",
            "out",
            "eval",
            "--checkpoint",
            ck(),
            "--scenario",
            "dynamic",
            "--seeds",
            "3",
            "--save-logs",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("out");
    for engine in ["queue", "baseline"] {
        let r = read_json(&out.join(format!("dynamic_{engine}.json")));
        assert_eq!(r["episodes"], 3);
        assert_eq!(r["campaign"]["engine"], engine);
        let csv = std::fs::read_to_string(out.join(format!("dynamic_{engine}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(out
            .join("logs")
            .join(format!("dynamic_{engine}_0.jsonl"))
            .exists());
    }
    let paired = read_json(&out.join("dynamic_paired.json"));
    assert!(paired["p_value"].as_f64().unwrap() <= 1.0);
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"engine": {"guidance": {"eta": 2.0, "lambda": 7.0}}}"#,
    )
    .unwrap();
    let o = qplan(
        dir.path(),
        &[
            "--config",
            "cfg.json",
            "eval",
            "--checkpoint",
            ck(),
            "--seeds",
            "1",
            "--engine",
            "queue",
            "--eta",
            "4",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&dir.path().join("qplan-out/static_queue.json"));
    assert_eq!(r["campaign"]["config"]["guidance"]["eta"], 4.0);
    assert_eq!(r["campaign"]["config"]["guidance"]["lambda"], 7.0);
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_qplan"))
        .current_dir(dir.path())
        .env("QPLAN_OUT_DIR", "from-env")
        .args([
            "eval",
            "--checkpoint",
            ck(),
            "--seeds",
            "1",
            "--engine",
            "queue",
            "--scenario",
            "reach",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("from-env/reach_queue.json").exists());
}

#[test]
fn eval_check_needs_both_engines() {
    let dir = TempDir::new().unwrap();
    let o = qplan(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            ck(),
            "--seeds",
            "1",
            "--engine",
            "queue",
            "--check",
        ],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = TempDir::new().unwrap();
    let o = qplan(
        dir.path(),
        &[
            "sweep",
            "--checkpoint",
            ck(),
            "--axis",
            "eta",
            "--values",
            "0,3",
            "--seeds",
            "2",
            "--scenario",
            "scripted",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("qplan-out/sweep_eta.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("eta,episodes,success_rate"));
    assert!(rows[2].starts_with("3,2,"));
    let reports = read_json(&dir.path().join("qplan-out/sweep_eta.json"));
    assert_eq!(reports.as_array().unwrap().len(), 2);
}

#[test]
fn speed_sweep_retimes_the_obstacle() {
    let dir = TempDir::new().unwrap();
    let o = qplan(
        dir.path(),
        &[
            "sweep",
            "--checkpoint",
            ck(),
            "--axis",
            "obstacle_speed",
            "--values",
            "0,1",
            "--seeds",
            "1",
            "--scenario",
            "pursuit",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reports = read_json(&dir.path().join("qplan-out/sweep_obstacle_speed.json"));
    let speed = |i: usize| {
        reports[i]["campaign"]["scenario"]["obstacles"][0]["motion"]["speed"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(speed(0), 0.0);
    assert!((speed(1) - 0.08).abs() < 1e-12);
}

#[test]
fn mix_ratio_sweep_needs_one_checkpoint_per_value() {
    let dir = TempDir::new().unwrap();
    let o = qplan(
        dir.path(),
        &[
            "sweep",
            "--axis",
            "mix_ratio",
            "--values",
            "0,0.6",
            "--checkpoints",
            ck(),
            "--seeds",
            "1",
        ],
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = qplan(
        dir.path(),
        &[
            "sweep",
            "--axis",
            "mix_ratio",
            "--values",
            "0.6,0.6",
            "--checkpoints",
            &format!("{},{}", ck(), ck()),
            "--seeds",
            "1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn freq_reports_both_engines() {
    let dir = TempDir::new().unwrap();
    let o = qplan(dir.path(), &["freq", "--checkpoint", ck(), "--ticks", "40"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&dir.path().join("qplan-out/freq.json"));
    assert_eq!(r["frequency"]["queue"]["ticks"], 40);
    assert_eq!(r["frequency"]["baseline"]["engine"], "baseline");
    assert!(r["frequency"]["measured_ratio"].as_f64().unwrap() > 1.0);
}

#[test]
fn freq_with_too_few_ticks_exits_one() {
    let dir = TempDir::new().unwrap();
    let o = qplan(dir.path(), &["freq", "--checkpoint", ck(), "--ticks", "5"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn failed_check_exits_three() {
    let dir = TempDir::new().unwrap();
    let o = qplan(
        dir.path(),
        &[
            "freq",
            "--checkpoint",
            ck(),
            "--ticks",
            "20",
            "--check",
            "1000",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}
