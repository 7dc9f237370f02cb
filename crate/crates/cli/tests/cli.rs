use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_protoeeg"));
    cmd.env_remove("PROTOEEG_THREADS");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const TINY_SCHEDULE: &str =
    r#"{"num_train_epochs": 4, "num_warm_epochs": 1, "num_secondary_warm_epochs": 1, "push_start": 1, "push_epochs": [3, 4]}"#;

/// A small dataset and two identical training runs, shared across tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    fn run_dir(&self, i: usize) -> PathBuf {
        self.root.join(format!("run{i}"))
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let out = run(&["synth", "--n", "200", "--seed", "11", "--out", p(&root.join("data"))]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let cfg = root.join("tiny.json");
        std::fs::write(&cfg, TINY_SCHEDULE).unwrap();
        for i in 1..=2 {
            let out = run(&[
                "train",
                "--config",
                p(&cfg),
                "--data",
                p(&root.join("data")),
                "--out",
                p(&root.join(format!("run{i}"))),
                "--seed",
                "5",
            ]);
            assert_eq!(code(&out), 0, "{}", stderr(&out));
        }
        Fixture { _dir: dir, root }
    })
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"));
    let out = run(&["train"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn synth_writes_dataset_and_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = run(&["synth", "--n", "50", "--seed", "7", "--out", p(d)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for f in ["dataset.peeg", "dataset.manifest.json", "config.json", "run.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = read_json(&a.join("dataset.manifest.json"));
    assert_eq!(manifest["sample_count"], 50);
    let record = read_json(&a.join("run.json"));
    assert_eq!(record["command"], "synth");
    assert_eq!(record["seed"], 7);
    assert_eq!(record["config"]["n_samples"], 50);
    assert!(record["outputs"]["dataset.peeg"].as_str().unwrap().len() == 64);
}

#[test]
fn empty_config_file_resolves_to_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.json");
    std::fs::write(&cfg, "{}").unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["train", "--config", p(&cfg), "--data", p(&dir.path().join("missing")), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let resolved = read_json(&out_dir.join("config.json"));
    assert_eq!(resolved["num_train_epochs"], 130);
    assert_eq!(resolved["push_epochs"], serde_json::json!([110, 120, 130]));
    assert_eq!(resolved["lr"]["joint_prototypes"], 0.05);
}

#[test]
fn epochs_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = run(&["train", "--epochs", "12", "--data", p(&dir.path().join("missing")), "--out", p(&out_dir)]);
    // the default push epochs lie beyond 12 epochs, so validation fails
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert_eq!(read_json(&out_dir.join("config.json"))["num_train_epochs"], 12);
}

#[test]
fn unknown_and_mistyped_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"foo": 3}"#).unwrap();
    let out = run(&["train", "--config", p(&cfg), "--data", "x", "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("foo"));

    let out = run(&["synth", "--set", "spike_rate=lots", "--out", p(&dir.path().join("o2"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("spike_rate"));

    let out = run(&["eval", "--set", "rounds", "--model", "m", "--data", "d", "--out", p(&dir.path().join("o3"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn bad_thread_setting_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .env("PROTOEEG_THREADS", "zero")
        .args(["synth", "--n", "5", "--out", p(dir.path())])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("PROTOEEG_THREADS"));
    let out = bin()
        .env("PROTOEEG_THREADS", "2")
        .args(["synth", "--n", "5", "--out", p(dir.path())])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn damaged_data_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["synth", "--n", "20", "--out", p(&data)])), 0);
    let file = data.join("dataset.peeg");
    let mut bytes = std::fs::read(&file).unwrap();
    let last = bytes.len() - 10;
    bytes[last] ^= 0xff;
    std::fs::write(&file, bytes).unwrap();
    let out = run(&["split", "--data", p(&data), "--out", p(&dir.path().join("s"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = run(&["split", "--data", p(&dir.path().join("nowhere")), "--out", p(&dir.path().join("s2"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nowhere"));
}

#[test]
fn split_and_preprocess_rewrite_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let out = run(&[
        "synth", "--n", "30", "--set", "sample_rate_hz=256", "--set", "time_steps=256", "--out", p(&raw),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let pre = dir.path().join("pre");
    let out = run(&["preprocess", "--data", p(&raw), "--out", p(&pre)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_json(&pre.join("dataset.manifest.json"));
    assert_eq!(m["time_steps"], 128);
    assert_eq!(m["sample_rate_hz"], 128.0);

    let sp = dir.path().join("split");
    let out = run(&["split", "--data", p(&pre), "--seed", "3", "--set", "fractions=[0.5,0.25,0.25]", "--out", p(&sp)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_json(&sp.join("dataset.manifest.json"));
    assert_eq!(m["split_seed"], 3);
    assert_eq!(m["split_fractions"], serde_json::json!([0.5, 0.25, 0.25]));
    assert_eq!(m["time_steps"], 128);
}

#[test]
fn training_twice_is_bit_identical() {
    let fx = fixture();
    let (a, b) = (fx.run_dir(1), fx.run_dir(2));
    for f in [
        "final/model.pegm",
        "checkpoints/epoch_003.pegm",
        "checkpoints/epoch_004.pegm",
        "history.jsonl",
        "config.json",
    ] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let history = std::fs::read_to_string(a.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 4);
    let record = read_json(&a.join("run.json"));
    assert_eq!(record["seed"], 5);
    assert!(record["outputs"]["final/model.pegm"].is_string());
}

#[test]
fn eval_reports_filtered_auroc_on_request() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let model = fx.run_dir(1).join("final");
    let plain = dir.path().join("plain");
    let out = run(&["eval", "--model", p(&model), "--data", p(&fx.data()), "--set", "rounds=300", "--out", p(&plain)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let m = read_json(&plain.join("metrics.json"));
    assert!(m["auroc_unfiltered"].is_number());
    assert!(m.get("auroc_filtered").is_none());

    for (i, dest) in ["f1", "f2"].iter().enumerate() {
        let model_arg = if i == 0 { model.clone() } else { model.join("model.pegm") };
        let out = run(&[
            "eval", "--model", p(&model_arg), "--data", p(&fx.data()), "--filtered", "--set", "rounds=300", "--out",
            p(&dir.path().join(dest)),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let f1 = std::fs::read(dir.path().join("f1/metrics.json")).unwrap();
    assert_eq!(f1, std::fs::read(dir.path().join("f2/metrics.json")).unwrap());
    let m: Value = serde_json::from_slice(&f1).unwrap();
    assert!(m["auroc_filtered"].is_number());
    assert_eq!(m["rounds"], 300);
}

#[test]
fn explain_and_report_outputs() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let model = fx.run_dir(1).join("final");
    let ex = dir.path().join("ex");
    let out = run(&["explain", "--model", p(&model), "--data", p(&fx.data()), "--set", "count=2", "--out", p(&ex)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let reports: Vec<_> = std::fs::read_dir(&ex)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("explain_") && n.ends_with(".json"))
        .collect();
    assert_eq!(reports.len(), 2);
    let e = read_json(&ex.join(&reports[0]));
    assert_eq!(e["classes"][0]["rows"].as_array().unwrap().len(), 3);

    let one = dir.path().join("one");
    let out = run(&["explain", "--model", p(&model), "--data", p(&fx.data()), "--sample", "4", "--top-k", "5", "--out", p(&one)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&one.join("explain_4.json"))["top_k"], 5);
    assert!(one.join("explain_4.svg").exists() && one.join("explain_4.txt").exists());

    let missing = run(&["explain", "--model", p(&model), "--data", p(&fx.data()), "--sample", "123456", "--out", p(&one)]);
    assert_eq!(code(&missing), 2);

    let rep = dir.path().join("rep");
    let out = run(&["report", "--model", p(&model), "--data", p(&fx.data()), "--out", p(&rep)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = read_json(&rep.join("prototypes.json"));
    assert_eq!(r["rows"].as_array().unwrap().len(), 108);
}

#[test]
fn push_refits_and_records_provenance() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let model = fx.run_dir(1).join("checkpoints/epoch_003.pegm");
    let out = run(&[
        "push", "--model", p(&model), "--data", p(&fx.data()), "--set", "last_layer=true", "--set", "epoch=9", "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = read_json(&dir.path().join("push.json"));
    let records = summary["records"].as_array().unwrap();
    assert_eq!(records.len(), 108);
    assert!(records.iter().all(|r| r["epoch"] == 9));
    assert!(summary["last_layer"]["final_objective"].is_number());
    assert!(dir.path().join("model.pegm").exists());
}

#[test]
fn single_class_evaluation_is_a_numeric_error() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let quiet = dir.path().join("quiet");
    let out = run(&["synth", "--n", "60", "--set", "spike_rate=0", "--out", p(&quiet)]);
    assert_eq!(code(&out), 0);
    let out = run(&[
        "eval", "--model", p(&fx.run_dir(1).join("final")), "--data", p(&quiet), "--out", p(&dir.path().join("e")),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn mismatched_model_and_data_is_a_data_error() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small");
    let out = run(&["synth", "--n", "20", "--set", "channels=8", "--out", p(&small)]);
    assert_eq!(code(&out), 0);
    let out = run(&[
        "report", "--model", p(&fx.run_dir(1).join("final")), "--data", p(&small), "--out", p(&dir.path().join("r")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}
