use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

fn hsgcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsgcast")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn generate(dir: &Path, seed: &str) -> Output {
    hsgcast(&[
        "generate-data",
        "--seed",
        seed,
        "--stations-air",
        "3",
        "--stations-weather",
        "2",
        "--steps",
        "160",
        "--context-dim",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ])
}

const TINY: &str = "[train]
d = 4
layers = 1
history = 6
horizon = 2
mlp_hidden = 4
head_hidden = 4
epochs = 1
max_batches_per_epoch = 2
eval_stride = 4
";

/// Generates data and trains once; returns (data dir, run dir).
fn trained(root: &Path, extra: &[&str]) -> (String, String) {
    let data = root.join("city");
    assert_eq!(code(&generate(&data, "7")), 0);
    let config = root.join("run.toml");
    std::fs::write(&config, TINY).unwrap();
    let run = root.join("run");
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let out = hsgcast(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (data.to_str().unwrap().to_string(), run.to_str().unwrap().to_string())
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn generate_data_is_reproducible_and_guarded() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    assert_eq!(code(&generate(&a, "3")), 0);
    assert_eq!(code(&generate(&b, "3")), 0);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
    assert_eq!(code(&generate(&a, "3")), 1);

    let none = hsgcast(&[
        "generate-data",
        "--stations-air",
        "0",
        "--stations-weather",
        "0",
        "--out",
        root.path().join("c").to_str().unwrap(),
    ]);
    assert_eq!(code(&none), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&hsgcast(&["frobnicate"])), 1);
    assert_eq!(code(&hsgcast(&["train"])), 1);
    assert_eq!(code(&hsgcast(&["gradcheck", "--scale", "huge"])), 1);
    let help = hsgcast(&["train", "--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for name in ["no-spatial-disc", "no-temporal-disc", "no-macro-disc", "no-adversarial", "fixed-weights", "avg-weights"] {
        assert!(text.contains(name), "{name} missing from help");
    }
}

#[test]
fn train_writes_artifacts_and_rejects_bad_input() {
    let root = tempfile::tempdir().unwrap();
    let (data, run) = trained(root.path(), &[]);
    for f in ["checkpoint.bin", "stats.jsonl", "metrics.json", "metrics_test.csv"] {
        assert!(Path::new(&run).join(f).is_file(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(Path::new(&run).join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.get("test").is_some() && metrics.get("persistence_test").is_some());

    let bad = hsgcast(&["train", "--data", &data, "--ablate", "no-such-part", "--out", &format!("{run}2")]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("no-adversarial"));

    let config = root.path().join("bad.toml");
    std::fs::write(&config, "[train]\nwidth = 3\n").unwrap();
    let bad = hsgcast(&["train", "--config", config.to_str().unwrap(), "--data", &data, "--out", &format!("{run}3")]);
    assert_eq!(code(&bad), 1);

    let missing = hsgcast(&["train", "--data", root.path().join("nowhere").to_str().unwrap(), "--out", &format!("{run}4")]);
    assert_eq!(code(&missing), 2);
}

fn step_lines(run: &str) -> Vec<serde_json::Value> {
    std::fs::read_to_string(Path::new(run).join("stats.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v.get("predictive_loss").is_some())
        .collect()
}

#[test]
fn ablations_show_in_the_statistics() {
    let root = tempfile::tempdir().unwrap();
    let (_, run) = trained(root.path(), &["--ablate", "no-adversarial"]);
    let steps = step_lines(&run);
    assert!(!steps.is_empty());
    for s in &steps {
        assert!(s.get("lambda").is_none() && s.get("disc_loss").is_none());
    }

    let root = tempfile::tempdir().unwrap();
    let (_, run) = trained(root.path(), &["--ablate", "avg-weights"]);
    for s in step_lines(&run) {
        let lambda = s["lambda"].as_object().unwrap();
        assert_eq!(lambda.len(), 3);
        assert!(lambda.values().all(|v| v.as_f64() == Some(1.0 / 3.0)));
    }
}

#[test]
fn evaluate_and_predict_write_their_files() {
    let root = tempfile::tempdir().unwrap();
    let (data, run) = trained(root.path(), &[]);
    let ckpt = format!("{run}/checkpoint.bin");

    let csv = root.path().join("val.csv");
    let eval = hsgcast(&["evaluate", "--checkpoint", &ckpt, "--data", &data, "--split", "val", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("MAE"));
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() > 1);
    assert_eq!(code(&hsgcast(&["evaluate", "--checkpoint", &ckpt, "--data", &data, "--split", "dev"])), 1);

    let pred = root.path().join("pred");
    let origin = "2018-01-03T00:00:00Z";
    let out = hsgcast(&[
        "predict", "--checkpoint", &ckpt, "--data", &data, "--at", origin, "--horizon", "1", "--out",
        pred.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_path(pred.join("forecast.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let (step, station) = (
        headers.iter().position(|h| h == "step").unwrap(),
        headers.iter().position(|h| h == "station_id").unwrap(),
    );
    let mut pairs = BTreeSet::new();
    for r in reader.records() {
        let r = r.unwrap();
        pairs.insert((r[station].to_string(), r[step].to_string()));
    }
    let stations: BTreeSet<_> = pairs.iter().map(|(s, _)| s.clone()).collect();
    assert_eq!(stations.len(), 5);
    assert_eq!(pairs.len(), 5, "one step per station");

    let mut attn = csv::Reader::from_path(pred.join("attention.csv")).unwrap();
    let cols: Vec<_> = attn.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(cols, ["step", "relation", "target_id", "source_id", "weight"]);
    assert!(attn.records().count() > 0);

    let off_grid = hsgcast(&["predict", "--checkpoint", &ckpt, "--data", &data, "--at", "2018-01-03T00:30:00Z", "--horizon", "1"]);
    assert_eq!(code(&off_grid), 2);
    let too_early = hsgcast(&["predict", "--checkpoint", &ckpt, "--data", &data, "--at", "2018-01-01T01:00:00Z", "--horizon", "1"]);
    assert_eq!(code(&too_early), 2);
}
