use std::path::Path;
use std::process::{Command, Output};

use wfd::detector::{AnchorSet, DetectorConfig, DetectorModel, ExtractorConfig};

fn wfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wfd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = wfd(args);
    assert!(
        out.status.success(),
        "wfd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_model(path: &Path) {
    let ex = ExtractorConfig {
        width: 4,
        ..Default::default()
    };
    let cfg = DetectorConfig::new(ex, 3, AnchorSet::new(vec![16.0, 48.0]).unwrap());
    DetectorModel::<f32>::new(cfg, 0).unwrap().save(path).unwrap();
}

#[test]
fn empty_input_gives_empty_detections() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    tiny_model(&model);
    let input = dir.path().join("empty.jsonl");
    std::fs::write(&input, "").unwrap();
    let out = dir.path().join("det/detections.jsonl");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    ok(&["detect", "--model", s(&model), "--input", s(&input), "--out", s(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "");
    assert!(dir.path().join("det/run_config.json").exists());
    assert!(dir.path().join("det/timing.json").exists());
}

#[test]
fn corrupted_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    tiny_model(&model);
    let text = std::fs::read_to_string(&model).unwrap();
    std::fs::write(&model, &text[..text.len() / 2]).unwrap();
    let input = dir.path().join("empty.jsonl");
    std::fs::write(&input, "").unwrap();
    let out = dir.path().join("d.jsonl");
    let res = wfd(&["detect", "--model", s(&model), "--input", s(&input), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&res.stderr).contains("checkpoint version"));

    std::fs::write(&model, text.replacen("\"version\":1", "\"version\":99", 1)).unwrap();
    let res = wfd(&["detect", "--model", s(&model), "--input", s(&input), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&res.stderr).contains("unsupported version 99"));
}

#[test]
fn exit_codes_for_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    // missing required flag
    assert_eq!(wfd(&["detect"]).status.code(), Some(2));
    // invalid generator setting
    let out = dir.path().join("ds");
    assert_eq!(wfd(&["synth", "--tabs", "0", "--out", s(&out)]).status.code(), Some(2));
    // malformed trace file
    let model = dir.path().join("model.json");
    tiny_model(&model);
    let input = dir.path().join("bad.jsonl");
    std::fs::write(&input, "{not json}\n").unwrap();
    let det = dir.path().join("d.jsonl");
    let res = wfd(&["detect", "--model", s(&model), "--input", s(&input), "--out", s(&det)]);
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn synth_is_reproducible_and_config_file_merges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "[synth]\nclasses = 3\ncount = 12\ntest-count = 4\nseed = 9\nbase_rate = 1.0\n",
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--config", s(&cfg), "--seed", "5", "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--seed", "5", "--out", s(&b)]);
    for f in ["train.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("run_config.json")).unwrap()).unwrap();
    let synth = &echoed["config"]["synth"];
    assert_eq!(synth["classes"], 3);
    assert_eq!(synth["count"], 12);
    // the flag beats the file
    assert_eq!(synth["seed"], 5);
    assert_eq!(
        std::fs::read_to_string(a.join("train.jsonl")).unwrap().lines().count(),
        12
    );
}

#[test]
fn pipeline_composes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&[
        "synth",
        "--classes",
        "3",
        "--base-rate",
        "1",
        "--tabs",
        "1",
        "--count",
        "60",
        "--test-count",
        "0",
        "--seed",
        "1",
        "--out",
        s(&p("single")),
    ]);
    ok(&[
        "synth",
        "--classes",
        "3",
        "--base-rate",
        "1",
        "--tabs",
        "2",
        "--count",
        "16",
        "--test-count",
        "8",
        "--seed",
        "2",
        "--out",
        s(&p("multi")),
    ]);
    ok(&[
        "pretrain",
        "--data",
        s(&p("single")),
        "--out",
        s(&p("fe/fe.json")),
        "--epochs",
        "2",
        "--width",
        "4",
    ]);
    ok(&[
        "--threads",
        "1",
        "train",
        "--data",
        s(&p("multi")),
        "--pretrained",
        s(&p("fe/fe.json")),
        "--out",
        s(&p("model/model.json")),
        "--iters",
        "20",
        "--batch",
        "4",
        "--seed",
        "3",
    ]);
    let csv = std::fs::read_to_string(p("model/loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,loss,cls,reg"));
    assert_eq!(csv.lines().count(), 21);
    let test = p("multi/test.jsonl");
    ok(&[
        "detect",
        "--model",
        s(&p("model/model.json")),
        "--input",
        s(&test),
        "--out",
        s(&p("det/detections.jsonl")),
    ]);
    let summary = ok(&[
        "eval",
        "--pred",
        s(&p("det/detections.jsonl")),
        "--gt",
        s(&test),
        "--out",
        s(&p("eval/report.json")),
    ]);
    assert!(summary.contains("mAP"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("eval/report.json")).unwrap()).unwrap();
    for key in [
        "ap",
        "map",
        "map_50",
        "map_75",
        "map_per_lambda",
        "precision",
        "recall",
        "counts",
    ] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert!(report["mbps"].is_number());
    let bench = ok(&["bench", "--model", s(&p("model/model.json")), "--input", s(&test)]);
    assert!(bench.contains("MBps"));
    assert!(bench.contains("total MB"));
    for d in ["single", "multi", "fe", "model", "det", "eval"] {
        assert!(p(d).join("run_config.json").exists(), "{d}");
    }
}

#[test]
fn pipeline_overfits_small_training_set() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&[
        "synth",
        "--classes",
        "3",
        "--base-rate",
        "1",
        "--tabs",
        "1",
        "--count",
        "300",
        "--test-count",
        "0",
        "--seed",
        "100",
        "--out",
        s(&p("single")),
    ]);
    ok(&[
        "synth",
        "--classes",
        "3",
        "--base-rate",
        "1",
        "--tabs",
        "2",
        "--count",
        "32",
        "--test-count",
        "0",
        "--seed",
        "7",
        "--out",
        s(&p("multi")),
    ]);
    ok(&["pretrain", "--data", s(&p("single")), "--out", s(&p("fe.json"))]);
    ok(&[
        "train",
        "--data",
        s(&p("multi")),
        "--pretrained",
        s(&p("fe.json")),
        "--out",
        s(&p("model.json")),
        "--center-scale",
        "16",
        "--batch",
        "16",
        "--iters",
        "2000",
    ]);
    let train = p("multi/train.jsonl");
    ok(&[
        "detect",
        "--model",
        s(&p("model.json")),
        "--input",
        s(&train),
        "--out",
        s(&p("det.jsonl")),
    ]);
    ok(&[
        "eval",
        "--pred",
        s(&p("det.jsonl")),
        "--gt",
        s(&train),
        "--out",
        s(&p("report.json")),
    ]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    let map50 = report["map_50"].as_f64().unwrap();
    assert!(map50 >= 0.9, "training-set mAP_.50 {map50}");
}
