use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use segqc::io::{save_volume, VolumeFormat};
use segqc::Volume;

fn segqc(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_segqc")).args(args).output().unwrap();
    assert!(out.status.success(), "segqc {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "regressor": {"stem_pool": 32, "channels": [4, 8], "d_g": 8, "attn_hidden": 8, "batch_size": 16, "epochs": 2, "train_slices": 2},
  "loss": {"lambda": 1.0, "xi": 0.05},
  "report": {"threshold": 0.8}
}"#;

#[test]
fn synth_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (d, seed) in [(&a, "4"), (&b, "4"), (&c, "5")] {
        segqc(&["--seed", seed, "synth", "--out", p(d), "--volumes", "4", "--classes", "liver,spleen"]);
    }
    let manifest = |d: &Path| fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    assert_ne!(manifest(&a), manifest(&c));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("config.json");
    fs::write(&cfg, TINY).unwrap();
    let corpus = d.join("corpus");
    segqc(&["--seed", "2", "synth", "--out", p(&corpus), "--volumes", "4", "--classes", "liver,spleen,pancreas"]);

    let table = d.join("table.json");
    let out = segqc(&["embed", "--corpus", p(&corpus), "--provider", "one-hot", "--out", p(&table)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"command\":\"embed\""));
    segqc(&["--seed", "3", "embed", "--classes", "liver,spleen", "--provider", "hash", "--dim", "8", "--out", p(&d.join("h.json"))]);

    let (run_a, run_b) = (d.join("run_a"), d.join("run_b"));
    for run in [&run_a, &run_b] {
        segqc(&["--seed", "1", "--threads", "1", "--config", p(&cfg), "train", "--corpus", p(&corpus), "--table", p(&table), "--out", p(run)]);
    }
    let log = fs::read_to_string(run_a.join("train_log.jsonl")).unwrap();
    assert!(!log.is_empty());
    assert_eq!(log, fs::read_to_string(run_b.join("train_log.jsonl")).unwrap());
    assert!(run_a.join("checkpoints/epoch_001.json").exists());

    let records = d.join("records.jsonl");
    let model = run_a.join("model.json");
    segqc(&["estimate", "--checkpoint", p(&model), "--table", p(&table), "--corpus", p(&corpus), "--split", "all", "--slices", "3", "--out", p(&records)]);
    let text = fs::read_to_string(&records).unwrap();
    assert_eq!(text.lines().count(), 3 * 4 * 8);

    let single = segqc(&[
        "estimate", "--checkpoint", p(&model), "--table", p(&table),
        "--image", p(&corpus.join("images/vol_000.svol")), "--mask", p(&corpus.join("labels/vol_000_c2_gt.svol")), "--class", "2",
    ]);
    assert_eq!(String::from_utf8(single.stdout).unwrap().lines().count(), 1);

    let (report_json, scatter) = (d.join("eval.json"), d.join("scatter.csv"));
    segqc(&["eval-metrics", "--records", p(&records), "--ks", "5,10", "--out", p(&report_json), "--scatter", p(&scatter)]);
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(&report_json).unwrap()).unwrap();
    assert_eq!(eval["overall"]["n"], 96);
    assert!(fs::read_to_string(&scatter).unwrap().starts_with("predicted,actual,class_id\n"));

    let (rj, rc) = (d.join("report.json"), d.join("organs.csv"));
    let out = segqc(&["--config", p(&cfg), "report", "--records", p(&records), "--corpus", p(&corpus), "--out-json", p(&rj), "--out-csv", p(&rc)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bytes_written"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&rj).unwrap()).unwrap();
    assert_eq!(report["organs"].as_array().unwrap().len(), 3);
    assert_eq!(fs::read_to_string(&rc).unwrap().lines().count(), 4);

    let worst = segqc(&["select", "--method", "quality", "--n", "2", "--records", p(&records)]);
    let best = segqc(&["select", "--method", "quality", "--goal", "pseudo", "--n", "4", "--records", p(&records)]);
    let worst: Vec<String> = String::from_utf8(worst.stdout).unwrap().lines().map(String::from).collect();
    let mut best: Vec<String> = String::from_utf8(best.stdout).unwrap().lines().map(String::from).collect();
    assert_eq!(worst.len(), 2);
    best.reverse();
    assert_eq!(best[..2], worst[..]);

    let random = |seed: &str| segqc(&["--seed", seed, "select", "--method", "random", "--n", "4", "--records", p(&records)]).stdout;
    assert_eq!(random("9"), random("9"));
}

#[test]
fn uncertainty_selectors_read_probability_volumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (id, values) in [("sure", [0.0f32, 1.0]), ("unsure", [0.5, 0.5]), ("mid", [0.2, 0.9])] {
        for pass in 0..2 {
            let shifted: Vec<f32> = values.iter().map(|v| (v + 0.1 * pass as f32 * (id == "unsure") as u8 as f32).min(1.0)).collect();
            let path = dir.path().join(format!("{id}_{pass}.vol"));
            save_volume(&Volume::new(id, [1, 1, 2], [1.0; 3], shifted).unwrap(), &path, VolumeFormat::Portable).unwrap();
            paths.push(path);
        }
    }
    let first: Vec<&str> = paths.iter().step_by(2).map(|x| p(x)).collect();
    let mut args = vec!["select", "--method", "entropy", "--n", "1", "--probs"];
    args.extend(&first);
    assert_eq!(String::from_utf8(segqc(&args).stdout).unwrap(), "unsure\n");

    let all: Vec<&str> = paths.iter().map(|x| p(x)).collect();
    let mut args = vec!["select", "--method", "mc-dropout", "--n", "1", "--probs"];
    args.extend(&all);
    assert_eq!(String::from_utf8(segqc(&args).stdout).unwrap(), "unsure\n");
}

#[test]
fn bad_inputs_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_segqc")).args(["select", "--method", "quality", "--n", "1"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--records"));
    let out = Command::new(env!("CARGO_BIN_EXE_segqc")).args(["--config", "/nonexistent.json", "synth", "--out", "/tmp/x"]).output().unwrap();
    assert!(!out.status.success());
}
