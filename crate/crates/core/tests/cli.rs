mod common;

use std::process::Command;

use common::listing;

fn archevo(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_archevo")).args(args).output().unwrap()
}

#[test]
fn validate_listing_and_fault() {
    let ok = archevo(&["validate", listing("yolov3.yaml").to_str().unwrap()]);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&ok.stdout).trim(), "valid");
    let bad = archevo(&["validate", listing("broken_from99.yaml").to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&bad.stderr).unwrap();
    assert_eq!(err["diagnostics"][0]["code"], "IndexOutOfRange");
}

#[test]
fn usage_error_is_two() {
    assert_eq!(archevo(&["analyze"]).status.code(), Some(2));
    assert_eq!(archevo(&["metrics"]).status.code(), Some(2));
}

#[test]
fn run_then_export() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.yaml");
    std::fs::write(
        &cfg,
        format!("mode: ge1\nseeds: [{}]\npopulation_size: 6\ngenerations: 3\nrng_seed: 4\n", listing("yolov3.yaml").display()),
    )
    .unwrap();
    let run_dir = tmp.path().join("demo_run");
    let run = archevo(&["run", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap(), "--generations", "2"]);
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let report: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(report["generations"], 2);
    let figs = tmp.path().join("figs");
    let m = archevo(&["metrics", "--runs", run_dir.to_str().unwrap(), "--out", figs.to_str().unwrap()]);
    assert_eq!(m.status.code(), Some(0));
    for f in ["pareto_counts.csv", "hypervolume.csv", "parallel_coords.csv", "parallel_coords.json"] {
        assert!(figs.join(f).exists(), "{f}");
    }
}

#[test]
fn score_reads_kitti_and_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let labels = tmp.path().join("labels");
    std::fs::create_dir(&labels).unwrap();
    std::fs::write(
        labels.join("000001.txt"),
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n\
         DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n",
    )
    .unwrap();
    let dets = tmp.path().join("dets.jsonl");
    std::fs::write(&dets, "{\"image_id\":\"000001\",\"class_id\":0,\"bbox\":[587.01,173.33,614.12,200.12],\"confidence\":0.9}\n").unwrap();
    let out = archevo(&["score", "--dets", dets.to_str().unwrap(), "--gt", labels.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["map50"], 1.0);
    assert_eq!(m["recall"], 1.0);
}
