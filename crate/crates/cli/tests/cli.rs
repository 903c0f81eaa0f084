use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn malign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_malign"))
        .args(args)
        .output()
        .expect("spawn malign")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small network and dataset so each subcommand runs in about a second.
fn write_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = json!({
        "feature_dim": 16,
        "model_dim": 16,
        "conv_kernel": 3,
        "enc_layers": 1,
        "dec_layers": 1,
        "heads": 2,
        "head_dim": 8,
        "num_queries": 6,
        "te_rows": 16,
        "ffn_hidden": 32,
        "num_videos": 4,
        "holdout_videos": 1,
        "video_seconds": 40.0,
        "fps": 2.0,
        "chunk_seconds": 20.0,
        "moments_per_video": 3,
        "min_moment": 4.0,
        "max_moment": 8.0,
        "vocab_size": 6,
        "epochs": 2,
        "batch_size": 2
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_is_byte_identical_for_a_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let a = tmp.path().join("a");
    assert_ok(&malign(&["generate", "--config", s(&cfg), "--seed", "7", "--out", s(&a)]));
    let first = dir_bytes(&a);
    assert!(!first.is_empty());
    assert_ok(&malign(&["generate", "--config", s(&cfg), "--seed", "7", "--out", s(&a), "--force"]));
    assert_eq!(first, dir_bytes(&a));

    // the manifest echoes the output path; everything else matches across directories
    let b = tmp.path().join("b");
    assert_ok(&malign(&["generate", "--config", s(&cfg), "--seed", "7", "--out", s(&b), "--workers", "3"]));
    let strip = |v: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        v.into_iter().filter(|(name, _)| name != "manifest.json").collect()
    };
    assert_eq!(strip(first.clone()), strip(dir_bytes(&b)));

    let c = tmp.path().join("c");
    assert_ok(&malign(&["generate", "--config", s(&cfg), "--seed", "8", "--out", s(&c)]));
    assert_ne!(strip(first), strip(dir_bytes(&c)));
}

#[test]
fn generate_writes_one_file_per_chunk() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        json!({"num_videos": 10, "holdout_videos": 2, "video_seconds": 100.0, "chunk_seconds": 40.0}),
    );
    let data = tmp.path().join("data");
    assert_ok(&malign(&["generate", "--config", s(&cfg), "--out", s(&data)]));
    let chunks = fs::read_dir(data.join("chunks")).unwrap().count();
    assert_eq!(chunks, 30);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["videos"].as_array().unwrap().len(), 10);
}

#[test]
fn generate_refuses_a_non_empty_directory_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let data = tmp.path().join("data");
    assert_ok(&malign(&["generate", "--config", s(&cfg), "--out", s(&data)]));

    let refused = malign(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert!(!refused.status.success());
    let err = String::from_utf8_lossy(&refused.stderr);
    assert!(err.starts_with("error: refused:"), "{err}");

    assert_ok(&malign(&["generate", "--config", s(&cfg), "--out", s(&data), "--force"]));
}

#[test]
fn train_then_eval_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert_ok(&malign(&["generate", "--config", s(&cfg), "--out", s(&data)]));
    assert_ok(&malign(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));

    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,loss,matched_sim_mean,unmatched_sim_mean,t,b"));
    let rows = lines.count();
    // 3 training videos × 2 chunks = 6 chunks, 3 batches per epoch, 2 epochs.
    assert!(rows > 0 && rows <= 6, "{rows} rows");
    assert!(run.join("checkpoint.malc").is_file());
    assert!(run.join("config.json").is_file());

    let reports: Vec<String> = (0..2)
        .map(|_| {
            let out = malign(&["eval", "--data", s(&data), "--out", s(&run), "--task", "recognition"]);
            assert_ok(&out);
            String::from_utf8(out.stdout).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    let report: serde_json::Value = serde_json::from_str(&reports[0]).unwrap();
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));

    let out = malign(&["eval", "--data", s(&data), "--out", s(&run), "--task", "nlq", "--workers", "2"]);
    assert_ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["recall"]["1"]["0.3"].is_number());
    let csv = fs::read_to_string(run.join("nlq_queries.csv")).unwrap();
    assert!(csv.starts_with("video_id,concept,"));
}

#[test]
fn failures_report_a_category_and_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.malc");
    let out = malign(&["eval", "--checkpoint", s(&missing), "--task", "nlq"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: io:"), "{err}");
    assert_eq!(err.lines().count(), 1);

    let bad = tmp.path().join("bad.malc");
    fs::write(&bad, b"nope").unwrap();
    let out = malign(&["eval", "--checkpoint", s(&bad), "--task", "nlq"]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: format:"));

    let cfg = write_config(tmp.path(), json!({"heads": 3}));
    let out = malign(&["generate", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: config:"));

    let out = malign(&["eval", "--task", "segmentation"]);
    assert!(!out.status.success());
}
