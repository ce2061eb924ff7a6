mod common;

use std::path::Path;

use boneik::dataio::{MotionDataset, PositionSequence};
use boneik::rig::{load_rig, SMPL22_JSON};
use common::{run_cli, run_ok};

fn tiny_model(d: &Path) {
    std::fs::write(d.join("cfg.json"), r#"{"model":{"hidden":16,"depth":2,"heads":2},"max_epochs":1}"#).unwrap();
    run_ok(d, &["gen", "--rig", "smpl22", "--frames", "40", "--seed", "1", "--out", "train.jsonl"]);
    run_ok(d, &["gen", "--rig", "smpl22", "--frames", "20", "--seed", "2", "--out", "val.jsonl", "--positions-out", "val_pos.jsonl"]);
    run_ok(d, &["train", "--rig", "smpl22", "--train", "train.jsonl", "--val", "val.jsonl", "--config", "cfg.json", "--out", "m.bin"]);
}

#[test]
fn roundtrip_on_fixture_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(dir.path(), &["roundtrip", "--rig", "smpl22", "--frames", "2000", "--seed", "7"]);
    let max: f64 = out.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!(max <= 5e-5);
}

#[test]
fn rest_pose_eval_on_identity_dataset_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from(r#"{"rig":"smpl22","n":22,"format":"quat-wxyz","units":"m"}"#);
    text.push('\n');
    for _ in 0..3 {
        let q = vec!["[1.0,0.0,0.0,0.0]"; 22].join(",");
        text.push_str(&format!("{{\"q\":[{q}]}}\n"));
    }
    std::fs::write(dir.path().join("id.jsonl"), text).unwrap();
    let out = run_ok(dir.path(), &["eval", "--rig", "smpl22", "--data", "id.jsonl"]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(report["mpjae_deg"].as_f64().unwrap() < 1e-5);
    assert!(report["mpjpe_mm"].as_f64().unwrap() < 1e-3);
    assert_eq!(report["frame_count"], 3);
}

#[test]
fn pipeline_commands_produce_declared_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    assert!(std::fs::read_to_string(d.join("m.bin.history.csv")).unwrap().starts_with("epoch,train_loss,val_mpjae\n1,"));

    run_ok(d, &["eval", "--rig", "smpl22", "--ckpt", "m.bin", "--data", "val.jsonl", "--report", "r.json", "--per-joint", "pj.csv"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["per_joint"].as_array().unwrap().len(), 22);
    assert_eq!(std::fs::read_to_string(d.join("pj.csv")).unwrap().lines().count(), 23);

    run_ok(d, &["solve", "--rig", "smpl22", "--data", "val.jsonl", "--limit", "3", "--checkpoints", "1,10", "--ckpt", "m.bin", "--out", "s.csv"]);
    let sweep = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "solver,iteration,mpjae_deg,mpjpe_mm");
    assert!(sweep.lines().nth(3).unwrap().starts_with("amortized,1,"));
    run_ok(d, &["solve", "--rig", "smpl22", "--data", "val.jsonl", "--limit", "2", "--solver", "ccd", "--checkpoints", "1", "--out", "c.csv"]);
    assert_eq!(std::fs::read_to_string(d.join("c.csv")).unwrap().lines().count(), 2);

    run_ok(d, &["bench", "--rig", "smpl22", "--ckpt", "m.bin", "--batches", "1,4", "--min-ms", "5", "--out", "b.csv"]);
    let bench = std::fs::read_to_string(d.join("b.csv")).unwrap();
    assert_eq!(bench.lines().count(), 3);
    assert!(bench.starts_with("batch_size,fps\n1,"));

    run_ok(d, &["attn-flow", "--rig", "smpl22", "--ckpt", "m.bin", "--data", "val.jsonl", "--out", "f.csv"]);
    let flow = std::fs::read_to_string(d.join("f.csv")).unwrap();
    for line in flow.lines().skip(1) {
        let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-5, "flow rows are stochastic: {sum}");
    }
}

#[test]
fn convert_keeps_frame_count_and_root_translation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    // Shift every frame into world space; convert must report the shift as `t`.
    let mut seq = PositionSequence::from_jsonl(&std::fs::read_to_string(d.join("val_pos.jsonl")).unwrap()).unwrap();
    for f in seq.frames.iter_mut() {
        for p in f.iter_mut() {
            p[0] += 1.5;
            p[2] -= 0.25;
        }
    }
    std::fs::write(d.join("world.jsonl"), seq.to_jsonl()).unwrap();
    run_ok(d, &["convert", "--rig", "smpl22", "--ckpt", "m.bin", "--positions", "world.jsonl", "--out", "rot.jsonl"]);
    let out = MotionDataset::read(&d.join("rot.jsonl")).unwrap();
    assert_eq!(out.len(), seq.frames.len());
    for (f, src) in out.frames.iter().zip(&seq.frames) {
        assert_eq!(f.t.unwrap(), src[0]);
        assert!(f.p.is_none());
        for q in &f.q {
            assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn transfer_to_a_renamed_rig_loads_there() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_model(d);
    let renamed = SMPL22_JSON.replace("\"smpl22\"", "\"other\"").replace("left_", "l_").replace("right_", "r_");
    std::fs::write(d.join("other.json"), &renamed).unwrap();
    let tree = load_rig(&renamed).unwrap();
    let map: serde_json::Map<String, serde_json::Value> = tree
        .names()
        .iter()
        .map(|n| (n.clone(), serde_json::Value::String(n.replacen("l_", "left_", 1).replacen("r_", "right_", 1))))
        .collect();
    std::fs::write(d.join("map.json"), serde_json::to_string(&map).unwrap()).unwrap();
    run_ok(d, &["transfer", "--src", "m.bin", "--src-rig", "smpl22", "--dst-rig", "other.json", "--map", "map.json", "--out", "m2.bin"]);
    run_ok(d, &["bench", "--rig", "other.json", "--ckpt", "m2.bin", "--batches", "1", "--min-ms", "1", "--out", "b.csv"]);
    let wrong = run_cli(d, &["bench", "--rig", "smpl22", "--ckpt", "m2.bin", "--batches", "1", "--out", "b.csv"]);
    assert_eq!(wrong.status.code(), Some(2));
}

#[test]
fn exit_codes_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = run_cli(d, &["eval", "--rig", "smpl22", "--data", "missing.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    let stderr = String::from_utf8(missing.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("error kind=io message="));

    std::fs::write(d.join("cyclic.json"), r#"{"name":"bad","up":[0,0,1],"joints":[{"name":"a","parent":"a","offset":[0,0,0]}]}"#).unwrap();
    let bad = run_cli(d, &["rig", "check", "cyclic.json"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8(bad.stderr).unwrap().starts_with("error kind="));

    let ok = run_ok(d, &["rig", "check", "smpl22"]);
    assert!(ok.starts_with("rig smpl22 joints 22"));

    let unknown = run_cli(d, &["gen", "--rig", "smpl22", "--frames", "1", "--out", "x.jsonl", "--nope"]);
    assert_eq!(unknown.status.code(), Some(2));
    let help = run_cli(d, &["noise-sweep", "--help"]);
    let help = String::from_utf8(help.stdout).unwrap();
    for flag in ["--rig", "--ckpt", "--data", "--sigmas", "--seed", "--keep-root-noise", "--out", "--threads"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
}
