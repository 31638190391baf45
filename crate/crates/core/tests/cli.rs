mod common;

use std::path::Path;
use std::process::Command;

use dadapt::cli::{cmd_eval, cmd_generate, cmd_report, cmd_run, sha256_hex, RunManifest, RunOptions};
use dadapt::pipeline::{read_json, round_dir, RoundMetrics};
use dadapt::synthworld::WorldConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dadapt"))
}

fn tiny_files(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (world, cfg) = common::tiny();
    let w = dir.join("world.toml");
    let c = dir.join("pipeline.toml");
    std::fs::write(&w, world.to_toml()).unwrap();
    std::fs::write(&c, cfg.to_toml()).unwrap();
    (w, c)
}

#[test]
fn generate_is_deterministic_and_counts_scenes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_generate(None, Some(7), &a).unwrap();
    cmd_generate(None, Some(7), &b).unwrap();
    for f in ["world.toml", "source.jsonl", "target.jsonl", "target_gt.jsonl", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let lines = |f: &str| std::fs::read_to_string(a.join(f)).unwrap().lines().count();
    assert_eq!((lines("source.jsonl"), lines("target.jsonl")), (200, 200));
    let m: RunManifest = read_json(&a.join("manifest.json")).unwrap();
    assert_eq!(m.config_hash, sha256_hex(&std::fs::read(a.join("world.toml")).unwrap()));
    assert_eq!(m.seed, 7);
}

#[test]
fn single_class_world_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = WorldConfig {
        num_classes: 1,
        ..WorldConfig::reference()
    };
    let p = tmp.path().join("w.toml");
    std::fs::write(&p, bad.to_toml()).unwrap();
    let st = bin()
        .args(["generate", "--config"])
        .arg(&p)
        .arg("--out")
        .arg(tmp.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn run_eval_report_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, c) = tiny_files(tmp.path());
    let data = tmp.path().join("data");
    cmd_generate(Some(&w), None, &data).unwrap();
    let run = tmp.path().join("run");
    let opts = RunOptions {
        ablations: vec!["no_dd".into()],
        ..Default::default()
    };
    let m = cmd_run(Some(&c), &data, &run, &opts).unwrap();
    let written = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(written.contains("no_dd = true"));
    assert_eq!(m.config_hash, sha256_hex(written.as_bytes()));
    for a in &m.artifacts {
        assert!(run.join(a).exists(), "{a}");
    }

    let last: RoundMetrics = read_json(&round_dir(&run, 2).join("metrics.json")).unwrap();
    let e = cmd_eval(&run.join("final/detector.ckpt"), &data, Some(&c), &tmp.path().join("eval.json")).unwrap();
    let inrun = last.report.unwrap();
    assert_eq!(e.map, inrun.map);
    assert_eq!(e.per_class_ap, inrun.per_class_ap);
    assert_eq!(e.error_breakdown, inrun.error_breakdown);

    let files = cmd_report(&run).unwrap();
    let csv = std::fs::read_to_string(run.join("report/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    assert_eq!(
        std::fs::read(run.join("report/iou_hist_round_2.svg")).unwrap(),
        std::fs::read(round_dir(&run, 2).join("iou_hist.svg")).unwrap()
    );
    let again = cmd_report(&run).unwrap();
    assert_eq!(files, again);
}

#[test]
fn resume_flag_reproduces_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, c) = tiny_files(tmp.path());
    let data = tmp.path().join("data");
    cmd_generate(Some(&w), None, &data).unwrap();
    let full = tmp.path().join("full");
    cmd_run(Some(&c), &data, &full, &RunOptions::default()).unwrap();
    let part = tmp.path().join("part");
    let one = RunOptions {
        rounds: Some(1),
        ..Default::default()
    };
    cmd_run(Some(&c), &data, &part, &one).unwrap();
    let resumed = RunOptions {
        resume: true,
        ..Default::default()
    };
    cmd_run(Some(&c), &data, &part, &resumed).unwrap();
    for f in ["final/detector.ckpt", "round_2/metrics.json", "round_2/props_tgt.jsonl"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn run_does_not_need_target_annotations() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, c) = tiny_files(tmp.path());
    let data = tmp.path().join("data");
    cmd_generate(Some(&w), None, &data).unwrap();
    std::fs::remove_file(data.join("target_gt.jsonl")).unwrap();
    let opts = RunOptions {
        rounds: Some(1),
        ..Default::default()
    };
    cmd_run(Some(&c), &data, &tmp.path().join("run"), &opts).unwrap();
    let err = cmd_eval(&tmp.path().join("run/final/detector.ckpt"), &data, Some(&c), &tmp.path().join("e.json"));
    assert_eq!(err.unwrap_err().exit_code(), 4);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, _) = tiny_files(tmp.path());
    let data = tmp.path().join("data");
    cmd_generate(Some(&w), None, &data).unwrap();

    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    let d = data.to_str().unwrap();
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(code(&["run", "--data", d, "--out", o, "--ablation", "bogus"]), Some(2));
    assert_eq!(code(&["run", "--data", d, "--out", o, "--rounds", "0"]), Some(2));

    let diverge = tmp.path().join("diverge.toml");
    std::fs::write(&diverge, "rounds = 1\npretrain_steps = 50\npretrain_lr = 1e9\n").unwrap();
    assert_eq!(code(&["run", "--config", diverge.to_str().unwrap(), "--data", d, "--out", o]), Some(3));

    let missing = tmp.path().join("none.ckpt");
    assert_eq!(
        code(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", d, "--out", o]),
        Some(4)
    );
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["report", "--run", empty.to_str().unwrap()]), Some(4));
    assert_eq!(code(&["generate", "--out", tmp.path().join("ok").to_str().unwrap()]), Some(0));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (w, c) = tiny_files(tmp.path());
    let data = tmp.path().join("data");
    cmd_generate(Some(&w), None, &data).unwrap();
    let opts = RunOptions {
        rounds: Some(1),
        ..Default::default()
    };
    cmd_run(Some(&c), &data, &tmp.path().join("run"), &opts).unwrap();
    let ckpt = tmp.path().join("run/final/detector.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let i = bytes.len() / 2;
    bytes[i] ^= 0x01;
    std::fs::write(&ckpt, bytes).unwrap();
    let err = cmd_eval(&ckpt, &data, Some(&c), &tmp.path().join("e.json")).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}
