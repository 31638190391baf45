//! Batch commands behind the `dadapt` binary: generate a benchmark, run the
//! loop, evaluate a checkpoint, and render a report of a finished run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Checkpoint, CheckpointError};
use crate::detector::DetectorModel;
use crate::eval::{iou_histogram, GroundTruth, MetricsReport};
use crate::pipeline::{
    evaluate_detector, read_json, round_dir, run_dadapt, source_iou_items, write_json, PipelineConfig, PipelineData,
    PipelineError, RoundMetrics,
};
use crate::detector::Proposal;
use crate::synthworld::{
    generate_benchmark, read_jsonl, write_jsonl, FeatureOracle, Scene, SceneAnnotations, UnlabeledScene, WorldConfig,
    WorldError,
};

pub const WORLD_FILE: &str = "world.toml";
pub const SOURCE_FILE: &str = "source.jsonl";
pub const TARGET_FILE: &str = "target.jsonl";
pub const TARGET_GT_FILE: &str = "target_gt.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) | CliError::Training(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Config(_) => CliError::Config(msg),
            PipelineError::World(w) => w.into(),
            e if e.is_divergence() => CliError::Divergence(msg),
            PipelineError::Stage { .. } => CliError::Training(msg),
            _ => CliError::Io(msg),
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::Config(_) | WorldError::Infeasible { .. } => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Params(_) => CliError::Config(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Audit record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the config file written alongside, as hex.
    pub config_hash: String,
    pub config_file: String,
    pub seed: u64,
    pub tool_version: String,
    /// Wall seconds per stage, in execution order.
    pub stage_seconds: Vec<(String, f64)>,
    pub artifacts: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_config(dir: &Path, name: &str, text: &str) -> Result<String, CliError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(sha256_hex(text.as_bytes()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(io(path))
}

pub fn load_world(config: Option<&Path>, seed: Option<u64>) -> Result<WorldConfig, CliError> {
    let mut world = match config {
        Some(p) => WorldConfig::from_toml(&read_text(p)?)?,
        None => WorldConfig::reference(),
    };
    if let Some(s) = seed {
        world.seed = s;
    }
    world.validate()?;
    Ok(world)
}

/// Writes `world.toml`, both domains, the target annotations and a manifest.
pub fn cmd_generate(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<RunManifest, CliError> {
    let world = load_world(config, seed)?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let hash = write_config(out, WORLD_FILE, &world.to_toml())?;
    let (src, tgt) = generate_benchmark(&world)?;
    let anns: Vec<SceneAnnotations> = tgt.iter().map(SceneAnnotations::of).collect();
    write_jsonl(&out.join(SOURCE_FILE), &src)?;
    write_jsonl(&out.join(TARGET_FILE), &tgt)?;
    write_jsonl(&out.join(TARGET_GT_FILE), &anns)?;
    let manifest = RunManifest {
        command: "generate".into(),
        config_hash: hash,
        config_file: WORLD_FILE.into(),
        seed: world.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        stage_seconds: Vec::new(),
        artifacts: [SOURCE_FILE, TARGET_FILE, TARGET_GT_FILE].map(String::from).to_vec(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A generated benchmark read back from disk. Target annotations are optional.
pub struct Dataset {
    pub world: WorldConfig,
    pub source: Vec<Scene>,
    pub target: Vec<UnlabeledScene>,
    pub target_gt: Option<GroundTruth>,
}

impl Dataset {
    pub fn load(dir: &Path, require_gt: bool) -> Result<Self, CliError> {
        let world = WorldConfig::from_toml(&read_text(&dir.join(WORLD_FILE))?)?;
        let source: Vec<Scene> = read_jsonl(&dir.join(SOURCE_FILE))?;
        let target: Vec<Scene> = read_jsonl(&dir.join(TARGET_FILE))?;
        let gt_path = dir.join(TARGET_GT_FILE);
        let target_gt = if gt_path.exists() {
            let anns: Vec<SceneAnnotations> = read_jsonl(&gt_path)?;
            Some(GroundTruth::from_annotations(&anns))
        } else if require_gt {
            return Err(CliError::Io(format!("{}: target annotations are required", gt_path.display())));
        } else {
            None
        };
        Ok(Self {
            world,
            source,
            target: target.into_iter().map(UnlabeledScene::new).collect(),
            target_gt,
        })
    }

    pub fn data(&self) -> PipelineData<'_> {
        PipelineData {
            world: &self.world,
            source: &self.source,
            target: &self.target,
            target_gt: self.target_gt.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub ablations: Vec<String>,
    pub rounds: Option<usize>,
    pub resume: bool,
}

pub fn load_pipeline_config(config: Option<&Path>, opts: &RunOptions) -> Result<PipelineConfig, CliError> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::from_toml(&read_text(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(r) = opts.rounds {
        cfg.rounds = r;
    }
    for a in &opts.ablations {
        cfg.apply_ablation(a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Final summary of a run: source-only and last-round metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub source_only: Option<MetricsReport>,
    pub rounds: Vec<RoundMetrics>,
}

pub fn cmd_run(config: Option<&Path>, data: &Path, out: &Path, opts: &RunOptions) -> Result<RunManifest, CliError> {
    let cfg = load_pipeline_config(config, opts)?;
    let ds = Dataset::load(data, false)?;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let hash = write_config(out, "config.toml", &cfg.to_toml())?;
    let clock = Instant::now();
    let result = run_dadapt(&cfg, &ds.data(), None, Some(out), opts.resume)?;
    let mut stages = result.times.stages.clone();
    stages.push(("total".into(), clock.elapsed().as_secs_f64()));
    let summary = RunSummary {
        source_only: result.pretrained_metrics.clone(),
        rounds: result.rounds.iter().map(|r| r.metrics.clone()).collect(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    let mut artifacts = vec!["config.toml".to_string(), "summary.json".into(), "pretrained/detector.ckpt".into()];
    for r in 1..=cfg.rounds {
        for f in ["detector.ckpt", "cat.ckpt", "box.ckpt", "props_src.jsonl", "props_tgt.jsonl", "metrics.json"] {
            artifacts.push(format!("round_{r}/{f}"));
        }
    }
    artifacts.push("final/detector.ckpt".into());
    let manifest = RunManifest {
        command: "run".into(),
        config_hash: hash,
        config_file: "config.toml".into(),
        seed: cfg.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        stage_seconds: stages,
        artifacts,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Target-domain metrics of a saved detector.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    config: Option<&Path>,
    out: &Path,
) -> Result<MetricsReport, CliError> {
    let cfg = load_pipeline_config(config, &RunOptions::default())?;
    let ds = Dataset::load(data, true)?;
    let ckpt = Checkpoint::read(checkpoint)?;
    let model = DetectorModel::from_checkpoint(cfg.arch(&ds.world), &ckpt)
        .map_err(|e| CliError::Config(format!("{}: {e}", checkpoint.display())))?;
    let oracle = FeatureOracle::new(&ds.world);
    let gt = ds.target_gt.as_ref().expect("required above");
    let report = evaluate_detector(&model, &ds.target, &oracle, gt, &cfg)
        .map_err(|e| CliError::Training(e.to_string()))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    write_json(out, &report)?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Line chart of per-round metrics.
pub fn rounds_svg(rows: &[RoundMetrics]) -> String {
    let (w, h, pad) = (420.0, 260.0, 36.0);
    let n = rows.len().max(2) as f64 - 1.0;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v.clamp(0.0, 1.0);
    let series: [(&str, &str, fn(&RoundMetrics) -> Option<f64>); 3] = [
        ("mAP", "steelblue", |m| m.report.as_ref().map(|r| r.map)),
        ("mIoU_cls", "darkorange", |m| m.report.as_ref().and_then(|r| r.miou_cls)),
        ("mIoU_reg", "seagreen", |m| m.report.as_ref().and_then(|r| r.miou_reg)),
    ];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    for (k, (name, color, pick)) in series.iter().enumerate() {
        let pts: Vec<String> = rows
            .iter()
            .enumerate()
            .filter_map(|(i, r)| pick(r).map(|v| format!("{:.2},{:.2}", x(i), y(v))))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}"/>"#, pts.join(" "));
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">{name}</text>"#,
            pad + 90.0 * k as f64,
            18.0
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10">T={}</text>"#,
            x(i) - 8.0,
            h - pad + 14.0,
            r.round
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads every `round_*/metrics.json` under `run` and writes `report/summary.csv`,
/// `report/rounds.svg` and a regenerated source-proposal IoU histogram per round.
pub fn cmd_report(run: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut rows: Vec<RoundMetrics> = Vec::new();
    let mut r = 1;
    while round_dir(run, r).join("metrics.json").exists() {
        rows.push(read_json(&round_dir(run, r).join("metrics.json"))?);
        r += 1;
    }
    if rows.is_empty() {
        return Err(CliError::Io(format!("{}: no completed rounds found", run.display())));
    }
    let dir = run.join("report");
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let mut csv = String::from("round,map,miou_cls,miou_reg,miou_det,correct,miss,cls,loc,n_tgt_props,n_tgt_fg\n");
    for m in &rows {
        let rep = m.report.as_ref();
        let e = rep.map(|r| r.error_breakdown);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.round,
            opt(rep.map(|r| r.map)),
            opt(rep.and_then(|r| r.miou_cls)),
            opt(rep.and_then(|r| r.miou_reg)),
            opt(m.miou_det),
            opt(e.map(|e| e.correct)),
            opt(e.map(|e| e.miss)),
            opt(e.map(|e| e.cls)),
            opt(e.map(|e| e.loc)),
            m.n_tgt_props,
            m.n_tgt_fg
        );
    }
    let mut written = Vec::new();
    let csv_path = dir.join("summary.csv");
    std::fs::write(&csv_path, csv).map_err(io(&csv_path))?;
    written.push(csv_path);
    let svg_path = dir.join("rounds.svg");
    std::fs::write(&svg_path, rounds_svg(&rows)).map_err(io(&svg_path))?;
    written.push(svg_path);
    for m in &rows {
        let props: Vec<Proposal> = read_jsonl(&round_dir(run, m.round).join("props_src.jsonl"))?;
        let h = iou_histogram(&source_iou_items(&props), 10, 0.0);
        let (c, s) = (
            dir.join(format!("iou_hist_round_{}.csv", m.round)),
            dir.join(format!("iou_hist_round_{}.svg", m.round)),
        );
        h.write(&c, &s, &format!("source proposal IoU (round {})", m.round))
            .map_err(|e| CliError::Io(e.to_string()))?;
        written.extend([c, s]);
    }
    Ok(written)
}
