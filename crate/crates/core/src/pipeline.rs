//! Self-feedback training loop: source pretraining, then `rounds` iterations of
//! propose -> category labels -> foreground filter -> box labels -> detector
//! fine-tuning on the pseudo labels, with per-round artifacts on disk.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Checkpoint, CheckpointError};
use crate::box_adaptor::{
    box_samples, pseudo_label_boxes, select_foreground, train_box_adaptor, BoxAdaptor, BoxAdaptorConfig,
};
use crate::cat_adaptor::{cat_samples, pseudo_label_categories, train_category_adaptor, CatAdaptor, CatAdaptorConfig};
use crate::detector::{
    assign_label, build_pool, detect, label_source_proposals, pretrain_source, propose, target_samples, train_supervised,
    train_target, AnchorGrid, DetectParams, DetectorArch, DetectorError, DetectorModel, DetectorTrainConfig, Proposal,
    TargetTrainConfig,
};
use crate::eval::{
    error_analysis, iou_histogram, mean_average_precision, miou_cls, miou_reg, ConfusionCounts, EvalError,
    GroundTruth, MetricsReport,
};
use crate::geometry::BBox;
use crate::seed::{label_hash, mix, rng_for};
use crate::synthworld::{read_jsonl, write_jsonl, FeatureOracle, GtObject, Scene, UnlabeledScene, WorldConfig, WorldError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("round {round}, stage {stage}: {source}")]
    Stage {
        round: usize,
        stage: &'static str,
        #[source]
        source: DetectorError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: malformed record: {message}")]
    Malformed { path: String, message: String },
}

impl PipelineError {
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            PipelineError::Stage {
                source: DetectorError::Diverged { .. },
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub rounds: usize,
    pub lambda: f64,
    pub eta: f64,
    pub weight_threshold: f64,
    pub enlarge_factor: f64,
    pub top_n: usize,
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub error_score_thresh: f64,
    pub anchor_stride: f64,
    pub anchor_scales: Vec<f64>,
    pub det_hidden: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub cat_hidden: usize,
    pub cat_steps: usize,
    pub cat_lr: f64,
    pub cat_batch: usize,
    pub box_hidden: usize,
    pub box_steps: usize,
    pub box_lr: f64,
    pub box_batch: usize,
    pub target_steps: usize,
    pub target_lr: f64,
    pub target_lr_end: f64,
    pub target_batch: usize,
    /// Share of pseudo-foreground proposals per stage-4 batch; `0` samples uniformly.
    pub target_fg_fraction: f64,
    /// Not part of the published method: weight of a source four-term loss added in target fine-tuning.
    pub source_replay: f64,
    pub no_weight: bool,
    pub no_condition: bool,
    pub no_bg_source: bool,
    pub no_bg_target: bool,
    pub no_dd: bool,
    pub no_cat_adaptor: bool,
    pub no_box_adaptor: bool,
    pub coupled_inputs: bool,
    pub standard_pseudo_label: bool,
    pub pseudo_label_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 3,
            lambda: 1.0,
            eta: 0.1,
            weight_threshold: 0.5,
            enlarge_factor: 2.0,
            top_n: 32,
            nms_iou: 0.5,
            score_thresh: 0.01,
            error_score_thresh: 0.3,
            anchor_stride: 8.0,
            anchor_scales: vec![16.0, 24.0],
            det_hidden: 32,
            pretrain_steps: 2000,
            pretrain_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            cat_hidden: 32,
            cat_steps: 4000,
            cat_lr: 0.005,
            cat_batch: 32,
            box_hidden: 32,
            box_steps: 1000,
            box_lr: 0.01,
            box_batch: 32,
            target_steps: 1000,
            target_lr: 0.005,
            target_lr_end: 0.0005,
            target_batch: 32,
            target_fg_fraction: 0.25,
            source_replay: 0.0,
            no_weight: false,
            no_condition: false,
            no_bg_source: false,
            no_bg_target: false,
            no_dd: false,
            no_cat_adaptor: false,
            no_box_adaptor: false,
            coupled_inputs: false,
            standard_pseudo_label: false,
            pseudo_label_threshold: 0.7,
        }
    }
}

pub const ABLATIONS: &[&str] = &[
    "no_weight",
    "no_condition",
    "no_bg_source",
    "no_bg_target",
    "no_dd",
    "no_cat_adaptor",
    "no_box_adaptor",
    "coupled_inputs",
    "standard_pseudo_label",
];

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let err = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.rounds < 1 {
            return err("rounds must be at least 1");
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("weight_threshold", self.weight_threshold),
            ("source_replay", self.source_replay),
            ("pseudo_label_threshold", self.pseudo_label_threshold),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) {
                return Err(PipelineError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("pretrain_lr", self.pretrain_lr),
            ("cat_lr", self.cat_lr),
            ("box_lr", self.box_lr),
            ("target_lr", self.target_lr),
            ("target_lr_end", self.target_lr_end),
            ("enlarge_factor", self.enlarge_factor),
            ("anchor_stride", self.anchor_stride),
        ] {
            if !(v > 0.0) {
                return Err(PipelineError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.anchor_scales.is_empty() || self.anchor_scales.iter().any(|s| !(*s > 0.0)) {
            return err("anchor_scales must be a nonempty list of positive sizes");
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return err("nms_iou must lie in [0, 1]");
        }
        if self.cat_batch == 0 || self.box_batch == 0 || self.target_batch == 0 {
            return err("batch sizes must be positive");
        }
        Ok(())
    }

    pub fn apply_ablation(&mut self, name: &str) -> Result<(), PipelineError> {
        let flag = match name {
            "no_weight" => &mut self.no_weight,
            "no_condition" => &mut self.no_condition,
            "no_bg_source" => &mut self.no_bg_source,
            "no_bg_target" => &mut self.no_bg_target,
            "no_dd" => &mut self.no_dd,
            "no_cat_adaptor" => &mut self.no_cat_adaptor,
            "no_box_adaptor" => &mut self.no_box_adaptor,
            "coupled_inputs" => &mut self.coupled_inputs,
            "standard_pseudo_label" => &mut self.standard_pseudo_label,
            other => {
                return Err(PipelineError::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    ABLATIONS.join(", ")
                )))
            }
        };
        *flag = true;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn arch(&self, world: &WorldConfig) -> DetectorArch {
        DetectorArch {
            feat_dim: world.feat_dim,
            num_classes: world.num_classes,
            hidden: self.det_hidden,
            grid: AnchorGrid {
                stride: self.anchor_stride,
                scales: self.anchor_scales.clone(),
            },
        }
    }

    pub fn pretrain(&self) -> DetectorTrainConfig {
        DetectorTrainConfig {
            steps: self.pretrain_steps,
            lr: self.pretrain_lr,
            lr_end: self.pretrain_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn cat(&self) -> CatAdaptorConfig {
        CatAdaptorConfig {
            hidden: self.cat_hidden,
            disc_hidden: self.cat_hidden,
            steps: self.cat_steps,
            lr: self.cat_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch: self.cat_batch,
            lambda: self.lambda,
            weight_threshold: self.weight_threshold,
            use_weight: !self.no_weight,
            condition: !self.no_condition,
            warmup: true,
            anneal: true,
        }
    }

    pub fn boxes(&self) -> BoxAdaptorConfig {
        BoxAdaptorConfig {
            hidden: self.box_hidden,
            steps: self.box_steps,
            lr: self.box_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch: self.box_batch,
            eta: if self.no_dd { 0.0 } else { self.eta },
            enlarge_factor: self.enlarge_factor,
        }
    }

    pub fn target(&self) -> TargetTrainConfig {
        TargetTrainConfig {
            steps: self.target_steps,
            lr: self.target_lr,
            lr_end: self.target_lr_end,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch: self.target_batch,
            source_replay: self.source_replay,
            fg_fraction: (self.target_fg_fraction > 0.0).then_some(self.target_fg_fraction),
        }
    }

    pub fn detect_params(&self) -> DetectParams {
        DetectParams {
            score_thresh: self.score_thresh,
            nms_iou: self.nms_iou,
            top_n: self.top_n,
        }
    }
}

/// Seed of one stage of one round.
pub fn stage_seed(seed: u64, stage: &str, round: usize) -> u64 {
    mix(seed, &[label_hash(stage), round as u64])
}

/// Per-round metrics file. `report` is absent when target ground truth is not available.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    #[serde(flatten)]
    pub report: Option<MetricsReport>,
    /// Mean IoU of `b_det` with ground truth over the same pairs as `miou_reg`.
    pub miou_det: Option<f64>,
    pub n_src_props: usize,
    pub n_tgt_props: usize,
    pub n_src_fg: usize,
    pub n_tgt_fg: usize,
    pub box_skipped: bool,
    pub box_fallbacks: usize,
    pub cat_skipped_adversarial: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundArtifacts {
    pub round: usize,
    pub detector: Checkpoint,
    pub cat: Checkpoint,
    pub boxes: Checkpoint,
    pub props_src: Vec<Proposal>,
    pub props_tgt: Vec<Proposal>,
    pub metrics: RoundMetrics,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn round_dir(run: &Path, round: usize) -> PathBuf {
    run.join(format!("round_{round}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    std::fs::write(path, s).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn save_round(run: &Path, art: &RoundArtifacts) -> Result<(), PipelineError> {
    let dir = round_dir(run, art.round);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    art.detector.write(&dir.join("detector.ckpt"))?;
    art.cat.write(&dir.join("cat.ckpt"))?;
    art.boxes.write(&dir.join("box.ckpt"))?;
    write_jsonl(&dir.join("props_src.jsonl"), &art.props_src)?;
    write_jsonl(&dir.join("props_tgt.jsonl"), &art.props_tgt)?;
    write_json(&dir.join("metrics.json"), &art.metrics)
}

pub fn load_round(run: &Path, round: usize) -> Result<RoundArtifacts, PipelineError> {
    let dir = round_dir(run, round);
    Ok(RoundArtifacts {
        round,
        detector: Checkpoint::read(&dir.join("detector.ckpt"))?,
        cat: Checkpoint::read(&dir.join("cat.ckpt"))?,
        boxes: Checkpoint::read(&dir.join("box.ckpt"))?,
        props_src: read_jsonl(&dir.join("props_src.jsonl"))?,
        props_tgt: read_jsonl(&dir.join("props_tgt.jsonl"))?,
        metrics: read_json(&dir.join("metrics.json"))?,
    })
}

/// Target-domain evaluation of a detector.
pub fn evaluate_detector(
    model: &DetectorModel,
    scenes: &[UnlabeledScene],
    oracle: &FeatureOracle,
    gt: &GroundTruth,
    cfg: &PipelineConfig,
) -> Result<MetricsReport, DetectorError> {
    let dets = detect(model, scenes, oracle, &cfg.detect_params())?;
    let (per_class_ap, map) = mean_average_precision(&dets, gt, model.num_classes());
    let confident: Vec<_> = dets.into_iter().filter(|d| d.score >= cfg.error_score_thresh).collect();
    Ok(MetricsReport {
        per_class_ap,
        map,
        miou_cls: None,
        miou_reg: None,
        error_breakdown: error_analysis(&confident, gt),
        histogram_path: None,
    })
}

fn gt_objects(gt: &GroundTruth, scene: &str) -> Vec<GtObject> {
    gt.get(scene).iter().map(|(c, b)| GtObject { cls: *c, bbox: *b }).collect()
}

/// Category pseudo-label quality over all target proposals.
pub fn category_quality(props: &[Proposal], gt: &GroundTruth, num_classes: usize) -> f64 {
    let mut c = ConfusionCounts::new(num_classes + 1);
    for p in props {
        let (truth, _, _) = assign_label(&p.b_det, &gt_objects(gt, &p.scene_id), num_classes);
        c.add(truth, p.y_cls.unwrap_or(p.y_det));
    }
    miou_cls(&c)
}

/// `(miou of b_reg, miou of b_det)` over target foreground proposals that truly overlap an object.
pub fn box_quality(props: &[Proposal], gt: &GroundTruth, num_classes: usize) -> (Option<f64>, Option<f64>) {
    let mut reg = Vec::new();
    let mut det = Vec::new();
    let mut gts = Vec::new();
    for p in props.iter().filter(|p| p.y_cls.is_some_and(|y| y < num_classes)) {
        let (_, b_gt, v) = assign_label(&p.b_det, &gt_objects(gt, &p.scene_id), num_classes);
        if let (Some(g), true) = (b_gt, v >= 0.5) {
            reg.push(p.b_reg.unwrap_or(p.b_det));
            det.push(p.b_det);
            gts.push(g);
        }
    }
    if gts.is_empty() {
        return (None, None);
    }
    (miou_reg(&reg, &gts).ok(), miou_reg(&det, &gts).ok())
}

pub struct PipelineData<'a> {
    pub world: &'a WorldConfig,
    pub source: &'a [Scene],
    pub target: &'a [UnlabeledScene],
    /// Target ground truth, used only for metrics.
    pub target_gt: Option<&'a GroundTruth>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub stages: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub detector: DetectorModel,
    pub pretrained: DetectorModel,
    pub pretrained_metrics: Option<MetricsReport>,
    pub rounds: Vec<RoundArtifacts>,
    pub times: StageTimes,
}

fn stage<T>(round: usize, name: &'static str, r: Result<T, DetectorError>) -> Result<T, PipelineError> {
    r.map_err(|source| PipelineError::Stage {
        round,
        stage: name,
        source,
    })
}

/// Pretrains a source detector, or reuses `pretrained` when given.
pub fn pretrain(
    cfg: &PipelineConfig,
    data: &PipelineData,
    oracle: &FeatureOracle,
) -> Result<DetectorModel, PipelineError> {
    let (model, _) = stage(
        0,
        "pretrain",
        pretrain_source(data.source, oracle, &cfg.arch(data.world), &cfg.pretrain(), stage_seed(cfg.seed, "pretrain", 0)),
    )?;
    Ok(model)
}

/// Everything the loop carries from one round to the next.
pub struct LoopState {
    pub detector: DetectorModel,
    pub cat: CatAdaptor,
    pub boxes: BoxAdaptor,
}

impl LoopState {
    pub fn fresh(detector: DetectorModel, cfg: &PipelineConfig, world: &WorldConfig) -> Self {
        Self {
            detector,
            cat: CatAdaptor::new(world.feat_dim, world.num_classes, &cfg.cat(), stage_seed(cfg.seed, "cat-init", 0)),
            boxes: BoxAdaptor::new(world.feat_dim, world.num_classes, &cfg.boxes(), stage_seed(cfg.seed, "box-init", 0)),
        }
    }

    pub fn restore(art: &RoundArtifacts, cfg: &PipelineConfig, world: &WorldConfig) -> Result<Self, PipelineError> {
        let detector = DetectorModel::from_checkpoint(cfg.arch(world), &art.detector)
            .map_err(|e| PipelineError::Stage {
                round: art.round,
                stage: "restore",
                source: e,
            })?;
        let mut s = Self::fresh(detector, cfg, world);
        s.cat.restore(&art.cat)?;
        s.boxes.restore(&art.boxes)?;
        Ok(s)
    }
}

/// One iteration of the loop, mutating `state` in place.
pub fn run_round(
    round: usize,
    state: &mut LoopState,
    cfg: &PipelineConfig,
    data: &PipelineData,
    oracle: &FeatureOracle,
) -> Result<RoundArtifacts, PipelineError> {
    let k = data.world.num_classes;
    let seed = cfg.seed;

    let mut props_src = stage(round, "propose", propose(&state.detector, data.source, oracle, cfg.top_n, cfg.nms_iou))?;
    label_source_proposals(&mut props_src, data.source, k);
    let mut props_tgt = stage(round, "propose", propose(&state.detector, data.target, oracle, cfg.top_n, cfg.nms_iou))?;

    // category labels
    let mut skipped_adv = 0;
    if cfg.no_cat_adaptor {
        for p in props_tgt.iter_mut() {
            p.y_cls = Some(p.y_det);
        }
    } else {
        let fg_src_only = cfg.no_bg_source || cfg.coupled_inputs;
        let fg_tgt_only = cfg.no_bg_target || cfg.coupled_inputs;
        let train_src: Vec<Proposal> = props_src
            .iter()
            .filter(|p| !fg_src_only || p.y_gt.is_some_and(|y| y < k))
            .cloned()
            .collect();
        let train_tgt: Vec<Proposal> = props_tgt.iter().filter(|p| !fg_tgt_only || p.y_det < k).cloned().collect();
        let s = stage(round, "category", cat_samples(&train_src, data.source, oracle))?;
        let t = stage(round, "category", cat_samples(&train_tgt, data.target, oracle))?;
        let curve = stage(
            round,
            "category",
            train_category_adaptor(&mut state.cat, &s, &t, &cfg.cat(), stage_seed(seed, "cat", round)),
        )?;
        skipped_adv = curve.skipped_adversarial;
        let all = stage(round, "category", cat_samples(&props_tgt, data.target, oracle))?;
        pseudo_label_categories(&state.cat, &mut props_tgt, &all);
    }

    // box labels
    let fg = select_foreground(&props_src, &props_tgt, k);
    let (n_src_fg, n_tgt_fg) = fg.as_ref().map(|(s, t)| (s.len(), t.len())).unwrap_or((0, 0));
    let mut box_skipped = fg.is_none();
    let mut fallbacks = 0;
    if !cfg.no_box_adaptor {
        if let Some((s_fg, _)) = fg {
            let tgt_idx: Vec<usize> = (0..props_tgt.len())
                .filter(|&i| props_tgt[i].y_cls.is_some_and(|y| y < k))
                .collect();
            let mut t_fg: Vec<Proposal> = tgt_idx.iter().map(|&i| props_tgt[i].clone()).collect();
            let bcfg = cfg.boxes();
            let s = stage(round, "box", box_samples(&s_fg, data.source, oracle, bcfg.enlarge_factor, true))?;
            let t = stage(round, "box", box_samples(&t_fg, data.target, oracle, bcfg.enlarge_factor, false))?;
            stage(
                round,
                "box",
                train_box_adaptor(&mut state.boxes, &s, &t, &bcfg, stage_seed(seed, "box", round)),
            )?;
            fallbacks = pseudo_label_boxes(&state.boxes, &mut t_fg, &t);
            for (i, p) in tgt_idx.into_iter().zip(t_fg) {
                props_tgt[i].b_reg = p.b_reg;
            }
        }
    } else {
        box_skipped = true;
    }
    let regression = !box_skipped;

    // detector
    if cfg.standard_pseudo_label {
        let mut rng = rng_for(seed, "standard-pool", &[round as u64]);
        let mut pools = Vec::with_capacity(data.target.len());
        for scene in data.target {
            let gts: Vec<GtObject> = props_tgt
                .iter()
                .filter(|p| p.scene_id == scene.id())
                .filter(|p| p.y_cls.is_some_and(|y| y < k) && p.c_det >= cfg.pseudo_label_threshold)
                .map(|p| GtObject {
                    cls: p.y_cls.unwrap(),
                    bbox: if regression { p.b_reg.unwrap_or(p.b_det) } else { p.b_det },
                })
                .collect();
            let pool = build_pool(scene, &gts, &[], &cfg.arch(data.world).grid, oracle, k, 4, &mut rng);
            pools.push(stage(round, "detector", pool)?);
        }
        let tc = cfg.target();
        let dcfg = DetectorTrainConfig {
            steps: tc.steps,
            lr: tc.lr,
            lr_end: tc.lr_end,
            momentum: tc.momentum,
            weight_decay: tc.weight_decay,
            ..cfg.pretrain()
        };
        stage(round, "detector", train_supervised(&mut state.detector, &pools, &dcfg, &mut rng))?;
    } else {
        let samples = stage(round, "detector", target_samples(&props_tgt, data.target, oracle, k, regression))?;
        stage(
            round,
            "detector",
            train_target(&mut state.detector, &samples, &cfg.target(), None, stage_seed(seed, "detector", round)),
        )?;
    }

    let (report, miou_det) = match data.target_gt {
        Some(gt) => {
            let mut report = stage(round, "eval", evaluate_detector(&state.detector, data.target, oracle, gt, cfg))?;
            report.miou_cls = Some(category_quality(&props_tgt, gt, k));
            let (reg, det) = box_quality(&props_tgt, gt, k);
            report.miou_reg = reg;
            report.histogram_path = Some("iou_hist.csv".into());
            (Some(report), det)
        }
        None => (None, None),
    };
    Ok(RoundArtifacts {
        round,
        detector: state.detector.checkpoint(),
        cat: state.cat.checkpoint(),
        boxes: state.boxes.checkpoint(),
        metrics: RoundMetrics {
            round,
            report,
            miou_det,
            n_src_props: props_src.len(),
            n_tgt_props: props_tgt.len(),
            n_src_fg,
            n_tgt_fg,
            box_skipped,
            box_fallbacks: fallbacks,
            cat_skipped_adversarial: skipped_adv,
        },
        props_src,
        props_tgt,
    })
}

/// `(max_iou, c_det)` pairs of labeled source proposals.
pub fn source_iou_items(props: &[Proposal]) -> Vec<(f64, f64)> {
    props.iter().filter_map(|p| p.max_iou.map(|v| (v, p.c_det))).collect()
}

fn write_histogram(dir: &Path, props: &[Proposal], title: &str) -> Result<(), PipelineError> {
    let h = iou_histogram(&source_iou_items(props), 10, 0.0);
    h.write(&dir.join("iou_hist.csv"), &dir.join("iou_hist.svg"), title)?;
    Ok(())
}

/// Runs the full loop. With `out` set, every round is persisted as it finishes;
/// with `resume`, completed rounds found under `out` are loaded instead of rerun.
pub fn run_dadapt(
    cfg: &PipelineConfig,
    data: &PipelineData,
    pretrained: Option<DetectorModel>,
    out: Option<&Path>,
    resume: bool,
) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    if data.source.is_empty() || data.target.is_empty() {
        return Err(PipelineError::Config("both domains need at least one scene".into()));
    }
    let oracle = FeatureOracle::new(data.world);
    let mut times = StageTimes::default();
    let clock = std::time::Instant::now();

    let pre_path = out.map(|o| o.join("pretrained").join("detector.ckpt"));
    let pretrained = match (pretrained, &pre_path) {
        (Some(m), _) => m,
        (None, Some(p)) if resume && p.exists() => {
            stage(0, "restore", DetectorModel::from_checkpoint(cfg.arch(data.world), &Checkpoint::read(p)?))?
        }
        _ => pretrain(cfg, data, &oracle)?,
    };
    times.stages.push(("pretrain".into(), clock.elapsed().as_secs_f64()));
    let pretrained_metrics = match data.target_gt {
        Some(gt) => Some(stage(0, "eval", evaluate_detector(&pretrained, data.target, &oracle, gt, cfg))?),
        None => None,
    };
    if let (Some(o), Some(p)) = (out, &pre_path) {
        let dir = p.parent().unwrap();
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        pretrained.checkpoint().write(p)?;
        let mut props = stage(0, "propose", propose(&pretrained, data.source, &oracle, cfg.top_n, cfg.nms_iou))?;
        label_source_proposals(&mut props, data.source, data.world.num_classes);
        write_histogram(dir, &props, "source proposal IoU (pretrained)")?;
        if let Some(m) = &pretrained_metrics {
            write_json(&dir.join("metrics.json"), m)?;
        }
        let _ = o;
    }

    let mut state = LoopState::fresh(pretrained.clone(), cfg, data.world);
    let mut rounds = Vec::new();
    let mut start = 1;
    if let (Some(o), true) = (out, resume) {
        while start <= cfg.rounds && round_dir(o, start).join("metrics.json").exists() {
            rounds.push(load_round(o, start)?);
            start += 1;
        }
        if let Some(last) = rounds.last() {
            state = LoopState::restore(last, cfg, data.world)?;
        }
    }
    for r in start..=cfg.rounds {
        let t0 = std::time::Instant::now();
        let art = run_round(r, &mut state, cfg, data, &oracle)?;
        if let Some(o) = out {
            save_round(o, &art)?;
            write_histogram(&round_dir(o, r), &art.props_src, &format!("source proposal IoU (round {r})"))?;
        }
        times.stages.push((format!("round_{r}"), t0.elapsed().as_secs_f64()));
        rounds.push(art);
    }
    if let Some(o) = out {
        let dir = o.join("final");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        state.detector.checkpoint().write(&dir.join("detector.ckpt"))?;
    }
    Ok(RunOutput {
        detector: state.detector,
        pretrained,
        pretrained_metrics,
        rounds,
        times,
    })
}

/// Boxes of all ground-truth objects, for quick checks.
pub fn gt_boxes(scenes: &[Scene]) -> Vec<BBox> {
    scenes.iter().flat_map(|s| s.objects.iter().map(|o| o.bbox)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_toml_roundtrip_and_unknown_keys() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(PipelineConfig::from_toml("bogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml("rounds = 0\n").is_err());
        assert!(PipelineConfig::from_toml("eta = -0.1\n").is_err());
        let partial = PipelineConfig::from_toml("rounds = 2\nno_dd = true\n").unwrap();
        assert_eq!((partial.rounds, partial.no_dd), (2, true));
    }

    #[test]
    fn ablation_flags() {
        let mut cfg = PipelineConfig::default();
        cfg.apply_ablation("no_dd").unwrap();
        assert_eq!(cfg.boxes().eta, 0.0);
        cfg.apply_ablation("no_weight").unwrap();
        assert!(!cfg.cat().use_weight);
        assert!(cfg.apply_ablation("no_such").is_err());
    }
}
