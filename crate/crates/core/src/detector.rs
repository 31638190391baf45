//! Toy two-stage detector over crop features.
//!
//! Stage one scores a fixed anchor grid (objectness + class-agnostic anchor
//! refinement). Stage two classifies the refined boxes into `K + 1` classes
//! (index `K` is background) and predicts class-specific offsets.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    sigmoid, softmax_row, AutodiffError, Binding, Checkpoint, CheckpointError, Mlp, NodeId, ParamStore, SgdConfig,
    Tape,
};
use crate::eval::DetectionResult;
use crate::geometry::{decode_offsets, encode_offsets, iou, BBox, Offsets};
use crate::seed::rng_for;
use crate::synthworld::{FeatureOracle, GtObject, Scene, UnlabeledScene, WorldError};

/// Foreground threshold for assigning labels to anchors, RoIs and proposals.
pub const FG_IOU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("no training scenes")]
    EmptyTrainingSet,
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("proposal {index} is foreground (class {cls}) but has no box pseudo label")]
    MissingBoxLabel { index: usize, cls: usize },
    #[error("proposal {index} has no category pseudo label")]
    MissingClassLabel { index: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Anything crop features can be read from.
pub trait CropSource {
    fn scene_id(&self) -> &str;
    fn scene_size(&self) -> (f64, f64);
    fn crop(&self, oracle: &FeatureOracle, b: &BBox) -> Result<Vec<f64>, WorldError>;
}

impl CropSource for Scene {
    fn scene_id(&self) -> &str {
        &self.id
    }
    fn scene_size(&self) -> (f64, f64) {
        self.size()
    }
    fn crop(&self, oracle: &FeatureOracle, b: &BBox) -> Result<Vec<f64>, WorldError> {
        oracle.crop_feature(self, b)
    }
}

impl CropSource for UnlabeledScene {
    fn scene_id(&self) -> &str {
        self.id()
    }
    fn scene_size(&self) -> (f64, f64) {
        self.size()
    }
    fn crop(&self, oracle: &FeatureOracle, b: &BBox) -> Result<Vec<f64>, WorldError> {
        self.crop_feature(oracle, b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub stride: f64,
    pub scales: Vec<f64>,
}

impl AnchorGrid {
    /// Square anchors of every scale centred on a `stride` grid, clipped to the scene.
    pub fn anchors(&self, width: f64, height: f64) -> Vec<BBox> {
        let nx = (width / self.stride).ceil() as usize;
        let ny = (height / self.stride).ceil() as usize;
        let mut out = Vec::with_capacity(nx * ny * self.scales.len());
        for iy in 0..ny {
            for ix in 0..nx {
                let cx = (ix as f64 + 0.5) * self.stride;
                let cy = (iy as f64 + 0.5) * self.stride;
                for s in &self.scales {
                    out.push(BBox::from_center(cx, cy, *s, *s).clip(width, height));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorArch {
    pub feat_dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub grid: AnchorGrid,
}

#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub arch: DetectorArch,
    pub store: ParamStore,
    /// `d -> h -> 5`: objectness logit then anchor offsets.
    pub rpn: Mlp,
    /// `d -> h -> K + 1`.
    pub cls: Mlp,
    /// `d -> h -> 4K`, class-specific offsets.
    pub reg: Mlp,
}

impl DetectorModel {
    /// Glorot init, with the output layers of both box regressors zeroed.
    pub fn new(arch: DetectorArch, seed: u64) -> Self {
        let mut rng = rng_for(seed, "detector-init", &[]);
        let mut store = ParamStore::new(SgdConfig::default());
        let (d, h, k) = (arch.feat_dim, arch.hidden, arch.num_classes);
        let rpn = Mlp::new(&mut store, "rpn", &[d, h, 5], &mut rng);
        let cls = Mlp::new(&mut store, "cls", &[d, h, k + 1], &mut rng);
        let reg = Mlp::new(&mut store, "reg", &[d, h, 4 * k], &mut rng);
        rpn.last().zero(&mut store);
        reg.last().zero(&mut store);
        Self {
            arch,
            store,
            rpn,
            cls,
            reg,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn background(&self) -> usize {
        self.arch.num_classes
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn from_checkpoint(arch: DetectorArch, ckpt: &Checkpoint) -> Result<Self, DetectorError> {
        let mut m = Self::new(arch, 0);
        ckpt.restore_into(&mut m.store)?;
        Ok(m)
    }

    fn infer(&self, mlp: &Mlp, features: &[f64], rows: usize) -> Vec<f64> {
        if rows == 0 {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let x = tape.matrix(rows, mlp.in_dim(), features.to_vec());
        let y = mlp.forward(&mut tape, &b, x);
        tape.data(y).to_vec()
    }
}

/// Greedy non-maximum suppression; returns kept indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&j| iou(&boxes[i], &boxes[j]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// A detector output consumed by the adaptors, with optional labels attached
/// along the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub scene_id: String,
    #[serde(rename = "box")]
    pub b_det: BBox,
    pub y_det: usize,
    pub c_det: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_gt: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_gt: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_cls: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_reg: Option<BBox>,
}

impl Proposal {
    pub fn new(scene_id: &str, b_det: BBox, y_det: usize, c_det: f64) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            b_det,
            y_det,
            c_det,
            y_gt: None,
            b_gt: None,
            max_iou: None,
            y_cls: None,
            b_reg: None,
        }
    }
}

struct StageOne {
    boxes: Vec<BBox>,
    objectness: Vec<f64>,
}

/// Anchor scoring, refinement, NMS and top-n selection for one scene.
fn stage_one<S: CropSource>(
    model: &DetectorModel,
    scene: &S,
    oracle: &FeatureOracle,
    top_n: usize,
    nms_iou: f64,
) -> Result<StageOne, DetectorError> {
    let (w, h) = scene.scene_size();
    let anchors = model.arch.grid.anchors(w, h);
    let d = model.arch.feat_dim;
    let mut feats = Vec::with_capacity(anchors.len() * d);
    for a in &anchors {
        feats.extend(scene.crop(oracle, a)?);
    }
    let out = model.infer(&model.rpn, &feats, anchors.len());
    let mut boxes = Vec::with_capacity(anchors.len());
    let mut scores = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.iter().enumerate() {
        let row = &out[i * 5..(i + 1) * 5];
        scores.push(sigmoid(row[0]));
        let refined = decode_offsets(a, &Offsets::from_slice(&row[1..5]), Some((w, h)))
            .ok()
            .filter(|b| b.has_positive_size())
            .unwrap_or(*a);
        boxes.push(refined);
    }
    let keep: Vec<usize> = nms(&boxes, &scores, nms_iou).into_iter().take(top_n).collect();
    Ok(StageOne {
        boxes: keep.iter().map(|&i| boxes[i]).collect(),
        objectness: keep.iter().map(|&i| scores[i]).collect(),
    })
}

struct StageTwo {
    probs: Vec<f64>,
    offsets: Vec<f64>,
}

fn stage_two<S: CropSource>(
    model: &DetectorModel,
    scene: &S,
    oracle: &FeatureOracle,
    boxes: &[BBox],
) -> Result<StageTwo, DetectorError> {
    let d = model.arch.feat_dim;
    let mut feats = Vec::with_capacity(boxes.len() * d);
    for b in boxes {
        feats.extend(scene.crop(oracle, b)?);
    }
    let logits = model.infer(&model.cls, &feats, boxes.len());
    let c = model.num_classes() + 1;
    let mut probs = vec![0.0; logits.len()];
    for r in 0..boxes.len() {
        softmax_row(&logits[r * c..(r + 1) * c], &mut probs[r * c..(r + 1) * c]);
    }
    let offsets = model.infer(&model.reg, &feats, boxes.len());
    Ok(StageTwo { probs, offsets })
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |a, j| if row[j] > row[a] { j } else { a })
}

/// Confidence of the predicted label across both stages: objectness times the
/// class probability for a foreground label, `(1 - objectness)` times the
/// background probability otherwise.
pub fn proposal_confidence(objectness: f64, probs: &[f64], background: usize) -> (usize, f64) {
    let y = argmax(probs);
    let c = if y == background {
        (1.0 - objectness) * probs[y]
    } else {
        objectness * probs[y]
    };
    (y, c.clamp(0.0, 1.0))
}

pub fn propose<S: CropSource>(
    model: &DetectorModel,
    scenes: &[S],
    oracle: &FeatureOracle,
    top_n: usize,
    nms_iou: f64,
) -> Result<Vec<Proposal>, DetectorError> {
    let mut out = Vec::new();
    if top_n == 0 {
        return Ok(out);
    }
    let c = model.num_classes() + 1;
    for scene in scenes {
        let one = stage_one(model, scene, oracle, top_n, nms_iou)?;
        let two = stage_two(model, scene, oracle, &one.boxes)?;
        for (i, b) in one.boxes.iter().enumerate() {
            let (y, conf) = proposal_confidence(one.objectness[i], &two.probs[i * c..(i + 1) * c], model.background());
            out.push(Proposal::new(scene.scene_id(), *b, y, conf));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub top_n: usize,
}

/// Final detections, sorted by descending score within each scene.
pub fn detect<S: CropSource>(
    model: &DetectorModel,
    scenes: &[S],
    oracle: &FeatureOracle,
    params: &DetectParams,
) -> Result<Vec<DetectionResult>, DetectorError> {
    let k = model.num_classes();
    let c = k + 1;
    let mut out = Vec::new();
    for scene in scenes {
        let size = scene.scene_size();
        let one = stage_one(model, scene, oracle, params.top_n, params.nms_iou)?;
        let two = stage_two(model, scene, oracle, &one.boxes)?;
        for cls in 0..k {
            let mut boxes = Vec::new();
            let mut scores = Vec::new();
            for (i, b) in one.boxes.iter().enumerate() {
                let score = two.probs[i * c + cls];
                if score < params.score_thresh {
                    continue;
                }
                let t = Offsets::from_slice(&two.offsets[i * 4 * k + 4 * cls..i * 4 * k + 4 * cls + 4]);
                let refined = decode_offsets(b, &t, Some(size))
                    .ok()
                    .filter(|r| r.has_positive_size())
                    .unwrap_or(*b);
                boxes.push(refined);
                scores.push(score);
            }
            for i in nms(&boxes, &scores, params.nms_iou) {
                out.push(DetectionResult {
                    scene_id: scene.scene_id().to_string(),
                    bbox: boxes[i],
                    cls,
                    score: scores[i],
                });
            }
        }
        let start = out.len()
            - out
                .iter()
                .rev()
                .take_while(|d| d.scene_id == scene.scene_id())
                .count();
        out[start..].sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    Ok(out)
}

/// Max-IoU assignment of one box against ground truth: `(label, b_gt, max_iou)`.
pub fn assign_label(b: &BBox, gts: &[GtObject], background: usize) -> (usize, Option<BBox>, f64) {
    let mut best = (background, None, 0.0);
    for g in gts {
        let v = iou(b, &g.bbox);
        if v > best.2 {
            best = (g.cls, Some(g.bbox), v);
        }
    }
    if best.2 >= FG_IOU {
        best
    } else {
        (background, None, best.2)
    }
}

/// Attaches `y_gt`, `b_gt` and `max_iou` to proposals of labeled scenes.
pub fn label_source_proposals(proposals: &mut [Proposal], scenes: &[Scene], num_classes: usize) {
    let index: std::collections::HashMap<&str, &Scene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    for p in proposals.iter_mut() {
        let gts: Vec<GtObject> = index
            .get(p.scene_id.as_str())
            .map(|s| s.objects.iter().map(|o| GtObject { cls: o.cls, bbox: o.bbox }).collect())
            .unwrap_or_default();
        let (y, b, v) = assign_label(&p.b_det, &gts, num_classes);
        p.y_gt = Some(y);
        p.b_gt = b;
        p.max_iou = Some(v);
    }
}

// ---------------------------------------------------------------------------
// Supervised (source) training: the four-term detection loss.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Learning rate reached at the last step (exponential decay); equal to `lr` for a constant schedule.
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scenes_per_step: usize,
    pub rpn_batch: usize,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub jitter_per_object: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.02,
            lr_end: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            scenes_per_step: 2,
            rpn_batch: 32,
            roi_batch: 32,
            roi_fg_fraction: 0.5,
            jitter_per_object: 12,
        }
    }
}

pub(crate) fn lr_at(step: usize, steps: usize, lr: f64, lr_end: f64) -> f64 {
    if steps <= 1 || lr_end == lr {
        return lr;
    }
    lr * (lr_end / lr).powf(step as f64 / (steps - 1) as f64)
}

/// Precomputed anchor and RoI samples of one labeled scene.
#[derive(Debug, Clone)]
pub struct SupervisedPool {
    pub anchor_feats: Vec<Vec<f64>>,
    pub anchor_pos: Vec<bool>,
    pub anchor_targets: Vec<[f64; 4]>,
    pub roi_feats: Vec<Vec<f64>>,
    pub roi_labels: Vec<usize>,
    pub roi_targets: Vec<[f64; 4]>,
}

fn jitter(rng: &mut ChaCha8Rng, g: &BBox, size: (f64, f64)) -> BBox {
    let (cx, cy) = g.center();
    let (w, h) = (g.width(), g.height());
    let b = BBox::from_center(
        cx + rng.random_range(-0.35..0.35) * w,
        cy + rng.random_range(-0.35..0.35) * h,
        w * rng.random_range(-0.4f64..0.4).exp(),
        h * rng.random_range(-0.4f64..0.4).exp(),
    )
    .clip(size.0, size.1);
    if b.has_positive_size() {
        b
    } else {
        *g
    }
}

/// Builds the training pool of a scene from ground truth (or pseudo ground
/// truth). `extra_rois` are labeled against `gts` like any other RoI.
pub fn build_pool<S: CropSource>(
    scene: &S,
    gts: &[GtObject],
    extra_rois: &[BBox],
    grid: &AnchorGrid,
    oracle: &FeatureOracle,
    num_classes: usize,
    jitter_per_object: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SupervisedPool, DetectorError> {
    let size = scene.scene_size();
    let anchors = grid.anchors(size.0, size.1);
    let mut pos = vec![false; anchors.len()];
    let mut matched: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut best_iou = vec![0.0; anchors.len()];
    for (i, a) in anchors.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(a, &g.bbox);
            if v > best_iou[i] {
                best_iou[i] = v;
                matched[i] = Some(j);
            }
        }
        pos[i] = best_iou[i] >= FG_IOU;
    }
    // every object gets at least its best anchor
    for (j, g) in gts.iter().enumerate() {
        let best = (0..anchors.len()).max_by(|&a, &b| iou(&anchors[a], &g.bbox).total_cmp(&iou(&anchors[b], &g.bbox)));
        if let Some(i) = best {
            if iou(&anchors[i], &g.bbox) > 0.0 {
                pos[i] = true;
                matched[i] = Some(j);
            }
        }
    }
    let mut pool = SupervisedPool {
        anchor_feats: Vec::with_capacity(anchors.len()),
        anchor_pos: pos.clone(),
        anchor_targets: Vec::with_capacity(anchors.len()),
        roi_feats: Vec::new(),
        roi_labels: Vec::new(),
        roi_targets: Vec::new(),
    };
    for (i, a) in anchors.iter().enumerate() {
        pool.anchor_feats.push(scene.crop(oracle, a)?);
        let t = match (pos[i], matched[i]) {
            (true, Some(j)) => encode_offsets(a, &gts[j].bbox).map(|t| t.to_array()).unwrap_or([0.0; 4]),
            _ => [0.0; 4],
        };
        pool.anchor_targets.push(t);
    }
    let mut rois: Vec<BBox> = anchors.clone();
    for g in gts {
        rois.push(g.bbox);
        for _ in 0..jitter_per_object {
            rois.push(jitter(rng, &g.bbox, size));
        }
    }
    rois.extend_from_slice(extra_rois);
    for r in rois {
        let (label, b_gt, _) = assign_label(&r, gts, num_classes);
        let t = match b_gt {
            Some(g) => encode_offsets(&r, &g).map(|t| t.to_array()).unwrap_or([0.0; 4]),
            None => [0.0; 4],
        };
        pool.roi_feats.push(scene.crop(oracle, &r)?);
        pool.roi_labels.push(label);
        pool.roi_targets.push(t);
    }
    Ok(pool)
}

/// One minibatch of the four-term source objective.
#[derive(Debug, Clone, Default)]
pub struct SourceBatch {
    pub anchor_feats: Vec<f64>,
    pub anchor_labels: Vec<f64>,
    /// `(row, offsets)` of positive anchors.
    pub anchor_targets: Vec<(usize, [f64; 4])>,
    pub roi_feats: Vec<f64>,
    pub roi_labels: Vec<usize>,
    pub roi_targets: Vec<(usize, [f64; 4])>,
}

impl SourceBatch {
    pub fn n_anchors(&self) -> usize {
        self.anchor_labels.len()
    }
    pub fn n_rois(&self) -> usize {
        self.roi_labels.len()
    }
}

pub fn sample_source_batch(
    pools: &[SupervisedPool],
    cfg: &DetectorTrainConfig,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> SourceBatch {
    let mut batch = SourceBatch::default();
    let per_scene_rpn = (cfg.rpn_batch / cfg.scenes_per_step.max(1)).max(2);
    let per_scene_roi = (cfg.roi_batch / cfg.scenes_per_step.max(1)).max(2);
    for _ in 0..cfg.scenes_per_step.max(1) {
        let pool = &pools[rng.random_range(0..pools.len())];
        let mut pos: Vec<usize> = (0..pool.anchor_pos.len()).filter(|&i| pool.anchor_pos[i]).collect();
        let mut neg: Vec<usize> = (0..pool.anchor_pos.len()).filter(|&i| !pool.anchor_pos[i]).collect();
        pos.shuffle(rng);
        neg.shuffle(rng);
        pos.truncate(per_scene_rpn / 2);
        neg.truncate(per_scene_rpn - pos.len());
        for (i, is_pos) in pos.iter().map(|&i| (i, true)).chain(neg.iter().map(|&i| (i, false))) {
            if is_pos {
                batch.anchor_targets.push((batch.anchor_labels.len(), pool.anchor_targets[i]));
            }
            batch.anchor_labels.push(is_pos as u8 as f64);
            batch.anchor_feats.extend_from_slice(&pool.anchor_feats[i]);
        }
        let mut fg: Vec<usize> = (0..pool.roi_labels.len()).filter(|&i| pool.roi_labels[i] < num_classes).collect();
        let mut bg: Vec<usize> = (0..pool.roi_labels.len()).filter(|&i| pool.roi_labels[i] >= num_classes).collect();
        fg.shuffle(rng);
        bg.shuffle(rng);
        fg.truncate((per_scene_roi as f64 * cfg.roi_fg_fraction).round() as usize);
        bg.truncate(per_scene_roi - fg.len());
        for i in fg.into_iter().chain(bg) {
            let label = pool.roi_labels[i];
            if label < num_classes {
                batch.roi_targets.push((batch.roi_labels.len(), pool.roi_targets[i]));
            }
            batch.roi_labels.push(label);
            batch.roi_feats.extend_from_slice(&pool.roi_feats[i]);
        }
    }
    batch
}

/// Tape nodes of the four source loss terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct SourceLoss {
    pub rpn_cls: NodeId,
    pub rpn_reg: NodeId,
    pub roi_cls: NodeId,
    pub roi_reg: NodeId,
    pub total: NodeId,
}

/// `-mean(y ln p + (1 - y) ln(1 - p))` from primitives.
pub fn binary_cross_entropy(tape: &mut Tape, probs: NodeId, targets: &[f64]) -> NodeId {
    let shape = tape.shape(probs).to_vec();
    let y = tape.leaf(&shape, targets.to_vec());
    let ny = tape.leaf(&shape, targets.iter().map(|t| 1.0 - t).collect());
    let ones = tape.leaf(&shape, vec![1.0; targets.len()]);
    let lp = tape.log(probs);
    let q = tape.sub(ones, probs);
    let lq = tape.log(q);
    let a = tape.mul(y, lp);
    let b = tape.mul(ny, lq);
    let s = tape.add(a, b);
    let m = tape.mean(s);
    tape.scale(m, -1.0)
}

/// Sum over rows and coordinates of smooth-L1(pred - target), divided by `norm`.
pub fn regression_loss(tape: &mut Tape, pred: NodeId, targets: &[f64], norm: f64) -> NodeId {
    let shape = tape.shape(pred).to_vec();
    let t = tape.leaf(&shape, targets.to_vec());
    let diff = tape.sub(pred, t);
    let sl = tape.smooth_l1(diff);
    let s = tape.sum(sl);
    tape.scale(s, 1.0 / norm)
}

fn gather_rows(flat: &[f64], width: usize, rows: &[usize]) -> Vec<f64> {
    rows.iter().flat_map(|&r| flat[r * width..(r + 1) * width].iter().cloned()).collect()
}

pub fn source_loss(
    tape: &mut Tape,
    model: &DetectorModel,
    b: &Binding,
    batch: &SourceBatch,
) -> Result<SourceLoss, DetectorError> {
    let d = model.arch.feat_dim;
    let k = model.num_classes();
    let x = tape.matrix(batch.n_anchors(), d, batch.anchor_feats.clone());
    let out = model.rpn.forward(tape, b, x);
    let logit = tape.slice_cols(out, 0, 1);
    let p = tape.sigmoid(logit);
    let rpn_cls = binary_cross_entropy(tape, p, &batch.anchor_labels);
    let rpn_reg = if batch.anchor_targets.is_empty() {
        tape.scalar_leaf(0.0)
    } else {
        let rows: Vec<usize> = batch.anchor_targets.iter().map(|(r, _)| *r).collect();
        let offs = tape.slice_cols(out, 1, 5);
        let sel = tape.leaf(&[rows.len(), batch.n_anchors()], one_hot_rows(&rows, batch.n_anchors()));
        let picked = tape.matmul(sel, offs);
        let targets: Vec<f64> = batch.anchor_targets.iter().flat_map(|(_, t)| *t).collect();
        regression_loss(tape, picked, &targets, rows.len() as f64)
    };
    let xr = tape.matrix(batch.n_rois(), d, batch.roi_feats.clone());
    let logits = model.cls.forward(tape, b, xr);
    let roi_cls = tape.cross_entropy(logits, &batch.roi_labels)?;
    let roi_reg = if batch.roi_targets.is_empty() {
        tape.scalar_leaf(0.0)
    } else {
        let rows: Vec<usize> = batch.roi_targets.iter().map(|(r, _)| *r).collect();
        let xf = tape.matrix(rows.len(), d, gather_rows(&batch.roi_feats, d, &rows));
        let out = model.reg.forward(tape, b, xf);
        let starts: Vec<usize> = rows.iter().map(|&r| 4 * batch.roi_labels[r]).collect();
        let picked = tape.select_blocks(out, &starts, 4);
        let targets: Vec<f64> = batch.roi_targets.iter().flat_map(|(_, t)| *t).collect();
        regression_loss(tape, picked, &targets, rows.len() as f64)
    };
    let _ = k;
    let s1 = tape.add(rpn_cls, rpn_reg);
    let s2 = tape.add(roi_cls, roi_reg);
    let total = tape.add(s1, s2);
    Ok(SourceLoss {
        rpn_cls,
        rpn_reg,
        roi_cls,
        roi_reg,
        total,
    })
}

pub(crate) fn one_hot_rows(rows: &[usize], n: usize) -> Vec<f64> {
    let mut m = vec![0.0; rows.len() * n];
    for (i, &r) in rows.iter().enumerate() {
        m[i * n + r] = 1.0;
    }
    m
}

/// Per-step values of the four source loss terms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceCurve {
    pub rpn_cls: Vec<f64>,
    pub rpn_reg: Vec<f64>,
    pub roi_cls: Vec<f64>,
    pub roi_reg: Vec<f64>,
    pub total: Vec<f64>,
}

/// Runs `cfg.steps` SGD steps of the four-term objective over the pools.
pub fn train_supervised(
    model: &mut DetectorModel,
    pools: &[SupervisedPool],
    cfg: &DetectorTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SourceCurve, DetectorError> {
    if pools.is_empty() {
        return Err(DetectorError::EmptyTrainingSet);
    }
    model.store.hyper = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    model.store.reset_momentum();
    let mut curve = SourceCurve::default();
    for step in 0..cfg.steps {
        let batch = sample_source_batch(pools, cfg, model.num_classes(), rng);
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape);
        let loss = source_loss(&mut tape, model, &b, &batch)?;
        let total = tape.scalar(loss.total);
        if !total.is_finite() {
            return Err(DetectorError::Diverged {
                step,
                reason: format!("loss {total}"),
            });
        }
        curve.rpn_cls.push(tape.scalar(loss.rpn_cls));
        curve.rpn_reg.push(tape.scalar(loss.rpn_reg));
        curve.roi_cls.push(tape.scalar(loss.roi_cls));
        curve.roi_reg.push(tape.scalar(loss.roi_reg));
        curve.total.push(total);
        tape.backward(loss.total)?;
        model
            .store
            .sgd_step(&tape, &b, lr_at(step, cfg.steps, cfg.lr, cfg.lr_end))
            .map_err(|e| DetectorError::Diverged {
                step,
                reason: e.to_string(),
            })?;
    }
    Ok(curve)
}

/// Source-domain pretraining from a fresh model.
pub fn pretrain_source(
    scenes: &[Scene],
    oracle: &FeatureOracle,
    arch: &DetectorArch,
    cfg: &DetectorTrainConfig,
    seed: u64,
) -> Result<(DetectorModel, SourceCurve), DetectorError> {
    if scenes.is_empty() {
        return Err(DetectorError::EmptyTrainingSet);
    }
    let mut model = DetectorModel::new(arch.clone(), seed);
    let mut rng = rng_for(seed, "pretrain", &[]);
    let pools = scenes
        .iter()
        .map(|s| {
            let gts: Vec<GtObject> = s.objects.iter().map(|o| GtObject { cls: o.cls, bbox: o.bbox }).collect();
            build_pool(s, &gts, &[], &arch.grid, oracle, arch.num_classes, cfg.jitter_per_object, &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let curve = train_supervised(&mut model, &pools, cfg, &mut rng)?;
    Ok((model, curve))
}

// ---------------------------------------------------------------------------
// Target training on pseudo labels.

/// Features of one pseudo-labeled target proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSample {
    pub feat_det: Vec<f64>,
    pub feat_reg: Vec<f64>,
    pub label: usize,
    /// Offsets from `b_det` to `b_reg`; present for foreground labels.
    pub target: Option<[f64; 4]>,
}

/// Turns pseudo-labeled proposals into training samples. With `regression`
/// off, box labels are not required and the `b_reg` crop falls back to `b_det`.
pub fn target_samples<S: CropSource>(
    proposals: &[Proposal],
    scenes: &[S],
    oracle: &FeatureOracle,
    num_classes: usize,
    regression: bool,
) -> Result<Vec<TargetSample>, DetectorError> {
    let index: std::collections::HashMap<&str, &S> = scenes.iter().map(|s| (s.scene_id(), s)).collect();
    let mut out = Vec::with_capacity(proposals.len());
    for (i, p) in proposals.iter().enumerate() {
        let label = p.y_cls.ok_or(DetectorError::MissingClassLabel { index: i })?;
        let fg = label < num_classes;
        let b_reg = match (fg && regression, p.b_reg) {
            (true, Some(b)) => b,
            (true, None) => return Err(DetectorError::MissingBoxLabel { index: i, cls: label }),
            (false, Some(b)) if regression => b,
            _ => p.b_det,
        };
        let scene = index[p.scene_id.as_str()];
        let target = if fg && regression {
            Some(encode_offsets(&p.b_det, &b_reg).map(|t| t.to_array()).unwrap_or([0.0; 4]))
        } else {
            None
        };
        out.push(TargetSample {
            feat_det: scene.crop(oracle, &p.b_det)?,
            feat_reg: scene.crop(oracle, &b_reg)?,
            label,
            target,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct TargetLoss {
    pub cls_det: NodeId,
    pub cls_reg: NodeId,
    pub reg: NodeId,
    pub total: NodeId,
}

/// Pseudo-label objective: classification at `b_det`, classification at
/// `b_reg`, and regression from `b_det` toward `b_reg` on foreground samples
/// only. The regression sum is divided by the full batch size.
pub fn target_loss(
    tape: &mut Tape,
    model: &DetectorModel,
    b: &Binding,
    batch: &[&TargetSample],
) -> Result<TargetLoss, DetectorError> {
    let d = model.arch.feat_dim;
    let n = batch.len();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let xd = tape.matrix(n, d, batch.iter().flat_map(|s| s.feat_det.iter().cloned()).collect());
    let ld = model.cls.forward(tape, b, xd);
    let cls_det = tape.cross_entropy(ld, &labels)?;
    let xr = tape.matrix(n, d, batch.iter().flat_map(|s| s.feat_reg.iter().cloned()).collect());
    let lr = model.cls.forward(tape, b, xr);
    let cls_reg = tape.cross_entropy(lr, &labels)?;
    let fg: Vec<&&TargetSample> = batch.iter().filter(|s| s.target.is_some()).collect();
    let reg = if fg.is_empty() {
        tape.scalar_leaf(0.0)
    } else {
        let xf = tape.matrix(fg.len(), d, fg.iter().flat_map(|s| s.feat_det.iter().cloned()).collect());
        let out = model.reg.forward(tape, b, xf);
        let starts: Vec<usize> = fg.iter().map(|s| 4 * s.label).collect();
        let picked = tape.select_blocks(out, &starts, 4);
        let targets: Vec<f64> = fg.iter().flat_map(|s| s.target.unwrap()).collect();
        regression_loss(tape, picked, &targets, n as f64)
    };
    let s = tape.add(cls_det, cls_reg);
    let total = tape.add(s, reg);
    Ok(TargetLoss {
        cls_det,
        cls_reg,
        reg,
        total,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetCurve {
    pub cls_det: Vec<f64>,
    pub cls_reg: Vec<f64>,
    pub reg: Vec<f64>,
    pub total: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub lr_end: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Weight of an optional source-replay term (four-term loss on source pools).
    pub source_replay: f64,
    /// Expected share of pseudo-foreground samples per batch; `None` samples uniformly.
    pub fg_fraction: Option<f64>,
}

/// Fine-tunes the detector on pseudo-labeled target samples.
pub fn train_target(
    model: &mut DetectorModel,
    samples: &[TargetSample],
    cfg: &TargetTrainConfig,
    replay: Option<(&[SupervisedPool], &DetectorTrainConfig)>,
    seed: u64,
) -> Result<TargetCurve, DetectorError> {
    if samples.is_empty() {
        return Err(DetectorError::EmptyTrainingSet);
    }
    model.store.hyper = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    model.store.reset_momentum();
    let mut rng = rng_for(seed, "train-target", &[]);
    let mut curve = TargetCurve::default();
    let k = model.num_classes();
    let (fg, bg): (Vec<&TargetSample>, Vec<&TargetSample>) = samples.iter().partition(|s| s.label < k);
    let pick = |rng: &mut ChaCha8Rng| -> &TargetSample {
        match cfg.fg_fraction {
            Some(f) if !fg.is_empty() && !bg.is_empty() => {
                let pool = if rng.random::<f64>() < f { &fg } else { &bg };
                pool[rng.random_range(0..pool.len())]
            }
            _ => &samples[rng.random_range(0..samples.len())],
        }
    };
    for step in 0..cfg.steps {
        let batch: Vec<&TargetSample> = (0..cfg.batch.min(samples.len()).max(1)).map(|_| pick(&mut rng)).collect();
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape);
        let loss = target_loss(&mut tape, model, &b, &batch)?;
        let mut total = loss.total;
        if let (Some((pools, dcfg)), true) = (replay, cfg.source_replay > 0.0) {
            let sb = sample_source_batch(pools, dcfg, model.num_classes(), &mut rng);
            let sl = source_loss(&mut tape, model, &b, &sb)?;
            let w = tape.scale(sl.total, cfg.source_replay);
            total = tape.add(total, w);
        }
        let value = tape.scalar(total);
        if !value.is_finite() {
            return Err(DetectorError::Diverged {
                step,
                reason: format!("loss {value}"),
            });
        }
        curve.cls_det.push(tape.scalar(loss.cls_det));
        curve.cls_reg.push(tape.scalar(loss.cls_reg));
        curve.reg.push(tape.scalar(loss.reg));
        curve.total.push(value);
        tape.backward(total)?;
        model
            .store
            .sgd_step(&tape, &b, lr_at(step, cfg.steps, cfg.lr, cfg.lr_end))
            .map_err(|e| DetectorError::Diverged {
                step,
                reason: e.to_string(),
            })?;
    }
    Ok(curve)
}
