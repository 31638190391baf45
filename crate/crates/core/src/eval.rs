//! Detection and adaptor metrics: AP/mAP at IoU 0.5, confusion-matrix mIoU,
//! paired box mIoU, Miss/Cls/Loc error breakdown and proposal IoU histograms.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::synthworld::SceneAnnotations;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("paired lists differ in length: {0} predictions vs {1} ground truths")]
    LengthMismatch(usize, usize),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub scene_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub cls: usize,
    pub score: f64,
}

/// Ground truth of all evaluated scenes, indexed by scene id.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub scenes: HashMap<String, Vec<(usize, BBox)>>,
}

impl GroundTruth {
    pub fn from_annotations(anns: &[SceneAnnotations]) -> Self {
        let scenes = anns
            .iter()
            .map(|a| (a.scene_id.clone(), a.objects.iter().map(|o| (o.cls, o.bbox)).collect()))
            .collect();
        Self { scenes }
    }

    pub fn count(&self, cls: usize) -> usize {
        self.scenes.values().flatten().filter(|(c, _)| *c == cls).count()
    }

    pub fn get(&self, scene_id: &str) -> &[(usize, BBox)] {
        self.scenes.get(scene_id).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// True-positive flags of class `k` detections in descending score order.
/// Ties keep input order.
pub fn match_detections(results: &[DetectionResult], gt: &GroundTruth, k: usize, iou_thresh: f64) -> Vec<bool> {
    let mut dets: Vec<&DetectionResult> = results.iter().filter(|d| d.cls == k).collect();
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used: HashMap<&str, Vec<bool>> = HashMap::new();
    dets.iter()
        .map(|d| {
            let gts = gt.get(&d.scene_id);
            let taken = used.entry(d.scene_id.as_str()).or_insert_with(|| vec![false; gts.len()]);
            let mut best: Option<(usize, f64)> = None;
            for (j, (c, b)) in gts.iter().enumerate() {
                if *c != k || taken[j] {
                    continue;
                }
                let v = iou(&d.bbox, b);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated area under the precision envelope.
pub fn ap_from_flags(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len() + 2);
    let mut precision = Vec::with_capacity(tp.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let mut hits = 0usize;
    for (i, t) in tp.iter().enumerate() {
        hits += *t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

pub fn average_precision(results: &[DetectionResult], gt: &GroundTruth, k: usize, iou_thresh: f64) -> f64 {
    ap_from_flags(&match_detections(results, gt, k, iou_thresh), gt.count(k))
}

/// Per-class AP and their mean over classes `0..num_classes`.
pub fn mean_average_precision(results: &[DetectionResult], gt: &GroundTruth, num_classes: usize) -> (Vec<f64>, f64) {
    let per: Vec<f64> = (0..num_classes).map(|k| average_precision(results, gt, k, 0.5)).collect();
    let m = per.iter().sum::<f64>() / num_classes.max(1) as f64;
    (per, m)
}

/// `n[i][j]`: items of true class `i` predicted as `j`; `t[i]`: row totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub n: Vec<Vec<u64>>,
    pub t: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            n: vec![vec![0; classes]; classes],
            t: vec![0; classes],
        }
    }

    pub fn from_pairs(truth: &[usize], pred: &[usize], classes: usize) -> Self {
        let mut c = Self::new(classes);
        for (&i, &j) in truth.iter().zip(pred) {
            c.add(i, j);
        }
        c
    }

    pub fn from_matrix(n: Vec<Vec<u64>>) -> Self {
        let t = n.iter().map(|r| r.iter().sum()).collect();
        Self { n, t }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.n[truth][pred] += 1;
        self.t[truth] += 1;
    }

    pub fn classes(&self) -> usize {
        self.t.len()
    }

    /// Per-class IoU; `None` where the denominator is zero.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes())
            .map(|i| {
                let col: u64 = (0..self.classes()).map(|j| self.n[j][i]).sum();
                let denom = self.t[i] + col - self.n[i][i];
                (denom > 0).then(|| self.n[i][i] as f64 / denom as f64)
            })
            .collect()
    }
}

/// Mean over all classes of `n_ii / (t_i + sum_j n_ji - n_ii)`; empty classes count as 0.
pub fn miou_cls(c: &ConfusionCounts) -> f64 {
    let per = c.class_iou();
    per.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / per.len().max(1) as f64
}

pub fn miou_reg(pred: &[BBox], gt: &[BBox]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| iou(p, g)).sum::<f64>() / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub correct: f64,
    pub miss: f64,
    pub cls: f64,
    pub loc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtOutcome {
    Correct,
    Cls,
    Loc,
    Miss,
}

/// Classifies each ground truth by the best detection covering it, with
/// priority correct > Cls > Loc > Miss.
pub fn classify_ground_truth(dets: &[&DetectionResult], cls: usize, b: &BBox) -> GtOutcome {
    let mut outcome = GtOutcome::Miss;
    for d in dets {
        let v = iou(&d.bbox, b);
        let o = if v >= 0.5 && d.cls == cls {
            GtOutcome::Correct
        } else if v >= 0.5 {
            GtOutcome::Cls
        } else if v >= 0.1 && d.cls == cls {
            GtOutcome::Loc
        } else {
            continue;
        };
        let rank = |o: GtOutcome| match o {
            GtOutcome::Correct => 0,
            GtOutcome::Cls => 1,
            GtOutcome::Loc => 2,
            GtOutcome::Miss => 3,
        };
        if rank(o) < rank(outcome) {
            outcome = o;
        }
    }
    outcome
}

pub fn error_analysis(results: &[DetectionResult], gt: &GroundTruth) -> ErrorBreakdown {
    let mut by_scene: HashMap<&str, Vec<&DetectionResult>> = HashMap::new();
    for d in results {
        by_scene.entry(d.scene_id.as_str()).or_default().push(d);
    }
    let mut counts = [0usize; 4];
    let mut total = 0usize;
    for (scene, objs) in &gt.scenes {
        let dets = by_scene.get(scene.as_str()).map(|v| v.as_slice()).unwrap_or(&[]);
        for (c, b) in objs {
            total += 1;
            counts[classify_ground_truth(dets, *c, b) as usize] += 1;
        }
    }
    if total == 0 {
        return ErrorBreakdown {
            correct: 1.0,
            ..Default::default()
        };
    }
    let f = |i: usize| counts[i] as f64 / total as f64;
    ErrorBreakdown {
        correct: f(GtOutcome::Correct as usize),
        cls: f(GtOutcome::Cls as usize),
        loc: f(GtOutcome::Loc as usize),
        miss: f(GtOutcome::Miss as usize),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl IouHistogram {
    /// Count of items in bins lying inside `(lo, hi)`.
    pub fn mass_between(&self, lo: f64, hi: f64) -> u64 {
        (0..self.counts.len())
            .filter(|&i| self.edges[i] >= lo - 1e-12 && self.edges[i + 1] <= hi + 1e-12)
            .map(|i| self.counts[i])
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for i in 0..self.counts.len() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], self.counts[i]);
        }
        s
    }

    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad) = (400.0, 240.0, 30.0);
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bw = (w - 2.0 * pad) / self.counts.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
        let _ = writeln!(s, r#"<text x="{pad}" y="18" font-size="12">{title}</text>"#);
        for (i, c) in self.counts.iter().enumerate() {
            let bh = (h - 2.0 * pad) * (*c as f64) / max;
            let x = pad + i as f64 * bw;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue"/>"#,
                x + 1.0,
                h - pad - bh,
                bw - 2.0,
                bh
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="9">{:.1}</text>"#,
                x,
                h - pad + 12.0,
                self.edges[i]
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, csv: &Path, svg: &Path, title: &str) -> Result<(), EvalError> {
        let io = |p: &Path| {
            let path = p.display().to_string();
            move |source| EvalError::Io { path, source }
        };
        std::fs::write(csv, self.to_csv()).map_err(io(csv))?;
        std::fs::write(svg, self.to_svg(title)).map_err(io(svg))
    }
}

/// Histogram of `(max_iou, confidence)` pairs with confidence at or above `threshold`.
pub fn iou_histogram(items: &[(f64, f64)], bins: usize, threshold: f64) -> IouHistogram {
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &(v, c) in items {
        if c < threshold {
            continue;
        }
        let i = ((v * bins as f64).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    IouHistogram { edges, counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_ap: Vec<f64>,
    pub map: f64,
    pub miou_cls: Option<f64>,
    pub miou_reg: Option<f64>,
    pub error_breakdown: ErrorBreakdown,
    pub histogram_path: Option<String>,
}
