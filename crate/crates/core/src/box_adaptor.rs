//! Box adaptor: feature extractor `F`, main regressor `G` and adversarial
//! regressor `A` (same shape as `G`). `A` maximizes its disagreement with `G`
//! on target proposals while minimizing it on source proposals; `F` plays the
//! opposite side through gradient reversal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Checkpoint, CheckpointError, Mlp, NodeId, ParamStore, SgdConfig, Tape};
use crate::detector::{CropSource, DetectorError, Proposal};
use crate::geometry::{decode_offsets, encode_offsets, enlarge, BBox, Offsets};
use crate::seed::rng_for;
use crate::synthworld::FeatureOracle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAdaptorConfig {
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub eta: f64,
    pub enlarge_factor: f64,
}

impl Default for BoxAdaptorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 2000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 32,
            eta: 0.1,
            enlarge_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoxAdaptor {
    pub num_classes: usize,
    pub store: ParamStore,
    pub f: Mlp,
    pub g: Mlp,
    pub adv: Mlp,
}

impl BoxAdaptor {
    pub fn new(feat_dim: usize, num_classes: usize, cfg: &BoxAdaptorConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "box-init", &[]);
        let mut store = ParamStore::new(SgdConfig::default());
        let h = cfg.hidden;
        let f = Mlp::new(&mut store, "box.f", &[feat_dim, h], &mut rng);
        let g = Mlp::new(&mut store, "box.g", &[h, h, 4 * num_classes], &mut rng);
        let adv = Mlp::new(&mut store, "box.adv", &[h, h, 4 * num_classes], &mut rng);
        g.last().zero(&mut store);
        let mut m = Self {
            num_classes,
            store,
            f,
            g,
            adv,
        };
        m.reset_adversary();
        m
    }

    /// Copies the main regressor's weights into the adversarial regressor.
    pub fn reset_adversary(&mut self) {
        self.store.copy_prefix("box.g.", "box.adv.");
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        ckpt.restore_into(&mut self.store)
    }

    /// Rows of `G(F(x))`, `4K` weighted offsets each.
    pub fn offsets(&self, feats: &[f64], rows: usize) -> Vec<f64> {
        if rows == 0 {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let x = tape.matrix(rows, self.f.in_dim(), feats.to_vec());
        let f = self.f.forward(&mut tape, &b, x);
        let g = self.g.forward(&mut tape, &b, f);
        tape.data(g).to_vec()
    }
}

/// A foreground proposal prepared for the box adaptor.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSample {
    /// Crop feature at the enlarged box.
    pub feat: Vec<f64>,
    pub b_det: BBox,
    pub scene_size: (f64, f64),
    /// Regression channel: `y_gt` on source, `y_cls` on target.
    pub cls: usize,
    /// Offsets from `b_det` to `b_gt` (source only).
    pub target: Option<[f64; 4]>,
}

/// Keeps source proposals with a foreground `y_gt` and target proposals with a
/// foreground `y_cls`. `None` when either side is empty.
pub fn select_foreground(
    src: &[Proposal],
    tgt: &[Proposal],
    num_classes: usize,
) -> Option<(Vec<Proposal>, Vec<Proposal>)> {
    let s: Vec<Proposal> = src
        .iter()
        .filter(|p| p.y_gt.is_some_and(|y| y < num_classes))
        .cloned()
        .collect();
    let t: Vec<Proposal> = tgt
        .iter()
        .filter(|p| p.y_cls.is_some_and(|y| y < num_classes))
        .cloned()
        .collect();
    if s.is_empty() || t.is_empty() {
        None
    } else {
        Some((s, t))
    }
}

/// `source` selects `y_gt`/`b_gt`; otherwise `y_cls` with no target.
pub fn box_samples<S: CropSource>(
    proposals: &[Proposal],
    scenes: &[S],
    oracle: &FeatureOracle,
    enlarge_factor: f64,
    source: bool,
) -> Result<Vec<BoxSample>, DetectorError> {
    let index: std::collections::HashMap<&str, &S> = scenes.iter().map(|s| (s.scene_id(), s)).collect();
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let scene = index[p.scene_id.as_str()];
            let size = scene.scene_size();
            let feat = scene.crop(oracle, &enlarge(&p.b_det, enlarge_factor, size))?;
            let (cls, target) = if source {
                let t = p
                    .b_gt
                    .and_then(|g| encode_offsets(&p.b_det, &g).ok())
                    .map(|t| scale_offsets(t.to_array()));
                (p.y_gt.unwrap_or(0), t)
            } else {
                (p.y_cls.ok_or(DetectorError::MissingClassLabel { index: i })?, None)
            };
            Ok(BoxSample {
                feat,
                b_det: p.b_det,
                scene_size: size,
                cls,
                target,
            })
        })
        .collect()
}

/// `G` and `A` work in offset units multiplied by these per-coordinate weights
/// (`dx, dy, dw, dh`), so typical regression targets are of order one.
pub const OFFSET_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

pub fn scale_offsets(t: [f64; 4]) -> [f64; 4] {
    std::array::from_fn(|c| t[c] * OFFSET_WEIGHTS[c])
}

pub fn unscale_offsets(t: &[f64]) -> [f64; 4] {
    std::array::from_fn(|c| t[c] / OFFSET_WEIGHTS[c])
}

/// Per-coordinate disagreement beyond this many offset units earns the
/// adversary nothing, which keeps its ascent bounded.
pub const DISPARITY_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct BoxLoss {
    pub source: NodeId,
    pub disp_src: NodeId,
    pub disp_tgt: NodeId,
    pub total: NodeId,
}

/// `L_s - eta * (disp_t - disp_s)` with a reversal node between `F` and `A`.
/// `G`'s output enters the disparity detached, so only `F` and `A` play the
/// adversarial game.
pub fn box_loss(
    tape: &mut Tape,
    model: &BoxAdaptor,
    b: &Binding,
    src: &[&BoxSample],
    tgt: &[&BoxSample],
    eta: f64,
) -> Result<BoxLoss, DetectorError> {
    let (ns, nt) = (src.len(), tgt.len());
    let n = ns + tgt.len();
    let d = model.f.in_dim();
    let all: Vec<&&BoxSample> = src.iter().chain(tgt.iter()).collect();
    let x = tape.matrix(n, d, all.iter().flat_map(|s| s.feat.iter().cloned()).collect());
    let f = model.f.forward(tape, b, x);
    let g = model.g.forward(tape, b, f);
    let starts: Vec<usize> = all.iter().map(|s| 4 * s.cls).collect();
    let pick = tape.select_blocks(g, &starts, 4);

    let mut targets = vec![0.0; n * 4];
    let mut ws = vec![0.0; n * 4];
    let mut wt = vec![0.0; n * 4];
    let labeled = src.iter().filter(|s| s.target.is_some()).count().max(1) as f64;
    for (i, s) in all.iter().enumerate() {
        for c in 0..4 {
            if i < ns {
                if let Some(t) = s.target {
                    targets[i * 4 + c] = t[c];
                    ws[i * 4 + c] = 1.0 / labeled;
                }
            } else {
                wt[i * 4 + c] = 1.0 / nt as f64;
            }
        }
    }
    let t = tape.leaf(&[n, 4], targets);
    let diff = tape.sub(pick, t);
    let sl = tape.smooth_l1(diff);
    let ws_node = tape.leaf(&[n, 4], ws.clone());
    let masked = tape.mul(sl, ws_node);
    let source = tape.sum(masked);

    let fa = tape.grad_reverse(f, 1.0)?;
    let a = model.adv.forward(tape, b, fa);
    let apick = tape.select_blocks(a, &starts, 4);
    let main = tape.detach(pick);
    let gap = tape.sub(apick, main);
    let gap = tape.clamp(gap, -DISPARITY_CLIP, DISPARITY_CLIP);
    let dl = tape.smooth_l1(gap);
    let ws_all: Vec<f64> = (0..n * 4).map(|i| if i / 4 < ns { 1.0 / ns as f64 } else { 0.0 }).collect();
    let wsa = tape.leaf(&[n, 4], ws_all);
    let ds = tape.mul(dl, wsa);
    let disp_src = tape.sum(ds);
    let wtn = tape.leaf(&[n, 4], wt);
    let dt = tape.mul(dl, wtn);
    let disp_tgt = tape.sum(dt);
    let adv = tape.sub(disp_tgt, disp_src);
    let scaled = tape.scale(adv, -eta);
    let total = tape.add(source, scaled);
    Ok(BoxLoss {
        source,
        disp_src,
        disp_tgt,
        total,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxCurve {
    pub source: Vec<f64>,
    pub disp_src: Vec<f64>,
    pub disp_tgt: Vec<f64>,
}

fn draw<'a, R: Rng>(pool: &'a [BoxSample], k: usize, rng: &mut R) -> Vec<&'a BoxSample> {
    (0..k).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
}

/// Resets the adversary from `G`, then trains.
pub fn train_box_adaptor(
    model: &mut BoxAdaptor,
    src: &[BoxSample],
    tgt: &[BoxSample],
    cfg: &BoxAdaptorConfig,
    seed: u64,
) -> Result<BoxCurve, DetectorError> {
    if src.is_empty() || tgt.is_empty() {
        return Err(DetectorError::EmptyTrainingSet);
    }
    model.reset_adversary();
    model.store.hyper = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    model.store.reset_momentum();
    let mut rng = rng_for(seed, "box-train", &[]);
    let mut curve = BoxCurve::default();
    for step in 0..cfg.steps {
        let s = draw(src, cfg.batch, &mut rng);
        let t = draw(tgt, cfg.batch, &mut rng);
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape);
        let loss = box_loss(&mut tape, model, &b, &s, &t, cfg.eta)?;
        let total = tape.scalar(loss.total);
        if !total.is_finite() {
            return Err(DetectorError::Diverged {
                step,
                reason: format!("box adaptor loss {total}"),
            });
        }
        curve.source.push(tape.scalar(loss.source));
        curve.disp_src.push(tape.scalar(loss.disp_src));
        curve.disp_tgt.push(tape.scalar(loss.disp_tgt));
        tape.backward(loss.total)?;
        model.store.sgd_step(&tape, &b, cfg.lr).map_err(|e| DetectorError::Diverged {
            step,
            reason: e.to_string(),
        })?;
    }
    Ok(curve)
}

/// Decodes `G`'s `y_cls` channel relative to `b_det`. Returns the box and
/// whether it fell back to `b_det` because the decoded box was degenerate.
pub fn decode_pseudo_box(b_det: &BBox, offsets: &[f64], scene: (f64, f64)) -> (BBox, bool) {
    match decode_offsets(b_det, &Offsets::from_slice(offsets), Some(scene)) {
        Ok(b) if b.has_positive_size() => (b, false),
        _ => (*b_det, true),
    }
}

/// Sets `b_reg` on each target foreground proposal; returns the number of fallbacks.
pub fn pseudo_label_boxes(model: &BoxAdaptor, proposals: &mut [Proposal], samples: &[BoxSample]) -> usize {
    let feats: Vec<f64> = samples.iter().flat_map(|s| s.feat.iter().cloned()).collect();
    let out = model.offsets(&feats, samples.len());
    let w = 4 * model.num_classes;
    let mut fallbacks = 0;
    for (i, (p, s)) in proposals.iter_mut().zip(samples).enumerate() {
        let row = unscale_offsets(&out[i * w + 4 * s.cls..i * w + 4 * s.cls + 4]);
        let (b, fell_back) = decode_pseudo_box(&p.b_det, &row, s.scene_size);
        fallbacks += fell_back as usize;
        p.b_reg = Some(b);
    }
    fallbacks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(y_gt: Option<usize>, y_cls: Option<usize>) -> Proposal {
        let mut p = Proposal::new("s", BBox::new(0.0, 0.0, 4.0, 4.0), 0, 0.9);
        p.y_gt = y_gt;
        p.y_cls = y_cls;
        p
    }

    #[test]
    fn foreground_filter() {
        let src = [prop(Some(3), None), prop(Some(1), None), prop(Some(0), None)];
        let tgt = [prop(None, Some(3)), prop(None, Some(2))];
        let (s, t) = select_foreground(&src, &tgt, 3).unwrap();
        assert_eq!((s.len(), t.len()), (2, 1));
        let bg = [prop(None, Some(3))];
        assert!(select_foreground(&src, &bg, 3).is_none());
    }

    #[test]
    fn zero_offsets_keep_box() {
        let b = BBox::new(2.0, 3.0, 10.0, 12.0);
        assert_eq!(decode_pseudo_box(&b, &[0.0; 4], (64.0, 64.0)), (b, false));
        let (fb, flagged) = decode_pseudo_box(&b, &[100.0, 0.0, 0.0, 0.0], (64.0, 64.0));
        assert!(flagged);
        assert_eq!(fb, b);
    }

    #[test]
    fn fresh_adaptor_predicts_zero_offsets() {
        let m = BoxAdaptor::new(4, 2, &BoxAdaptorConfig::default(), 5);
        assert!(m.offsets(&[1.0, -2.0, 0.5, 0.3], 1).iter().all(|v| *v == 0.0));
        for (a, g) in m.adv.param_ids().iter().zip(m.g.param_ids()) {
            assert_eq!(m.store.get(*a).data, m.store.get(g).data);
        }
    }
}
