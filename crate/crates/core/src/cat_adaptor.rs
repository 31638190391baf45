//! Category adaptor: its own feature extractor `F`, classifier `G` over
//! `K + 1` classes and a domain discriminator `D` conditioned on `G`'s
//! prediction. Alignment runs through a gradient-reversal node between `F` and `D`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, Checkpoint, CheckpointError, Mlp, NodeId, ParamStore, SgdConfig, Tape};
use crate::detector::{argmax, one_hot_rows, CropSource, DetectorError, Proposal};
use crate::seed::rng_for;
use crate::synthworld::FeatureOracle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatAdaptorConfig {
    pub hidden: usize,
    pub disc_hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Proposals per domain per step.
    pub batch: usize,
    pub lambda: f64,
    pub weight_threshold: f64,
    /// `false` sets every discriminator weight to 1.
    pub use_weight: bool,
    /// `false` feeds `D` the features only.
    pub condition: bool,
    /// Ramp the reversal strength as `lambda * (2 / (1 + exp(-10 p)) - 1)` over training progress `p`.
    pub warmup: bool,
    /// Anneal the step size as `lr / (1 + 10 p)^0.75`.
    pub anneal: bool,
}

impl Default for CatAdaptorConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            disc_hidden: 32,
            steps: 2000,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 32,
            lambda: 1.0,
            weight_threshold: 0.5,
            use_weight: true,
            condition: true,
            warmup: true,
            anneal: true,
        }
    }
}

/// `1` when `c > threshold`, else `0`.
pub fn weight(c: f64, threshold: f64) -> f64 {
    if c > threshold {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct CatAdaptor {
    pub num_classes: usize,
    pub condition: bool,
    pub store: ParamStore,
    pub f: Mlp,
    pub g: Mlp,
    pub d: Mlp,
}

impl CatAdaptor {
    pub fn new(feat_dim: usize, num_classes: usize, cfg: &CatAdaptorConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "cat-init", &[]);
        let mut store = ParamStore::new(SgdConfig::default());
        let h = cfg.hidden;
        let f = Mlp::new(&mut store, "cat.f", &[feat_dim, h], &mut rng);
        let g = Mlp::new(&mut store, "cat.g", &[h, h, num_classes + 1], &mut rng);
        let d_in = if cfg.condition { h + num_classes + 1 } else { h };
        let d = Mlp::new(&mut store, "cat.d", &[d_in, cfg.disc_hidden, cfg.disc_hidden, 1], &mut rng);
        Self {
            num_classes,
            condition: cfg.condition,
            store,
            f,
            g,
            d,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store)
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
        ckpt.restore_into(&mut self.store)
    }

    /// Rows of `G(F(x))` logits.
    pub fn logits(&self, feats: &[f64], rows: usize) -> Vec<f64> {
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

    /// Argmax class per row, lowest index on ties.
    pub fn predict(&self, feats: &[f64], rows: usize) -> Vec<usize> {
        let c = self.num_classes + 1;
        self.logits(feats, rows).chunks(c).map(argmax).collect()
    }

    /// Discriminator probabilities for given features and class probabilities.
    pub fn discriminate(&self, feats: &[f64], rows: usize, cond: Option<&[f64]>) -> Vec<f64> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let x = tape.matrix(rows, self.f.in_dim(), feats.to_vec());
        let f = self.f.forward(&mut tape, &b, x);
        let input = match cond {
            Some(p) if self.condition => {
                let p = tape.matrix(rows, self.num_classes + 1, p.to_vec());
                tape.concat_cols(f, p)
            }
            _ => f,
        };
        let o = self.d.forward(&mut tape, &b, input);
        let s = tape.sigmoid(o);
        tape.data(s).to_vec()
    }
}

/// One proposal crop with its label (source only) and detector confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct CatSample {
    pub feat: Vec<f64>,
    pub label: Option<usize>,
    pub conf: f64,
}

pub fn cat_samples<S: CropSource>(
    proposals: &[Proposal],
    scenes: &[S],
    oracle: &FeatureOracle,
) -> Result<Vec<CatSample>, DetectorError> {
    let index: std::collections::HashMap<&str, &S> = scenes.iter().map(|s| (s.scene_id(), s)).collect();
    proposals
        .iter()
        .map(|p| {
            Ok(CatSample {
                feat: index[p.scene_id.as_str()].crop(oracle, &p.b_det)?,
                label: p.y_gt,
                conf: p.c_det,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct CatLoss {
    pub cls: NodeId,
    /// Discriminator objective (log-likelihood, to be maximized by `D`).
    pub disc: NodeId,
    pub total: NodeId,
}

/// Builds source cross-entropy plus the weighted conditional adversarial term.
/// `D` minimizes `-disc`; `F` receives the reversed gradient scaled by `lambda`.
/// Returns `None` for `disc` when every weight in the batch is zero.
pub fn cat_loss(
    tape: &mut Tape,
    model: &CatAdaptor,
    b: &crate::autodiff::Binding,
    src: &[&CatSample],
    tgt: &[&CatSample],
    weights: &[f64],
    lambda: f64,
) -> Result<(CatLoss, bool), DetectorError> {
    let n = src.len() + tgt.len();
    let d = model.f.in_dim();
    let x = tape.matrix(
        n,
        d,
        src.iter().chain(tgt.iter()).flat_map(|s| s.feat.iter().cloned()).collect(),
    );
    let f = model.f.forward(tape, b, x);
    let g = model.g.forward(tape, b, f);
    let rows: Vec<usize> = (0..src.len()).collect();
    let sel = tape.leaf(&[src.len(), n], one_hot_rows(&rows, n));
    let gs = tape.matmul(sel, g);
    let labels: Vec<usize> = src.iter().map(|s| s.label.expect("source sample without label")).collect();
    let cls = tape.cross_entropy(gs, &labels)?;
    let active = weights.iter().any(|w| *w > 0.0);
    if !active || tgt.is_empty() || src.is_empty() {
        let disc = tape.scalar_leaf(0.0);
        return Ok((CatLoss { cls, disc, total: cls }, false));
    }
    let fr = tape.grad_reverse(f, lambda)?;
    let input = if model.condition {
        let p = tape.softmax(g);
        let p = tape.detach(p);
        tape.concat_cols(fr, p)
    } else {
        fr
    };
    let o = model.d.forward(tape, b, input);
    let prob = tape.sigmoid(o);
    let is_source: Vec<bool> = (0..n).map(|i| i < src.len()).collect();
    let disc = tape.weighted_bce(prob, &is_source, weights)?;
    let neg = tape.scale(disc, -1.0);
    let total = tape.add(cls, neg);
    Ok((CatLoss { cls, disc, total }, true))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CatCurve {
    pub cls: Vec<f64>,
    pub disc: Vec<f64>,
    pub skipped_adversarial: usize,
}

fn draw<'a, R: Rng>(pool: &'a [CatSample], k: usize, rng: &mut R) -> Vec<&'a CatSample> {
    (0..k).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
}

pub fn lambda_at(cfg: &CatAdaptorConfig, step: usize) -> f64 {
    if !cfg.warmup || cfg.steps == 0 {
        return cfg.lambda;
    }
    let p = step as f64 / cfg.steps as f64;
    cfg.lambda * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

pub fn lr_at(cfg: &CatAdaptorConfig, step: usize) -> f64 {
    if !cfg.anneal || cfg.steps == 0 {
        return cfg.lr;
    }
    let p = step as f64 / cfg.steps as f64;
    cfg.lr * (1.0 + 10.0 * p).powf(-0.75)
}

/// Trains on source samples (with labels) and target samples, uniform over proposals.
pub fn train_category_adaptor(
    model: &mut CatAdaptor,
    src: &[CatSample],
    tgt: &[CatSample],
    cfg: &CatAdaptorConfig,
    seed: u64,
) -> Result<CatCurve, DetectorError> {
    if src.is_empty() {
        return Err(DetectorError::EmptyTrainingSet);
    }
    model.store.hyper = SgdConfig {
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    model.store.reset_momentum();
    let mut rng = rng_for(seed, "cat-train", &[]);
    let mut curve = CatCurve::default();
    for step in 0..cfg.steps {
        let s = draw(src, cfg.batch, &mut rng);
        let t = if tgt.is_empty() { Vec::new() } else { draw(tgt, cfg.batch, &mut rng) };
        let w: Vec<f64> = s
            .iter()
            .chain(t.iter())
            .map(|x| if cfg.use_weight { weight(x.conf, cfg.weight_threshold) } else { 1.0 })
            .collect();
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape);
        let (loss, adversarial) = cat_loss(&mut tape, model, &b, &s, &t, &w, lambda_at(cfg, step))?;
        if !adversarial {
            curve.skipped_adversarial += 1;
        }
        let total = tape.scalar(loss.total);
        if !total.is_finite() {
            return Err(DetectorError::Diverged {
                step,
                reason: format!("category adaptor loss {total}"),
            });
        }
        curve.cls.push(tape.scalar(loss.cls));
        curve.disc.push(tape.scalar(loss.disc));
        tape.backward(loss.total)?;
        model.store.sgd_step(&tape, &b, lr_at(cfg, step)).map_err(|e| DetectorError::Diverged {
            step,
            reason: e.to_string(),
        })?;
    }
    Ok(curve)
}

/// Sets `y_cls` on every proposal from the adaptor's argmax.
pub fn pseudo_label_categories(model: &CatAdaptor, proposals: &mut [Proposal], samples: &[CatSample]) {
    let feats: Vec<f64> = samples.iter().flat_map(|s| s.feat.iter().cloned()).collect();
    for (p, y) in proposals.iter_mut().zip(model.predict(&feats, samples.len())) {
        p.y_cls = Some(y);
    }
}

/// Softmax rows of the adaptor's logits.
pub fn class_probabilities(model: &CatAdaptor, feats: &[f64], rows: usize) -> Vec<f64> {
    let c = model.num_classes + 1;
    let logits = model.logits(feats, rows);
    let mut out = vec![0.0; logits.len()];
    for r in 0..rows {
        softmax_row(&logits[r * c..(r + 1) * c], &mut out[r * c..(r + 1) * c]);
    }
    out
}
