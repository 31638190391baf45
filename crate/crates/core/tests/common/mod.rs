#![allow(dead_code)]

use dadapt::autodiff::gradcheck::{check_param_gradients, GradCheckReport};
use dadapt::autodiff::{Binding, NodeId, ParamStore, SgdConfig, Tape};
use dadapt::box_adaptor::{
    box_loss, box_samples, select_foreground, train_box_adaptor, BoxAdaptor, BoxAdaptorConfig, BoxSample,
};
use dadapt::cat_adaptor::{
    cat_loss, cat_samples, pseudo_label_categories, train_category_adaptor, CatAdaptor, CatAdaptorConfig, CatSample,
};
use dadapt::detector::{
    build_pool, label_source_proposals, propose, sample_source_batch, source_loss, target_loss, target_samples, DetectorModel,
    DetectorTrainConfig, SourceBatch, TargetSample,
};
use dadapt::eval::{average_precision, DetectionResult, GroundTruth};
use dadapt::geometry::{iou, BBox};
use dadapt::pipeline::{PipelineConfig, PipelineData};
use dadapt::seed::rng_for;
use dadapt::synthworld::{generate_benchmark, FeatureOracle, SceneAnnotations, UnlabeledScene, WorldConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const COORDS: usize = 20;
pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

pub fn normal_vec(seed: u64, tag: &str, n: usize, sigma: f64) -> Vec<f64> {
    let mut rng = rng_for(seed, tag, &[]);
    (0..n)
        .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect()
}

/// Values at least `gap` away from every point in `kinks`.
pub fn away_from(seed: u64, tag: &str, n: usize, lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Vec<f64> {
    let mut rng = rng_for(seed, tag, &[]);
    (0..n)
        .map(|_| loop {
            let x = rng.random_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > gap) {
                break x;
            }
        })
        .collect()
}

pub fn jiggle(store: &mut ParamStore, prefix: &str, sigma: f64, seed: u64) {
    let ids: Vec<_> = (0..store.len())
        .filter(|&i| store.params()[i].name.starts_with(prefix))
        .collect();
    for i in ids {
        let id = dadapt::autodiff::ParamId(i);
        let n = store.get(id).data.len();
        let noise = normal_vec(seed, &format!("jiggle-{i}"), n, sigma);
        store.get_mut(id).data.iter_mut().zip(noise).for_each(|(x, e)| *x += e);
    }
}

fn store_of(inputs: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore {
    let mut s = ParamStore::new(SgdConfig::default());
    for (name, shape, data) in inputs {
        s.add(name, shape, data.clone());
    }
    s
}

/// `sum(node * R)` with a fixed random `R`, so every output entry carries a
/// distinct upstream gradient.
fn project(tape: &mut Tape, node: NodeId, seed: u64) -> NodeId {
    let shape = tape.shape(node).to_vec();
    let n = tape.data(node).len();
    let r = tape.leaf(&shape, normal_vec(seed, "project", n, 1.0));
    let m = tape.mul(node, r);
    tape.sum(m)
}

type Build = Box<dyn Fn(&ParamStore, &mut Tape, &Binding) -> Result<NodeId, dadapt::autodiff::AutodiffError>>;

fn run(inputs: Vec<(&str, Vec<usize>, Vec<f64>)>, build: Build, mult: impl Fn(&str) -> Option<f64>) -> GradCheckReport {
    let mut store = store_of(&inputs);
    check_param_gradients(&mut store, build, mult, COORDS, STEP, 7).expect("gradient check runs")
}

fn x(i: usize) -> dadapt::autodiff::ParamId {
    dadapt::autodiff::ParamId(i)
}

pub fn primitive_cases() -> Vec<(String, GradCheckReport)> {
    let all = |_: &str| Some(1.0);
    let m23 = |seed: u64, tag: &str| normal_vec(seed, tag, 6, 1.0);
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();
    let two = |tag: &str| {
        vec![
            ("x0", vec![2, 3], m23(1, &format!("{tag}-a"))),
            ("x1", vec![2, 3], m23(2, &format!("{tag}-b"))),
        ]
    };
    out.push((
        "add".into(),
        run(
            two("add"),
            Box::new(|_, t, b| {
                let y = t.add(b.node(x(0)), b.node(x(1)));
                Ok(project(t, y, 1))
            }),
            all,
        ),
    ));
    out.push((
        "sub".into(),
        run(
            two("sub"),
            Box::new(|_, t, b| {
                let y = t.sub(b.node(x(0)), b.node(x(1)));
                Ok(project(t, y, 2))
            }),
            all,
        ),
    ));
    out.push((
        "mul".into(),
        run(
            two("mul"),
            Box::new(|_, t, b| {
                let y = t.mul(b.node(x(0)), b.node(x(1)));
                Ok(project(t, y, 3))
            }),
            all,
        ),
    ));
    out.push((
        "scale".into(),
        run(
            vec![("x0", vec![2, 3], m23(3, "scale"))],
            Box::new(|_, t, b| {
                let y = t.scale(b.node(x(0)), -1.7);
                Ok(project(t, y, 4))
            }),
            all,
        ),
    ));
    out.push((
        "matmul".into(),
        run(
            vec![
                ("x0", vec![2, 3], m23(4, "mm-a")),
                ("x1", vec![3, 4], normal_vec(5, "mm-b", 12, 1.0)),
            ],
            Box::new(|_, t, b| {
                let y = t.matmul(b.node(x(0)), b.node(x(1)));
                Ok(project(t, y, 5))
            }),
            all,
        ),
    ));
    out.push((
        "add_bias".into(),
        run(
            vec![("x0", vec![2, 3], m23(6, "ab-a")), ("x1", vec![3], normal_vec(7, "ab-b", 3, 1.0))],
            Box::new(|_, t, b| {
                let y = t.add_bias(b.node(x(0)), b.node(x(1)));
                Ok(project(t, y, 6))
            }),
            all,
        ),
    ));
    out.push((
        "relu".into(),
        run(
            vec![("x0", vec![2, 3], away_from(8, "relu", 6, -2.0, 2.0, &[0.0], 0.05))],
            Box::new(|_, t, b| {
                let y = t.relu(b.node(x(0)));
                Ok(project(t, y, 7))
            }),
            all,
        ),
    ));
    out.push((
        "sigmoid".into(),
        run(
            vec![("x0", vec![2, 3], m23(9, "sig"))],
            Box::new(|_, t, b| {
                let y = t.sigmoid(b.node(x(0)));
                Ok(project(t, y, 8))
            }),
            all,
        ),
    ));
    out.push((
        "log".into(),
        run(
            vec![("x0", vec![2, 3], away_from(10, "log", 6, 0.2, 3.0, &[], 0.0))],
            Box::new(|_, t, b| {
                let y = t.log(b.node(x(0)));
                Ok(project(t, y, 9))
            }),
            all,
        ),
    ));
    out.push((
        "mean".into(),
        run(
            vec![("x0", vec![2, 3], m23(11, "mean"))],
            Box::new(|_, t, b| {
                let r = t.leaf(&[2, 3], normal_vec(12, "mean-r", 6, 1.0));
                let y = t.mul(b.node(x(0)), r);
                Ok(t.mean(y))
            }),
            all,
        ),
    ));
    out.push((
        "sum".into(),
        run(
            vec![("x0", vec![2, 3], m23(13, "sum"))],
            Box::new(|_, t, b| {
                let y = t.mul(b.node(x(0)), b.node(x(0)));
                Ok(t.sum(y))
            }),
            all,
        ),
    ));
    out.push((
        "softmax".into(),
        run(
            vec![("x0", vec![2, 3], m23(14, "softmax"))],
            Box::new(|_, t, b| {
                let y = t.softmax(b.node(x(0)));
                Ok(project(t, y, 10))
            }),
            all,
        ),
    ));
    out.push((
        "concat_cols".into(),
        run(
            vec![("x0", vec![2, 3], m23(15, "cat-a")), ("x1", vec![2, 2], normal_vec(16, "cat-b", 4, 1.0))],
            Box::new(|_, t, b| {
                let y = t.concat_cols(b.node(x(0)), b.node(x(1)));
                Ok(project(t, y, 11))
            }),
            all,
        ),
    ));
    out.push((
        "slice_cols".into(),
        run(
            vec![("x0", vec![2, 5], normal_vec(17, "slice", 10, 1.0))],
            Box::new(|_, t, b| {
                let y = t.slice_cols(b.node(x(0)), 1, 4);
                Ok(project(t, y, 12))
            }),
            all,
        ),
    ));
    out.push((
        "select_blocks".into(),
        run(
            vec![("x0", vec![3, 8], normal_vec(18, "select", 24, 1.0))],
            Box::new(|_, t, b| {
                let y = t.select_blocks(b.node(x(0)), &[4, 0, 4], 4);
                Ok(project(t, y, 13))
            }),
            all,
        ),
    ));
    out.push((
        "detach".into(),
        run(
            two("detach"),
            Box::new(|_, t, b| {
                let d = t.detach(b.node(x(0)));
                let y = t.mul(d, b.node(x(1)));
                Ok(project(t, y, 14))
            }),
            |n| Some(if n == "x0" { 0.0 } else { 1.0 }),
        ),
    ));
    for lambda in [0.0, 0.1, 1.0] {
        out.push((
            format!("grad_reverse({lambda})"),
            run(
                vec![("x0", vec![2, 3], m23(19, "grl"))],
                Box::new(move |_, t, b| {
                    let y = t.grad_reverse(b.node(x(0)), lambda)?;
                    let y = t.mul(y, y);
                    Ok(project(t, y, 15))
                }),
                move |_| Some(-lambda),
            ),
        ));
    }
    out.push((
        "smooth_l1".into(),
        run(
            vec![("x0", vec![2, 3], away_from(20, "sl1", 6, -3.0, 3.0, &[-1.0, 1.0], 0.05))],
            Box::new(|_, t, b| {
                let y = t.smooth_l1(b.node(x(0)));
                Ok(project(t, y, 16))
            }),
            all,
        ),
    ));
    out.push((
        "clamp".into(),
        run(
            vec![("x0", vec![2, 3], away_from(21, "clamp", 6, -2.0, 2.0, &[-0.5, 0.5], 0.05))],
            Box::new(|_, t, b| {
                let y = t.clamp(b.node(x(0)), -0.5, 0.5);
                Ok(project(t, y, 17))
            }),
            all,
        ),
    ));
    out.push((
        "cross_entropy".into(),
        run(
            vec![("x0", vec![3, 4], normal_vec(22, "ce", 12, 1.5))],
            Box::new(|_, t, b| t.cross_entropy(b.node(x(0)), &[2, 0, 3])),
            all,
        ),
    ));
    out.push((
        "weighted_bce".into(),
        run(
            vec![("x0", vec![4, 1], away_from(23, "bce", 4, 0.1, 0.9, &[], 0.0))],
            Box::new(|_, t, b| t.weighted_bce(b.node(x(0)), &[true, false, true, false], &[1.0, 0.5, 0.0, 2.0])),
            all,
        ),
    ));
    out
}

pub struct DetectorFixture {
    pub model: DetectorModel,
    pub batch: SourceBatch,
    pub target: Vec<TargetSample>,
}

pub fn detector_fixture() -> DetectorFixture {
    let world = WorldConfig {
        n_source: 3,
        n_target: 1,
        ..WorldConfig::reference()
    };
    let (source, _) = generate_benchmark(&world).unwrap();
    let oracle = FeatureOracle::new(&world);
    let cfg = PipelineConfig::default();
    let arch = cfg.arch(&world);
    let mut model = DetectorModel::new(arch.clone(), 3);
    jiggle(&mut model.store, "", 0.3, 4);
    let mut rng = rng_for(5, "fixture-pool", &[]);
    let pools: Vec<_> = source
        .iter()
        .map(|s| build_pool(s, &SceneAnnotations::of(s).objects, &[], &arch.grid, &oracle, 3, 4, &mut rng).unwrap())
        .collect();
    let batch = sample_source_batch(&pools, &DetectorTrainConfig::default(), 3, &mut rng);
    let d = world.feat_dim;
    let target = (0..8)
        .map(|i| TargetSample {
            feat_det: normal_vec(30 + i as u64, "t-det", d, 1.0),
            feat_reg: normal_vec(40 + i as u64, "t-reg", d, 1.0),
            label: i % 4,
            target: (i % 4 < 3).then(|| {
                let v = normal_vec(50 + i as u64, "t-off", 4, 0.4);
                [v[0], v[1], v[2], v[3]]
            }),
        })
        .collect();
    DetectorFixture { model, batch, target }
}

pub fn detector_cases() -> Vec<(String, GradCheckReport)> {
    let fx = detector_fixture();
    let mut out = Vec::new();
    let terms: [(&str, fn(&dadapt::detector::SourceLoss) -> NodeId); 5] = [
        ("rpn_cls", |l| l.rpn_cls),
        ("rpn_reg", |l| l.rpn_reg),
        ("roi_cls", |l| l.roi_cls),
        ("roi_reg", |l| l.roi_reg),
        ("total", |l| l.total),
    ];
    for (name, pick) in terms {
        let mut store = fx.model.store.clone();
        let shell = fx.model.clone();
        let batch = fx.batch.clone();
        let r = check_param_gradients(
            &mut store,
            move |_, t, b| Ok(pick(&source_loss(t, &shell, b, &batch).unwrap())),
            |_| Some(1.0),
            COORDS,
            STEP,
            11,
        )
        .unwrap();
        out.push((format!("source loss {name}"), r));
    }
    let tterms: [(&str, fn(&dadapt::detector::TargetLoss) -> NodeId); 4] = [
        ("cls_det", |l| l.cls_det),
        ("cls_reg", |l| l.cls_reg),
        ("reg", |l| l.reg),
        ("total", |l| l.total),
    ];
    for (name, pick) in tterms {
        let mut store = fx.model.store.clone();
        let shell = fx.model.clone();
        let samples = fx.target.clone();
        let r = check_param_gradients(
            &mut store,
            move |_, t, b| {
                let refs: Vec<&TargetSample> = samples.iter().collect();
                Ok(pick(&target_loss(t, &shell, b, &refs).unwrap()))
            },
            |_| Some(1.0),
            COORDS,
            STEP,
            12,
        )
        .unwrap();
        out.push((format!("target loss {name}"), r));
    }
    out
}

pub fn cat_batch(d: usize, n: usize, seed: u64) -> (Vec<CatSample>, Vec<CatSample>, Vec<f64>) {
    let src: Vec<CatSample> = (0..n)
        .map(|i| CatSample {
            feat: normal_vec(seed + i as u64, "cat-src", d, 1.0),
            label: Some(i % 4),
            conf: 0.3 + 0.1 * (i % 6) as f64,
        })
        .collect();
    let tgt: Vec<CatSample> = (0..n)
        .map(|i| CatSample {
            feat: normal_vec(seed + 100 + i as u64, "cat-tgt", d, 1.0),
            label: None,
            conf: 0.25 + 0.12 * (i % 6) as f64,
        })
        .collect();
    let w = src
        .iter()
        .chain(tgt.iter())
        .map(|s| dadapt::cat_adaptor::weight(s.conf, 0.5))
        .collect();
    (src, tgt, w)
}

/// Category adaptor with `G`'s last layer zeroed, so `F` reaches the
/// objective only through the reversal node.
pub fn cat_model(d: usize, zero_g: bool) -> CatAdaptor {
    let cfg = CatAdaptorConfig {
        hidden: 6,
        disc_hidden: 5,
        ..Default::default()
    };
    let mut m = CatAdaptor::new(d, 3, &cfg, 9);
    jiggle(&mut m.store, "", 0.2, 10);
    if zero_g {
        let last = *m.g.last();
        store_zero(&mut m.store, last.weight);
    }
    m
}

fn store_zero(store: &mut ParamStore, id: dadapt::autodiff::ParamId) {
    store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
}

pub fn cat_cases() -> Vec<(String, GradCheckReport)> {
    let d = 5;
    let lambda = 0.7;
    let (src, tgt, w) = cat_batch(d, 6, 1);
    let mut out = Vec::new();
    let case = |zero_g: bool,
                pick: fn(&dadapt::cat_adaptor::CatLoss) -> NodeId,
                mult: Box<dyn Fn(&str) -> Option<f64>>,
                seed: u64| {
        let m = cat_model(d, zero_g);
        let mut store = m.store.clone();
        let (src, tgt, w) = (src.clone(), tgt.clone(), w.clone());
        check_param_gradients(
            &mut store,
            move |_, t, b| {
                let s: Vec<&CatSample> = src.iter().collect();
                let g: Vec<&CatSample> = tgt.iter().collect();
                Ok(pick(&cat_loss(t, &m, b, &s, &g, &w, lambda).unwrap().0))
            },
            mult,
            COORDS,
            STEP,
            seed,
        )
        .unwrap()
    };
    out.push((
        "category classifier cross-entropy".to_string(),
        case(
            false,
            |l| l.cls,
            Box::new(|n: &str| (n.starts_with("cat.f") || n.starts_with("cat.g")).then_some(1.0)),
            21,
        ),
    ));
    out.push((
        "category discriminator objective".to_string(),
        case(
            true,
            |l| l.disc,
            Box::new(move |n: &str| {
                Some(if n.starts_with("cat.d") {
                    1.0
                } else if n.starts_with("cat.f") {
                    -lambda
                } else {
                    0.0
                })
            }),
            22,
        ),
    ));
    out.push((
        "category adaptor total".to_string(),
        case(
            true,
            |l| l.total,
            Box::new(move |n: &str| {
                if n.starts_with("cat.d") {
                    Some(1.0)
                } else if n.starts_with("cat.f") {
                    Some(-lambda)
                } else {
                    None
                }
            }),
            23,
        ),
    ));
    out
}

pub fn box_batch(d: usize, n: usize, seed: u64) -> (Vec<BoxSample>, Vec<BoxSample>) {
    let mk = |i: usize, source: bool| BoxSample {
        feat: normal_vec(seed + i as u64 + if source { 0 } else { 500 }, "box-feat", d, 1.0),
        b_det: BBox::new(10.0, 10.0, 30.0, 28.0),
        scene_size: (64.0, 64.0),
        cls: i % 3,
        target: (source && i % 5 != 4).then(|| {
            let v = normal_vec(seed + 900 + i as u64, "box-target", 4, 0.5);
            [v[0], v[1], v[2], v[3]]
        }),
    };
    ((0..n).map(|i| mk(i, true)).collect(), (0..n).map(|i| mk(i, false)).collect())
}

/// Box adaptor with a random adversary and, when `zero_g`, `G`'s last layer
/// zeroed so `F` reaches the disparity only through the reversal node.
pub fn box_model(d: usize, zero_g: bool) -> BoxAdaptor {
    let cfg = BoxAdaptorConfig {
        hidden: 6,
        ..Default::default()
    };
    let mut m = BoxAdaptor::new(d, 3, &cfg, 13);
    jiggle(&mut m.store, "box.f", 0.2, 14);
    jiggle(&mut m.store, "box.adv", 0.3, 15);
    if !zero_g {
        jiggle(&mut m.store, "box.g", 0.3, 16);
    }
    m
}

pub fn box_cases() -> Vec<(String, GradCheckReport)> {
    let d = 5;
    let eta = 0.1;
    let (src, tgt) = box_batch(d, 6, 3);
    let case = |zero_g: bool,
                pick: fn(&dadapt::box_adaptor::BoxLoss) -> NodeId,
                mult: fn(&str) -> Option<f64>,
                seed: u64| {
        let m = box_model(d, zero_g);
        let mut store = m.store.clone();
        let (src, tgt) = (src.clone(), tgt.clone());
        check_param_gradients(
            &mut store,
            move |_, t, b| {
                let s: Vec<&BoxSample> = src.iter().collect();
                let g: Vec<&BoxSample> = tgt.iter().collect();
                Ok(pick(&box_loss(t, &m, b, &s, &g, eta).unwrap()))
            },
            mult,
            COORDS,
            STEP,
            seed,
        )
        .unwrap()
    };
    let disparity = |n: &str| {
        Some(if n.starts_with("box.adv") {
            1.0
        } else if n.starts_with("box.f") {
            -1.0
        } else {
            0.0
        })
    };
    vec![
        (
            "box source regression".to_string(),
            case(false, |l| l.source, |n| (!n.starts_with("box.adv")).then_some(1.0), 31),
        ),
        ("box source disparity".to_string(), case(true, |l| l.disp_src, disparity, 32)),
        ("box target disparity".to_string(), case(true, |l| l.disp_tgt, disparity, 33)),
        (
            "box adaptor total".to_string(),
            case(
                true,
                |l| l.total,
                |n| {
                    if n.starts_with("box.adv") {
                        Some(1.0)
                    } else if n.starts_with("box.f") {
                        Some(-1.0)
                    } else {
                        None
                    }
                },
                34,
            ),
        ),
    ]
}

pub fn gradient_suite() -> Vec<(String, GradCheckReport)> {
    let mut all = primitive_cases();
    all.extend(detector_cases());
    all.extend(cat_cases());
    all.extend(box_cases());
    all
}

/// A small world and short stage budgets for end-to-end tests.
pub fn tiny() -> (WorldConfig, PipelineConfig) {
    let world = WorldConfig {
        n_source: 24,
        n_target: 24,
        ..WorldConfig::reference()
    };
    let cfg = PipelineConfig {
        rounds: 2,
        pretrain_steps: 150,
        cat_steps: 80,
        box_steps: 40,
        target_steps: 40,
        ..PipelineConfig::default()
    };
    (world, cfg)
}

// AP oracle

/// Greedy matching plus the exact integral of the precision envelope,
/// taken one recall step at a time.
pub fn brute_ap(dets: &[DetectionResult], gt: &GroundTruth, k: usize) -> f64 {
    let n_gt = gt.count(k);
    if n_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<&DetectionResult> = dets.iter().filter(|d| d.cls == k).collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut taken: Vec<(String, usize)> = Vec::new();
    let mut points = Vec::new();
    let mut hits = 0;
    for (i, d) in order.iter().enumerate() {
        let mut best = None;
        let mut best_v = 0.0;
        for (j, (c, b)) in gt.get(&d.scene_id).iter().enumerate() {
            if *c != k || taken.contains(&(d.scene_id.clone(), j)) {
                continue;
            }
            let v = iou(&d.bbox, b);
            if v >= 0.5 && v > best_v {
                best = Some(j);
                best_v = v;
            }
        }
        if let Some(j) = best {
            taken.push((d.scene_id.clone(), j));
            hits += 1;
        }
        points.push((hits, hits as f64 / (i + 1) as f64));
    }
    (1..=n_gt)
        .map(|level| {
            let p = points.iter().filter(|(h, _)| *h >= level).map(|(_, p)| *p).fold(0.0, f64::max);
            p / n_gt as f64
        })
        .sum()
}

fn random_box(rng: &mut impl Rng) -> BBox {
    let (x, y) = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
    BBox::new(x, y, x + rng.random_range(4.0..12.0), y + rng.random_range(4.0..12.0))
}


/// Largest gap between library AP and [`brute_ap`] over `cases` random small instances.
pub fn ap_oracle_max_error(cases: usize) -> f64 {
    let mut rng = rng_for(3, "ap-oracle", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n_gt = rng.random_range(1..=10);
        let n_det = rng.random_range(0..=20);
        let mut gt = GroundTruth::default();
        let mut objects = Vec::new();
        for _ in 0..n_gt {
            let scene = format!("s{}", rng.random_range(0..3));
            let obj = (rng.random_range(0..2), random_box(&mut rng));
            objects.push((scene.clone(), obj));
            gt.scenes.entry(scene).or_default().push(obj);
        }
        let dets: Vec<DetectionResult> = (0..n_det)
            .map(|_| {
                let (scene, (c, b)) = objects[rng.random_range(0..objects.len())].clone();
                let jitter = rng.random_range(0.0..4.0);
                let bbox = if rng.random_bool(0.7) {
                    BBox::new(b.x1 + jitter, b.y1, b.x2 + jitter, b.y2)
                } else {
                    random_box(&mut rng)
                };
                DetectionResult {
                    scene_id: scene,
                    bbox,
                    cls: if rng.random_bool(0.8) { c } else { 1 - c },
                    score: rng.random_range(0.0..1.0),
                }
            })
            .collect();
        for k in 0..2 {
            worst = worst.max((average_precision(&dets, &gt, k, 0.5) - brute_ap(&dets, &gt, k)).abs());
        }
    }
    worst
}

// Structural probes shared by the unit-level tests and the acceptance run

pub fn target_setup() -> (WorldConfig, Vec<UnlabeledScene>, FeatureOracle, DetectorModel) {
    let world = WorldConfig {
        n_source: 2,
        n_target: 4,
        ..WorldConfig::reference()
    };
    let (_, tgt) = generate_benchmark(&world).unwrap();
    let oracle = FeatureOracle::new(&world);
    let model = DetectorModel::new(PipelineConfig::default().arch(&world), 1);
    (world, tgt.into_iter().map(UnlabeledScene::new).collect(), oracle, model)
}

pub fn regression_term(model: &DetectorModel, samples: &[TargetSample]) -> f64 {
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape);
    let refs: Vec<&TargetSample> = samples.iter().collect();
    let loss = target_loss(&mut tape, model, &b, &refs).unwrap();
    tape.scalar(loss.reg)
}

/// Regression term on an all-background batch (with a perturbed regressor)
/// and on a batch whose box labels equal the detections (fresh detector).
pub fn target_regression_probes() -> (f64, f64) {
    let (world, scenes, oracle, model) = target_setup();
    let k = world.num_classes;
    let mut props = propose(&model, &scenes, &oracle, 16, 0.5).unwrap();

    let mut perturbed = model.clone();
    jiggle(&mut perturbed.store, "reg", 0.5, 3);
    let mut bg = props.clone();
    bg.iter_mut().for_each(|p| p.y_cls = Some(k));
    let bg_samples = target_samples(&bg, &scenes, &oracle, k, true).unwrap();
    assert!(bg_samples.iter().all(|s| s.target.is_none()));

    for (i, p) in props.iter_mut().enumerate() {
        p.y_cls = Some(i % (k + 1));
        p.b_reg = Some(p.b_det);
    }
    let same = target_samples(&props, &scenes, &oracle, k, true).unwrap();
    assert!(same.iter().any(|s| s.target.is_some()));
    (regression_term(&perturbed, &bg_samples), regression_term(&model, &same))
}

/// Disparities right after copying a perturbed `G` into the adversary, plus the source term.
pub fn disparities_after_reset() -> (f64, f64, f64) {
    let d = 5;
    let mut m = box_model(d, false);
    jiggle(&mut m.store, "box.g", 0.4, 77);
    m.reset_adversary();
    let (src, tgt) = box_batch(d, 8, 5);
    let mut tape = Tape::new();
    let b = m.store.bind(&mut tape);
    let s: Vec<&BoxSample> = src.iter().collect();
    let t: Vec<&BoxSample> = tgt.iter().collect();
    let loss = box_loss(&mut tape, &m, &b, &s, &t, 0.1).unwrap();
    (tape.scalar(loss.disp_src), tape.scalar(loss.disp_tgt), tape.scalar(loss.source))
}

fn disc_grads(m: &CatAdaptor, src: &[CatSample], tgt: &[CatSample], w: &[f64]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let b = m.store.bind(&mut tape);
    let s: Vec<&CatSample> = src.iter().collect();
    let t: Vec<&CatSample> = tgt.iter().collect();
    let (loss, active) = cat_loss(&mut tape, m, &b, &s, &t, w, 1.0).unwrap();
    assert!(active);
    tape.backward(loss.disc).unwrap();
    (0..m.store.len())
        .map(|i| tape.grad(b.node(dadapt::autodiff::ParamId(i))).to_vec())
        .collect()
}

/// Gradient of the adversarial term before and after rewriting the features
/// of every proposal with confidence at or below 0.5.
pub fn zero_weight_probe() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = 5;
    let m = cat_model(d, false);
    let (src, tgt, w) = cat_batch(d, 8, 2);
    assert!(src.iter().chain(&tgt).any(|s| s.conf <= 0.5));
    assert!(src.iter().chain(&tgt).any(|s| s.conf > 0.5));
    let base = disc_grads(&m, &src, &tgt, &w);
    let perturb = |xs: &[CatSample]| -> Vec<CatSample> {
        xs.iter()
            .map(|s| {
                let mut s = s.clone();
                if s.conf <= 0.5 {
                    s.feat.iter_mut().for_each(|v| *v = 5.0 - 3.0 * *v);
                }
                s
            })
            .collect()
    };
    let moved = disc_grads(&m, &perturb(&src), &perturb(&tgt), &w);
    (base, moved)
}

/// Trains both adaptors from a detector's proposals. Returns whether the
/// detector checkpoint stayed byte-identical and whether it holds only detector parameters.
pub fn decoupling_probe(cfg: &PipelineConfig, data: &PipelineData, det: &DetectorModel) -> (bool, bool) {
    let world = data.world;
    let k = world.num_classes;
    let oracle = FeatureOracle::new(world);
    let before = det.checkpoint().to_bytes();
    let mut ps = propose(det, data.source, &oracle, cfg.top_n, cfg.nms_iou).unwrap();
    label_source_proposals(&mut ps, data.source, k);
    let mut pt = propose(det, data.target, &oracle, cfg.top_n, cfg.nms_iou).unwrap();
    let s = cat_samples(&ps, data.source, &oracle).unwrap();
    let t = cat_samples(&pt, data.target, &oracle).unwrap();
    let mut cat = CatAdaptor::new(world.feat_dim, k, &cfg.cat(), 0);
    train_category_adaptor(&mut cat, &s, &t, &cfg.cat(), 1).unwrap();
    pseudo_label_categories(&cat, &mut pt, &t);
    let (sf, tf) = select_foreground(&ps, &pt, k).expect("foreground on both sides");
    let bs = box_samples(&sf, data.source, &oracle, cfg.enlarge_factor, true).unwrap();
    let bt = box_samples(&tf, data.target, &oracle, cfg.enlarge_factor, false).unwrap();
    let mut boxes = BoxAdaptor::new(world.feat_dim, k, &cfg.boxes(), 0);
    train_box_adaptor(&mut boxes, &bs, &bt, &cfg.boxes(), 2).unwrap();
    let names_ok = det
        .checkpoint()
        .param_names()
        .all(|n| ["rpn.", "cls.", "reg."].iter().any(|p| n.starts_with(p)));
    (det.checkpoint().to_bytes() == before, names_ok)
}
