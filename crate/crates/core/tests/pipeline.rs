mod common;

use dadapt::eval::GroundTruth;
use dadapt::pipeline::{load_round, round_dir, run_dadapt, PipelineConfig, PipelineData};
use dadapt::synthworld::{generate_benchmark, Scene, SceneAnnotations, UnlabeledScene, WorldConfig};

struct Bench {
    world: WorldConfig,
    src: Vec<Scene>,
    tgt: Vec<UnlabeledScene>,
    gt: GroundTruth,
}

fn bench() -> (Bench, PipelineConfig) {
    let (world, cfg) = common::tiny();
    let (src, tgt) = generate_benchmark(&world).unwrap();
    let gt = GroundTruth::from_annotations(&tgt.iter().map(SceneAnnotations::of).collect::<Vec<_>>());
    let tgt = tgt.into_iter().map(UnlabeledScene::new).collect();
    (Bench { world, src, tgt, gt }, cfg)
}

fn data(b: &Bench) -> PipelineData<'_> {
    PipelineData {
        world: &b.world,
        source: &b.src,
        target: &b.tgt,
        target_gt: Some(&b.gt),
    }
}

#[test]
fn same_seed_gives_identical_metrics_files() {
    let (b, cfg) = bench();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    run_dadapt(&cfg, &data(&b), None, Some(d1.path()), false).unwrap();
    run_dadapt(&cfg, &data(&b), None, Some(d2.path()), false).unwrap();
    for r in 1..=cfg.rounds {
        for f in ["metrics.json", "detector.ckpt", "props_tgt.jsonl"] {
            let a = std::fs::read(round_dir(d1.path(), r).join(f)).unwrap();
            let c = std::fs::read(round_dir(d2.path(), r).join(f)).unwrap();
            assert_eq!(a, c, "round {r} {f}");
        }
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (b, cfg) = bench();
    let full = tempfile::tempdir().unwrap();
    let out = run_dadapt(&cfg, &data(&b), None, Some(full.path()), false).unwrap();

    let part = tempfile::tempdir().unwrap();
    let first = PipelineConfig { rounds: 1, ..cfg.clone() };
    run_dadapt(&first, &data(&b), None, Some(part.path()), false).unwrap();
    let resumed = run_dadapt(&cfg, &data(&b), None, Some(part.path()), true).unwrap();

    assert_eq!(resumed.rounds.len(), cfg.rounds);
    assert_eq!(resumed.detector.checkpoint(), out.detector.checkpoint());
    assert_eq!(
        std::fs::read(round_dir(part.path(), 2).join("metrics.json")).unwrap(),
        std::fs::read(round_dir(full.path(), 2).join("metrics.json")).unwrap()
    );
}

#[test]
fn saved_rounds_load_back() {
    let (b, cfg) = bench();
    let dir = tempfile::tempdir().unwrap();
    let out = run_dadapt(&cfg, &data(&b), None, Some(dir.path()), false).unwrap();
    for art in &out.rounds {
        assert_eq!(&load_round(dir.path(), art.round).unwrap(), art);
    }
    assert!(dir.path().join("final/detector.ckpt").exists());
    assert!(dir.path().join("pretrained/iou_hist.svg").exists());
}

#[test]
fn final_detector_has_no_adaptor_parameters() {
    let (b, cfg) = bench();
    let out = run_dadapt(&cfg, &data(&b), None, None, false).unwrap();
    let names: Vec<String> = out.detector.checkpoint().param_names().map(String::from).collect();
    assert!(!names.is_empty());
    assert!(names.iter().all(|n| ["rpn.", "cls.", "reg."].iter().any(|p| n.starts_with(p))));
    assert_eq!(out.detector.store.len(), out.pretrained.store.len());
}

#[test]
fn every_ablation_runs() {
    let (b, cfg) = bench();
    let cfg = PipelineConfig {
        rounds: 1,
        ..cfg
    };
    let pre = dadapt::pipeline::pretrain(&cfg, &data(&b), &dadapt::synthworld::FeatureOracle::new(&b.world)).unwrap();
    for name in dadapt::pipeline::ABLATIONS {
        let mut c = cfg.clone();
        c.apply_ablation(name).unwrap();
        let out = run_dadapt(&c, &data(&b), Some(pre.clone()), None, false).unwrap();
        let m = out.rounds[0].metrics.report.as_ref().unwrap();
        assert!((0.0..=1.0).contains(&m.map), "{name}");
    }
}

#[test]
fn rejects_empty_domains() {
    let (b, cfg) = bench();
    let d = PipelineData {
        target: &[],
        ..data(&b)
    };
    assert!(run_dadapt(&cfg, &d, None, None, false).is_err());
}
