mod support;

use atei_core::atei::{AteiMode, FcLayer};
use atei_core::data::{generate_synthetic, SegmentRecord};
use atei_core::eval::{run_cross_validation, run_cross_validation_variants};
use atei_core::fusion::{train_incremental, DepressionModel, TrainConfig};
use atei_core::history::Phase;
use support::{fc2_scaled, small_config, tiny_synth};

fn records(per_class: usize, seed: u64) -> Vec<SegmentRecord> {
    generate_synthetic(&tiny_synth(per_class, seed)).unwrap().records
}

fn train(cfg: &TrainConfig, recs: &[SegmentRecord]) -> (DepressionModel, atei_core::history::TrainHistory) {
    let refs: Vec<&SegmentRecord> = recs.iter().collect();
    train_incremental(&refs, cfg).unwrap()
}

#[test]
fn alpha_stays_on_the_simplex_after_every_step() {
    let recs = records(3, 1);
    let cfg = TrainConfig {
        lr: 0.05,
        max_epochs: 3,
        batch_size: 4,
        ..fc2_scaled()
    };
    let (model, history) = train(&cfg, &recs);
    let joint: Vec<_> = history.batches.iter().filter(|b| b.phase == Phase::Joint).collect();
    assert_eq!(joint.len(), 3 * recs.len().div_ceil(4));
    for b in &joint {
        let sum = b.alpha_sum.expect("scaling records alpha");
        assert!((sum - 1.0).abs() <= 1e-6, "sum {sum}");
        assert!(b.alpha_min.unwrap() >= 0.0);
    }
    let alpha = model.alpha().unwrap();
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    // The large learning rate must actually have moved alpha off uniform.
    let uniform = 1.0 / alpha.len() as f64;
    assert!(alpha.iter().any(|a| (a - uniform).abs() > 1e-4));
}

#[test]
fn recorded_total_loss_is_the_exact_sum_of_its_terms() {
    let recs = records(2, 2);
    for mode in [
        Some(AteiMode::Embedding(FcLayer::Fc2)),
        Some(AteiMode::ZeroOne),
        Some(AteiMode::ZeroOneLogits),
    ] {
        let cfg = small_config(mode, false);
        let (_, history) = train(&cfg, &recs);
        assert!(!history.batches.is_empty());
        for b in &history.batches {
            assert!(b.loss.is_additive(), "{mode:?}: {:?}", b.loss);
            assert_eq!(b.loss.total, b.loss.depression + b.loss.atei);
            if b.phase == Phase::Joint {
                assert!(b.loss.atei > 0.0);
            }
        }
    }
}

#[test]
fn without_the_extractor_the_atei_term_is_zero() {
    let recs = records(2, 3);
    let cfg = small_config(None, false);
    let (model, history) = train(&cfg, &recs);
    assert!(model.layout.atei.is_none());
    assert!(model.alpha().is_none());
    for b in &history.batches {
        assert_eq!(b.loss.atei, 0.0);
        assert_eq!(b.loss.total, b.loss.depression);
        assert!(b.alpha_sum.is_none());
    }
    for e in &history.epochs {
        assert_eq!(e.mean_atei, 0.0);
    }
}

#[test]
fn history_covers_pretraining_then_joint_epochs() {
    let recs = records(2, 4);
    let cfg = TrainConfig {
        pretrain_epochs: 2,
        max_epochs: 3,
        ..fc2_scaled()
    };
    let (_, history) = train(&cfg, &recs);
    let phases: Vec<(Phase, usize)> = history.epochs.iter().map(|e| (e.phase, e.epoch)).collect();
    assert_eq!(
        phases,
        vec![
            (Phase::Pretrain, 0),
            (Phase::Pretrain, 1),
            (Phase::Joint, 0),
            (Phase::Joint, 1),
            (Phase::Joint, 2)
        ]
    );
    let baseline = small_config(None, false);
    let (_, history) = train(&baseline, &recs);
    assert_eq!(history.epochs.len(), baseline.max_epochs);
}

#[test]
fn training_is_deterministic_down_to_checkpoint_bytes() {
    let recs = records(2, 5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = fc2_scaled();
    let (m1, h1) = train(&cfg, &recs);
    let (m2, h2) = train(&cfg, &recs);
    assert_eq!(h1, h2);
    let (p1, p2) = (dir.path().join("a.atck"), dir.path().join("b.atck"));
    m1.save(&p1, "trained").unwrap();
    m2.save(&p2, "trained").unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let (loaded, meta) = DepressionModel::load(&p1).unwrap();
    assert_eq!(meta.config, cfg);
    assert_eq!(meta.stage, "trained");
    let refs: Vec<&SegmentRecord> = recs.iter().collect();
    assert_eq!(loaded.predict(&refs).unwrap(), m1.predict(&refs).unwrap());

    let other = TrainConfig { seed: cfg.seed + 1, ..cfg };
    let (m3, _) = train(&other, &recs);
    assert_ne!(m3.predict(&refs).unwrap(), m1.predict(&refs).unwrap());
}

#[test]
fn shared_cross_validation_equals_standalone_runs() {
    let recs = records(2, 6);
    let cfgs = [
        small_config(None, false),
        small_config(Some(AteiMode::ZeroOne), false),
        small_config(Some(AteiMode::Embedding(FcLayer::Fc2)), false),
        fc2_scaled(),
    ];
    let shared = run_cross_validation_variants(&recs, &cfgs, 3, 1).unwrap();
    assert_eq!(shared.len(), cfgs.len());
    for (cfg, report) in cfgs.iter().zip(&shared) {
        let alone = run_cross_validation(&recs, cfg, 3, 1).unwrap();
        assert_eq!(&alone, report);
        assert_eq!(report.folds.len(), 3);
        assert_eq!(report.averaging, "macro");
    }
    let parallel = run_cross_validation_variants(&recs, &cfgs, 3, 3).unwrap();
    assert_eq!(parallel, shared);
}

#[test]
fn folds_are_speaker_disjoint_and_cover_every_subject() {
    let recs = records(3, 7);
    let report = run_cross_validation(&recs, &small_config(None, false), 3, 2).unwrap();
    let mut seen: Vec<&String> = report.folds.iter().flat_map(|f| &f.test_subjects).collect();
    let total = seen.len();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), total, "a subject was tested twice");
    assert_eq!(total, 9);
    let segments: usize = report.folds.iter().map(|f| f.test_segments).sum();
    assert_eq!(segments, recs.len());
    for f in &report.folds {
        assert_eq!(f.train_segments + f.test_segments, recs.len());
    }
}
