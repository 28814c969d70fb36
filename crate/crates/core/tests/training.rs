//! Training loop contracts: determinism, checkpoint round trips, resume,
//! interval arithmetic and a short smoke run.

mod common;

use std::collections::HashSet;

use cacl::checkpoint::Checkpoint;
use cacl::data::{generate_synthetic, split_manifest, SyntheticConfig};
use cacl::segmentation::MaskSource;
use cacl::training::{checkpoint_name, train, LoadedData, Trainer, BEST_CHECKPOINT};
use cacl::CaclError;
use common::*;

fn tiny_data(n: usize) -> LoadedData {
    let val = synthetic_patches(4, 16, 99)
        .into_iter()
        .map(|p| {
            let gt = cacl::segmentation::SegmentationMask::zeros(16, 16, MaskSource::GroundTruth);
            (p.pixels, gt)
        })
        .collect();
    LoadedData { train: synthetic_patches(n, 16, 1), val, train_paths: Vec::new(), val_paths: Vec::new() }
}

fn run_steps(t: &mut Trainer, data: &LoadedData, from: u64, to: u64) -> Vec<cacl::training::LossReport> {
    (from..=to)
        .map(|s| {
            let batch = t.batch_for_step(&data.train, s);
            t.train_step(&batch).unwrap()
        })
        .collect()
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let data = tiny_data(12);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.steps = 6;
    cfg.checkpoint_interval = 3;
    let a = train(&cfg, &data, &dir.path().join("a"), None, |_| {}).unwrap();
    let b = train(&cfg, &data, &dir.path().join("b"), None, |_| {}).unwrap();
    assert_eq!(a.checkpoints.len(), 2);
    for (pa, pb) in a.checkpoints.iter().zip(&b.checkpoints) {
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    }
    assert_eq!(a.reports, b.reports);

    cfg.seed = 1;
    let c = train(&cfg, &data, &dir.path().join("c"), None, |_| {}).unwrap();
    assert_ne!(std::fs::read(&a.checkpoints[1]).unwrap(), std::fs::read(&c.checkpoints[1]).unwrap());
}

#[test]
fn checkpoint_round_trip_reproduces_next_step() {
    let data = tiny_data(12);
    let mut t = Trainer::new(tiny_config()).unwrap();
    run_steps(&mut t, &data, 1, 7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    t.save_checkpoint(&path).unwrap();
    let mut restored = Trainer::load_checkpoint(&path).unwrap();
    assert_eq!(restored.step(), 7);
    assert_eq!(restored.codebook, t.codebook);

    // Same forward results.
    let x = batch_tensor(&data.train[..4]);
    let fa = t.autoencoder.encode(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let fb = restored.autoencoder.encode(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert_eq!(fa, fb);

    let next_a = run_steps(&mut t, &data, 8, 8);
    let next_b = run_steps(&mut restored, &data, 8, 8);
    assert_eq!(next_a, next_b);

    // Saving again is byte-identical.
    let again = dir.path().join("again.bin");
    restored.save_checkpoint(&again).unwrap();
    t.save_checkpoint(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = tiny_data(10);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.steps = 20;
    cfg.checkpoint_interval = 10;
    let full = train(&cfg, &data, &dir.path().join("full"), None, |_| {}).unwrap();

    let mut first = cfg.clone();
    first.steps = 10;
    let part = train(&first, &data, &dir.path().join("part"), None, |_| {}).unwrap();
    let ck = dir.path().join("part").join(checkpoint_name(10));
    let rest = train(&cfg, &data, &dir.path().join("part"), Some(&ck), |_| {}).unwrap();

    let stitched: Vec<_> = part.reports.iter().chain(&rest.reports).copied().collect();
    assert_eq!(stitched, full.reports);
    assert_eq!(
        std::fs::read(dir.path().join("full").join(checkpoint_name(20))).unwrap(),
        std::fs::read(dir.path().join("part").join(checkpoint_name(20))).unwrap()
    );
}

#[test]
fn one_step_writes_one_checkpoint() {
    let data = tiny_data(4);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.steps = 1;
    cfg.checkpoint_interval = 1;
    train(&cfg, &data, dir.path(), None, |_| {}).unwrap();
    let cks: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("checkpoint_"))
        .collect();
    assert_eq!(cks.len(), 1);
    let log = std::fs::read_to_string(dir.path().join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn empty_dataset_is_a_configuration_error() {
    let data = LoadedData { train: Vec::new(), val: Vec::new(), train_paths: Vec::new(), val_paths: Vec::new() };
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(train(&tiny_config(), &data, dir.path(), None, |_| {}), Err(CaclError::Config(_))));
}

#[test]
fn non_finite_loss_names_its_term() {
    let data = tiny_data(4);
    let mut cfg = tiny_config();
    cfg.w_recon = f64::MAX;
    cfg.w_map = f64::MAX;
    let mut t = Trainer::new(cfg).unwrap();
    let batch = t.batch_for_step(&data.train, 1);
    match t.train_step(&batch) {
        Err(CaclError::NonFinite { term, step }) => {
            assert_eq!(term, "generator_total");
            assert_eq!(step, 1);
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn weight_gating_reports_only_active_terms() {
    let data = tiny_data(4);
    let mut cfg = tiny_config();
    for k in ["w_commit", "w_codebook", "w_map", "w_cls"] {
        cfg.set(k, "0").unwrap();
    }
    let mut t = Trainer::new(cfg).unwrap();
    let batch = t.batch_for_step(&data.train, 1);
    let r = t.train_step(&batch).unwrap();
    assert!(r.reconstruction > 0.0);
    assert_eq!((r.commitment, r.codebook, r.mapping, r.classifier), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn reconstruction_improves_in_short_run() {
    let data = tiny_data(32);
    let mut cfg = tiny_config();
    cfg.hidden = 8;
    cfg.dim = 8;
    cfg.lr_generator = 1e-3;
    let mut t = Trainer::new(cfg).unwrap();
    let reports = run_steps(&mut t, &data, 1, 200);
    let early: f64 = reports[..5].iter().map(|r| r.reconstruction).sum::<f64>() / 5.0;
    let late: f64 = reports[195..].iter().map(|r| r.reconstruction).sum::<f64>() / 5.0;
    assert!(reports[199].reconstruction < reports[0].reconstruction);
    assert!(late < early, "{early} -> {late}");
}

#[test]
fn manifest_splits_are_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { image_size: 16, n_positive: 12, n_negative: 12, ..Default::default() };
    let m = split_manifest(&generate_synthetic(&cfg, dir.path()).unwrap(), (0.5, 0.25, 0.25), 3).unwrap();
    m.save(&dir.path().join("manifest.tsv")).unwrap();
    let loaded = LoadedData::from_manifest(&cacl::data::DatasetManifest::load(&dir.path().join("manifest.tsv")).unwrap()).unwrap();
    let train: HashSet<_> = loaded.train_paths.iter().collect();
    let val: HashSet<_> = loaded.val_paths.iter().collect();
    assert!(train.is_disjoint(&val));
    assert_eq!(train.len(), 12);
    assert_eq!(val.len(), 6);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = Trainer::new(tiny_config()).unwrap();
    let bytes = Checkpoint::capture(&t).unwrap().to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes).is_ok());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CaclError::Format { .. })));
    let mut future = bytes;
    future[8] = 99;
    assert!(Checkpoint::from_bytes(&future).is_err());
}

#[test]
fn best_checkpoint_follows_validation_across_resume() {
    let data = tiny_data(12);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.steps = 8;
    cfg.eval_interval = 2;
    cfg.checkpoint_interval = 4;
    let full = train(&cfg, &data, &dir.path().join("full"), None, |_| {}).unwrap();
    let (step, score) = full.best.unwrap();
    let first_max = full.validation.iter().fold((0, f64::NEG_INFINITY), |acc, &(s, v)| if v > acc.1 { (s, v) } else { acc });
    assert_eq!((step, score), first_max);
    let best = Trainer::load_checkpoint(&dir.path().join("full").join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.step(), step);

    let mut first = cfg.clone();
    first.steps = 4;
    train(&first, &data, &dir.path().join("part"), None, |_| {}).unwrap();
    let ck = dir.path().join("part").join(checkpoint_name(4));
    let rest = train(&cfg, &data, &dir.path().join("part"), Some(&ck), |_| {}).unwrap();
    assert_eq!(rest.best, full.best);
    // A best checkpoint written before the interruption carries the shorter schedule.
    let normalized = |run: &str| {
        let mut t = Trainer::load_checkpoint(&dir.path().join(run).join(BEST_CHECKPOINT)).unwrap();
        t.config.steps = cfg.steps;
        let path = dir.path().join(format!("{run}.bin"));
        t.save_checkpoint(&path).unwrap();
        std::fs::read(path).unwrap()
    };
    assert!(normalized("full") == normalized("part"), "best checkpoints differ");
}
