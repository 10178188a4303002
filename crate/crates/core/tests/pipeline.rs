use atlasseg_core::atlas::AtlasBundle;
use atlasseg_core::dataio::{
    load_dataset, load_manifest, preprocess_dataset, write_synthetic, generate_synthetic, LoadedDataset, Split, SynthConfig,
};
use atlasseg_core::losses::LossVariant;
use atlasseg_core::network::{load_checkpoint, save_checkpoint, UNetConfig};
use atlasseg_core::trainer::{evaluate_split, run_trials, train, Segmenter, TrainConfig};

fn small_synth() -> SynthConfig {
    SynthConfig { dims: [16, 16, 16], train: 4, val: 2, test: 2, seed: 3, ..SynthConfig::default() }
}

fn small_train(variant: LossVariant) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        epochs: 2,
        seeds: vec![0, 1],
        network: UNetConfig { dims: [16, 16, 16], levels: 3, base_channels: 2, ..UNetConfig::default() },
        ..TrainConfig::default()
    };
    cfg.optimizer.lr = 1e-3;
    cfg
}

#[test]
fn synthetic_dataset_survives_disk_and_preprocessing() {
    let ds = generate_synthetic(&small_synth()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_synthetic(&dir.path().join("raw"), &ds).unwrap();
    let manifest = load_manifest(&dir.path().join("raw/manifest.json")).unwrap();
    let loaded = load_dataset(&manifest).unwrap();
    assert_eq!(loaded.cases.len(), 8);
    assert_eq!(loaded.split(Split::Test).count(), 2);
    assert_eq!(loaded.atlas_mask, ds.atlas_mask);
    for (a, b) in loaded.cases.iter().zip(&ds.cases) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.gt_mask.as_ref(), Some(&b.mask));
    }

    let pre = preprocess_dataset(&manifest, None, &dir.path().join("pre")).unwrap();
    let again = load_dataset(&load_manifest(&dir.path().join("pre/manifest.json")).unwrap()).unwrap();
    assert_eq!(pre.cases.len(), 8);
    assert_eq!(again.atlas_image.dims(), [16, 16, 16]);
    // the training split's mean extremes map to 0 and 1
    let train: Vec<_> = again.split(Split::Train).map(|c| c.image.min_max()).collect();
    let n = train.len() as f64;
    let mean_lo = train.iter().map(|r| r.0).sum::<f64>() / n;
    let mean_hi = train.iter().map(|r| r.1).sum::<f64>() / n;
    assert!(mean_lo.abs() < 1e-5 && (mean_hi - 1.0).abs() < 1e-5, "{mean_lo} {mean_hi}");
}

#[test]
fn short_training_runs_end_to_end() {
    let ds = LoadedDataset::from_synthetic(&generate_synthetic(&small_synth()).unwrap());
    let cfg = small_train(LossVariant::New);
    let atlas = AtlasBundle::new(ds.atlas_image.clone(), ds.atlas_mask.clone(), cfg.t_lower_mm, cfg.t_upper_mm).unwrap();
    let mut seen = Vec::new();
    let trial = train(&ds, &atlas, &cfg, 0, &mut |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(trial.history.len(), 2);
    assert!(trial.history.iter().all(|r| r.train.total.is_finite() && r.val_dice.is_some()));
    assert!(!trial.selected.with_optimizer);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &trial.selected).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let evals = evaluate_split(&back, &ds, &atlas, Split::Test).unwrap();
    assert_eq!(evals.len(), 2);
    for e in &evals {
        assert!((0.0..=1.0).contains(&e.dice) && e.hd95_mm >= 0.0, "{e:?}");
    }
    let mut seg = Segmenter::from_checkpoint(&back).unwrap();
    let field = seg.predict(&ds.cases[0].image).unwrap();
    assert_eq!(field.grid().dims, [16, 16, 16]);
}

#[test]
fn trials_aggregate_per_seed() {
    let ds = LoadedDataset::from_synthetic(&generate_synthetic(&small_synth()).unwrap());
    let cfg = small_train(LossVariant::Vxm);
    let atlas = AtlasBundle::new(ds.atlas_image.clone(), ds.atlas_mask.clone(), cfg.t_lower_mm, cfg.t_upper_mm).unwrap();
    let out = run_trials(&ds, &atlas, &cfg, 2, &|_, _| {}).unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.trials.iter().map(|t| t.seed).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(out.test_records.len(), 4);
    assert!(out.median_test_dice > 0.5 && out.median_test_dice <= 1.0);
    // workers only change scheduling
    let serial = run_trials(&ds, &atlas, &cfg, 1, &|_, _| {}).unwrap();
    assert_eq!(serial.test_records, out.test_records);
}
