use mmseg_autodiff::Tensor;
use mmseg_core::backbone::{self, BackboneConfig, Variant};
use mmseg_core::params::Graph;
use mmseg_core::synthdata::{
    generate_dataset, AppearanceProfile, Dataset, DatasetSpec, SceneSpec, Split,
};
use mmseg_core::train::strip::removable_count;
use mmseg_core::train::{evaluate_on, strip_eam, train_on, Checkpoint, TrainConfig, TrainVariant};
use mmseg_core::Error;

fn tiny_dataset(n: usize, seed: u64) -> Dataset {
    generate_dataset(&DatasetSpec {
        scene: SceneSpec::for_extent(16, 16, 2),
        profiles: vec![AppearanceProfile::modality_a(2), AppearanceProfile::modality_b(2)],
        counts: vec![n, n],
        seed,
    })
    .unwrap()
}

fn tiny_config(variant: TrainVariant, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        backbone: BackboneConfig::minimal(Variant::V3),
        steps,
        batch_size: 2,
        variant,
        seed: 3,
        ..Default::default()
    };
    cfg.optimizer.lr = 3e-3;
    cfg
}

fn logits(ckpt: &Checkpoint, img: &Tensor, m: usize) -> Tensor {
    let cfg = ckpt.config.model_config();
    let mut g = Graph::inference(&ckpt.store);
    let x = g.tape.constant(img.clone());
    let s = backbone::segment(&mut g, &cfg, x, m).unwrap();
    g.tape.value(s.logits).clone()
}

#[test]
fn zero_steps_return_the_initialization() {
    let ds = tiny_dataset(10, 1);
    let cfg = tiny_config(TrainVariant::JointV3Cr, 0);
    let out = train_on(&cfg, &ds, None).unwrap();
    assert!(out.log.is_empty());
    let init = backbone::init_model(&cfg.model_config(), cfg.seed).unwrap();
    assert_eq!(out.checkpoint.store, init);
}

#[test]
fn same_seed_gives_identical_checkpoints_and_reports() {
    let ds = tiny_dataset(10, 2);
    let cfg = tiny_config(TrainVariant::JointV3Cr, 4);
    let a = train_on(&cfg, &ds, None).unwrap();
    let b = train_on(&cfg, &ds, None).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log, b.log);
    let ra = evaluate_on(&a.checkpoint, &ds, Split::Test).unwrap();
    let rb = evaluate_on(&b.checkpoint, &ds, Split::Test).unwrap();
    assert_eq!(ra.to_csv(), rb.to_csv());
    let other = train_on(&TrainConfig { seed: 4, ..cfg }, &ds, None).unwrap();
    assert_ne!(a.checkpoint.store, other.checkpoint.store);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let ds = tiny_dataset(10, 3);
    let full_cfg = tiny_config(TrainVariant::JointV3Cr, 6);
    let full = train_on(&full_cfg, &ds, None).unwrap();
    let half = train_on(&tiny_config(TrainVariant::JointV3Cr, 3), &ds, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    half.checkpoint.save(&path).unwrap();
    let resumed = train_on(&full_cfg, &ds, Some(Checkpoint::load(&path).unwrap())).unwrap();
    assert_eq!(resumed.checkpoint.to_bytes().unwrap(), full.checkpoint.to_bytes().unwrap());
    assert_eq!([half.log, resumed.log].concat(), full.log);
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let ds = tiny_dataset(10, 4);
    let out = train_on(&tiny_config(TrainVariant::JointV3, 2), &ds, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a/one.ckpt"), dir.path().join("two.ckpt"));
    out.checkpoint.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    assert_eq!(loaded, out.checkpoint);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let mut bytes = std::fs::read(&p1).unwrap();
    bytes.push(0);
    assert!(Checkpoint::from_bytes(&bytes, &p1).is_err());
    bytes.truncate(bytes.len() - 9);
    assert!(Checkpoint::from_bytes(&bytes, &p1).is_err());
}

#[test]
fn stripped_models_predict_identically_and_are_smaller() {
    let ds = tiny_dataset(10, 5);
    let images: Vec<(Tensor, usize)> = ds.records.iter().take(8).map(|r| (r.sample.channels_last(), r.modality)).collect();
    let dir = tempfile::tempdir().unwrap();
    for variant in [TrainVariant::JointV2, TrainVariant::JointV3Cr] {
        let full = train_on(&tiny_config(variant, 3), &ds, None).unwrap().checkpoint;
        let lean = strip_eam(&full).unwrap();
        assert!(lean.store.entries().iter().all(|e| !e.name.starts_with("eam.") && !e.name.starts_with("calib.")));
        for (img, m) in &images {
            assert_eq!(logits(&full, img, *m), logits(&lean, img, *m), "{variant:?}");
        }
        assert_eq!(lean.store.param_count(), full.store.param_count() - removable_count(&full));
        let (pf, pl) = (dir.path().join("full.ckpt"), dir.path().join("lean.ckpt"));
        full.save(&pf).unwrap();
        lean.save(&pl).unwrap();
        assert!(std::fs::metadata(&pl).unwrap().len() < std::fs::metadata(&pf).unwrap().len());
        assert!(strip_eam(&lean).is_err());
        assert_eq!(
            evaluate_on(&full, &ds, Split::Test).unwrap().to_csv(),
            evaluate_on(&lean, &ds, Split::Test).unwrap().to_csv()
        );
    }
}

#[test]
fn loss_decreases_over_a_short_run() {
    let ds = tiny_dataset(10, 6);
    let mut cfg = tiny_config(TrainVariant::JointV3Cr, 200);
    cfg.batch_size = 1;
    let out = train_on(&cfg, &ds, None).unwrap();
    let mean = |rows: &[mmseg_core::train::LogRow]| rows.iter().map(|r| r.loss.total).sum::<f64>() / rows.len() as f64;
    let (head, tail) = (mean(&out.log[..10]), mean(&out.log[190..]));
    assert!(tail < head, "{head} -> {tail}");
    for r in &out.log {
        let w = cfg.effective_losses();
        assert!((r.loss.recombine(&w) - r.loss.total).abs() < 1e-9);
    }
}

#[test]
fn non_finite_inputs_abort_training() {
    let mut ds = tiny_dataset(10, 7);
    for r in ds.records.iter_mut().filter(|r| r.modality == 0 && r.split == Split::Train) {
        r.sample.image.data_mut()[0] = f64::NAN;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(TrainVariant::JointV3Cr, 3);
    cfg.log_path = Some(dir.path().join("log.csv"));
    match train_on(&cfg, &ds, None) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert!(dir.path().join("log.csv").exists());
}

#[test]
fn mismatched_data_is_rejected() {
    let ds = generate_dataset(&DatasetSpec::bimodal(10, 1)).unwrap();
    assert!(train_on(&tiny_config(TrainVariant::JointV2, 1), &ds, None).is_err());
    let small = tiny_dataset(10, 1);
    let mut cfg = tiny_config(TrainVariant::Baseline, 1);
    cfg.baseline_modality = "C".into();
    assert!(train_on(&cfg, &small, None).is_err());
}
