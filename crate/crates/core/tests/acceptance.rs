//! Acceptance run: one `PASS`/`FAIL` line per criterion.
//!
//! The deterministic criteria decide the exit status. The two trained
//! comparisons (variant ordering and few-shot gain) are experimental
//! outcomes: they are reported, but a miss does not fail the run.
//! `ACCEPTANCE_QUICK=1` skips the trained comparisons.

mod common;

use std::time::{Duration, Instant};

use mmseg_autodiff::{suite, Tape, Tensor};
use mmseg_core::backbone::{self, BackboneConfig, Variant};
use mmseg_core::eam;
use mmseg_core::gradsuite;
use mmseg_core::losses;
use mmseg_core::metrics::{average_symmetric_surface_distance, dice_coefficient, round_half_up};
use mmseg_core::params::{Graph, ParamGroup, ParamStore};
use mmseg_core::synthdata::{generate_dataset, make_unpaired_dataset, DatasetSpec, Split};
use mmseg_core::train::experiments::{self, Protocol};
use mmseg_core::train::strip::removable_count;
use mmseg_core::train::{evaluate_on, strip_eam, train_on, Checkpoint, TrainConfig, TrainVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(5 * 60);
const ORACLE_TOL: f64 = 1e-10;
const IDENTITY_TOL: f64 = 1e-9;
const ASD_TOL: f64 = 1e-9;
const BENCH_BUDGET: Duration = Duration::from_secs(30 * 60);
const BENCH_SEEDS: usize = 5;
const BENCH_SAMPLES: usize = 20;
const BENCH_STEPS: usize = 500;
const BENCH_BATCH: usize = 2;
const BENCH_LR: f64 = 4e-3;
const HARD_MODALITY_GAIN: f64 = 1.0;
const FEW_SHOT_GAIN: f64 = 5.0;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
    gating: bool,
}

fn report(outcomes: &mut Vec<Outcome>, name: &'static str, gating: bool, f: impl FnOnce() -> (bool, String)) {
    let started = Instant::now();
    let (passed, detail) = f();
    let o = Outcome {
        name,
        passed,
        detail: format!("{detail} [{:.1}s]", started.elapsed().as_secs_f64()),
        gating,
    };
    println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    outcomes.push(o);
}

fn gradient_suite() -> (bool, String) {
    let check = mmseg_autodiff::GradCheck {
        tol: GRAD_TOL,
        ..Default::default()
    };
    let started = Instant::now();
    let prims = suite::run_primitive_suite(100, 1, &check).expect("primitive suite");
    let comps = gradsuite::run_composite_suite(5, 1, &check).expect("composite suite");
    let elapsed = started.elapsed();
    let failed: Vec<&str> = prims
        .iter()
        .filter(|o| !o.passed())
        .map(|o| o.name)
        .chain(comps.iter().filter(|o| !o.passed()).map(|o| o.name))
        .collect();
    let worst = prims
        .iter()
        .map(|o| o.max_rel_error)
        .chain(comps.iter().map(|o| o.max_rel_error))
        .fold(0.0, f64::max);
    let min_prim = prims.iter().map(|o| o.trials).min().unwrap_or(0);
    let min_comp = comps.iter().map(|o| o.trials).min().unwrap_or(0);
    (
        failed.is_empty() && min_prim >= 100 && min_comp >= 5 && elapsed < GRAD_BUDGET,
        format!(
            "{} primitives x{min_prim}, {} composites x{min_comp}, worst rel err {worst:.2e}, {:.0}s, failed {failed:?}",
            prims.len(),
            comps.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn eam_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let worst = (0..200).map(|_| common::eam_oracle_gap(&mut rng)).fold(0.0, f64::max);
    (worst < ORACLE_TOL, format!("200 instances, max deviation {worst:.2e}"))
}

fn icr(a: &[Tensor], b: &[Tensor], tau: f64) -> f64 {
    let mut t = Tape::new();
    let av: Vec<_> = a.iter().map(|e| t.constant(e.clone())).collect();
    let bv: Vec<_> = b.iter().map(|e| t.constant(e.clone())).collect();
    let l = losses::icr_loss(&mut t, &av, &bv, tau).unwrap();
    t.value(l).item().unwrap()
}

fn mcr(a: &Tensor, b: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let l = losses::mcr_loss(&mut t, av, bv).unwrap();
    t.value(l).item().unwrap()
}

fn loss_identities() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut fails = Vec::new();
    let (mut shift_gap, mut scale_gap, mut self_mcr) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..50 {
        let z = rng.random_range(2..=5);
        let d = rng.random_range(1..=8);
        let draw = |rng: &mut ChaCha8Rng| (0..3).map(|_| Tensor::randn([z, z], 2.0, rng)).collect::<Vec<_>>();
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        let tau = rng.random_range(0.5..16.0);
        if icr(&a, &a, tau) != 0.0 {
            fails.push(format!("icr(a,a) trial {trial}"));
        }
        if icr(&a, &b, tau) != icr(&b, &a, tau) {
            fails.push(format!("icr symmetry trial {trial}"));
        }
        let shifted: Vec<Tensor> = a
            .iter()
            .map(|e| {
                let s: Vec<f64> = (0..z).map(|_| rng.random_range(-5.0..5.0)).collect();
                let data = e.data().iter().enumerate().map(|(k, v)| v + s[k / z]).collect();
                Tensor::new([z, z], data).unwrap()
            })
            .collect();
        shift_gap = shift_gap.max((icr(&a, &b, tau) - icr(&shifted, &b, tau)).abs());
        let trend: Vec<f64> = [1.0, 2.0, 4.0, 8.0, 16.0].iter().map(|&t| icr(&a, &b, t)).collect();
        if trend.windows(2).any(|w| w[1] > w[0]) {
            fails.push(format!("tau trend trial {trial}: {trend:?}"));
        }
        let q1 = Tensor::randn([z, d], 1.0, &mut rng);
        let q2 = Tensor::randn([z, d], 1.0, &mut rng);
        self_mcr = self_mcr.max(mcr(&q1, &q1).abs());
        let scales: Vec<f64> = (0..z).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
        let data = q1.data().iter().enumerate().map(|(k, v)| v * scales[k / d]).collect();
        let scaled = Tensor::new([z, d], data).unwrap();
        scale_gap = scale_gap.max((mcr(&q1, &q2) - mcr(&scaled, &q2)).abs());
    }
    let ok = fails.is_empty() && shift_gap < IDENTITY_TOL && scale_gap < IDENTITY_TOL && self_mcr < IDENTITY_TOL;
    (
        ok,
        format!(
            "50 trials; |mcr(Q,Q)| {self_mcr:.1e}, row-scale gap {scale_gap:.1e}, row-shift gap {shift_gap:.1e}, exact failures {fails:?}"
        ),
    )
}

fn toy_logits(ckpt: &Checkpoint, img: &Tensor, m: usize) -> Tensor {
    let cfg = ckpt.config.model_config();
    let mut g = Graph::inference(&ckpt.store);
    let x = g.tape.constant(img.clone());
    let s = backbone::segment(&mut g, &cfg, x, m).unwrap();
    g.tape.value(s.logits).clone()
}

fn plug_and_play() -> (bool, String) {
    let ds = generate_dataset(&DatasetSpec::bimodal(20, 77)).unwrap();
    let held_out: Vec<(Tensor, usize)> = ds
        .records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| (r.sample.channels_last(), r.modality))
        .collect();
    assert_eq!(held_out.len(), 8);
    let mut ok = true;
    let mut notes = Vec::new();
    for variant in [TrainVariant::JointV2, TrainVariant::JointV3Cr] {
        let mut cfg = TrainConfig {
            steps: 2,
            variant,
            ..Default::default()
        };
        cfg.optimizer.lr = BENCH_LR;
        let full = train_on(&cfg, &ds, None).unwrap().checkpoint;
        let lean = strip_eam(&full).unwrap();
        let identical = held_out.iter().all(|(img, m)| toy_logits(&full, img, *m) == toy_logits(&lean, img, *m));
        let census = removable_count(&full);
        let delta = full.store.param_count() - lean.store.param_count();
        let smaller = lean.to_bytes().unwrap().len() < full.to_bytes().unwrap().len();
        ok &= identical && delta == census && smaller;
        notes.push(format!(
            "{}: bit-identical {identical}, removed {delta} of census {census}, smaller {smaller}",
            variant.label()
        ));
    }
    (ok, notes.join("; "))
}

fn calibration_identity() -> (bool, String) {
    let v3 = BackboneConfig::default();
    let v2 = BackboneConfig {
        variant: Variant::V2,
        ..v3.clone()
    };
    let mut calibrated = backbone::init_model(&v3, 5).unwrap();
    let plain = backbone::init_model(&v2, 5).unwrap();
    let (z, e) = (v3.classes, v3.embed_width());
    for m in 0..v3.modalities {
        let mut q = Tensor::zeros([z, e]);
        q.data_mut()[0] = 1.0;
        *calibrated.get_mut(&eam::query_name(m)).unwrap() = q;
    }
    for entry in calibrated.entries_mut().iter_mut().filter(|e| e.group == ParamGroup::Calibration) {
        let shape = entry.value.shape().to_vec();
        let mut w = Tensor::zeros(shape.clone());
        if entry.name.ends_with(".w1") {
            w.data_mut()[0] = 1.0;
        } else {
            w.data_mut()[..shape[1]].fill(1.0);
        }
        entry.value = w;
    }
    let run = |store: &ParamStore, cfg: &BackboneConfig, img: &Tensor, m: usize| {
        let mut g = Graph::inference(store);
        let x = g.tape.constant(img.clone());
        let s = backbone::segment(&mut g, cfg, x, m).unwrap();
        g.tape.value(s.logits).clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut same = true;
    for m in 0..2 {
        let img = Tensor::randn([v3.height, v3.width, 3], 1.0, &mut rng);
        same &= run(&calibrated, &v3, &img, m) == run(&plain, &v2, &img, m);
    }
    (same, format!("unit scales reproduce the uncalibrated model bit-for-bit: {same}"))
}

fn metrics_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut dice_mismatch = 0;
    let mut asd_gap = 0.0f64;
    let mut asd_mismatch = 0;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let p = common::random_map(&mut rng, h, w, 3);
        let t = common::random_map(&mut rng, h, w, 3);
        for c in 0..3u8 {
            if dice_coefficient(&p, &t, c).unwrap() != common::brute_dice(&p, &t, c) {
                dice_mismatch += 1;
            }
            match (
                average_symmetric_surface_distance(&p, &t, c, (1.0, 1.0)).unwrap(),
                common::brute_asd(&p, &t, c, (1.0, 1.0)),
            ) {
                (Some(a), Some(b)) => asd_gap = asd_gap.max((a - b).abs()),
                (a, b) if a != b => asd_mismatch += 1,
                _ => {}
            }
        }
    }
    let overall: f64 = (94.0 + 88.7) / 2.0;
    let printed = format!("{:.1}", round_half_up(overall, 1));
    let ok = dice_mismatch == 0 && asd_mismatch == 0 && asd_gap < ASD_TOL && printed == "91.4";
    (
        ok,
        format!(
            "50 pairs: Dice mismatches {dice_mismatch}, ASD max gap {asd_gap:.1e} ({asd_mismatch} definedness mismatches); (94.0, 88.7) -> {overall:.2} -> {printed}"
        ),
    )
}

fn protocol() -> Protocol {
    let mut base = TrainConfig {
        steps: BENCH_STEPS,
        batch_size: BENCH_BATCH,
        ..Default::default()
    };
    base.optimizer.lr = BENCH_LR;
    Protocol::new(base, BENCH_SAMPLES, BENCH_SEEDS)
}

fn toy_benchmark() -> (bool, String) {
    let started = Instant::now();
    let variants = [TrainVariant::JointV2, TrainVariant::JointV3, TrainVariant::JointV3Cr];
    let rows = experiments::ablate(&protocol(), &variants).expect("benchmark runs");
    let elapsed = started.elapsed();
    print!("{}", experiments::comparison_table(&rows));
    let [v2, v3, cr] = [&rows[0], &rows[1], &rows[2]].map(|r| r.mean_overall());
    let hard = |i: usize| rows[i].mean_modality("B").unwrap_or(f64::NAN);
    let gain = hard(2) - hard(0);
    let ok = cr >= v3 && v3 >= v2 && gain >= HARD_MODALITY_GAIN && elapsed < BENCH_BUDGET;
    (
        ok,
        format!(
            "mean Dice V2 {v2:.2}, V3 {v3:.2}, V3+CR {cr:.2}; B gain of V3+CR over V2 {gain:+.2}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn few_shot() -> (bool, String) {
    let [joint, base] = experiments::few_shot(&protocol(), TrainVariant::JointV3Cr, "B", 1).expect("few-shot runs");
    let (j, b) = (joint.mean_modality("B").unwrap(), base.mean_modality("B").unwrap());
    (
        j - b >= FEW_SHOT_GAIN,
        format!("B Dice with 1 B sample: V3+CR {j:.2} vs single-modality {b:.2} ({:+.2})", j - b),
    )
}

fn determinism() -> (bool, String) {
    let spec = DatasetSpec::bimodal(10, 404);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let files = |d: &std::path::Path| {
        let mut out = Vec::new();
        let mut stack = vec![d.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(d).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    };
    let ds = make_unpaired_dataset(&spec, dirs[0].path()).unwrap();
    make_unpaired_dataset(&spec, dirs[1].path()).unwrap();
    let data_same = files(dirs[0].path()) == files(dirs[1].path());
    let cfg = TrainConfig {
        steps: 3,
        ..Default::default()
    };
    let a = train_on(&cfg, &ds, None).unwrap().checkpoint;
    let b = train_on(&cfg, &ds, None).unwrap().checkpoint;
    let ckpt_same = a.to_bytes().unwrap() == b.to_bytes().unwrap();
    let report_same = evaluate_on(&a, &ds, Split::Test).unwrap().to_csv() == evaluate_on(&b, &ds, Split::Test).unwrap().to_csv();
    (
        data_same && ckpt_same && report_same,
        format!("datasets {data_same}, checkpoints {ckpt_same}, reports {report_same}"),
    )
}

fn main() {
    let quick = std::env::var("ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let mut outcomes = Vec::new();
    report(&mut outcomes, "gradient suite", true, gradient_suite);
    report(&mut outcomes, "EAM oracle suite", true, eam_oracle);
    report(&mut outcomes, "loss identities", true, loss_identities);
    report(&mut outcomes, "plug-and-play export", true, plug_and_play);
    report(&mut outcomes, "calibration identity", true, calibration_identity);
    report(&mut outcomes, "metrics", true, metrics_oracles);
    if quick {
        println!("SKIP toy benchmark: ACCEPTANCE_QUICK=1");
        println!("SKIP few-shot trend: ACCEPTANCE_QUICK=1");
    } else {
        report(&mut outcomes, "toy benchmark", false, toy_benchmark);
        report(&mut outcomes, "few-shot trend", false, few_shot);
    }
    report(&mut outcomes, "determinism", true, determinism);

    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria passed", outcomes.len());
    let blocking: Vec<&str> = outcomes.iter().filter(|o| o.gating && !o.passed).map(|o| o.name).collect();
    if !blocking.is_empty() {
        eprintln!("deterministic criteria failed: {blocking:?}");
        std::process::exit(1);
    }
}
