use mmseg_autodiff::{Tape, Tensor};
use mmseg_core::backbone::{self, BackboneConfig, Variant};
use mmseg_core::eam;
use mmseg_core::losses::{self, LossWeights};
use mmseg_core::params::Graph;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn icr(e1: &[Tensor], e2: &[Tensor], tau: f64) -> f64 {
    let mut t = Tape::new();
    let a: Vec<_> = e1.iter().map(|e| t.constant(e.clone())).collect();
    let b: Vec<_> = e2.iter().map(|e| t.constant(e.clone())).collect();
    let l = losses::icr_loss(&mut t, &a, &b, tau).unwrap();
    t.value(l).item().unwrap()
}

fn mcr(q1: &Tensor, q2: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (a, b) = (t.constant(q1.clone()), t.constant(q2.clone()));
    let l = losses::mcr_loss(&mut t, a, b).unwrap();
    t.value(l).item().unwrap()
}

fn correlations(seed: u64, z: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3).map(|_| Tensor::randn([z, z], 2.0, &mut rng)).collect()
}

fn shift_rows(e: &Tensor, seed: u64) -> Tensor {
    let z = e.shape()[1];
    let shifts = Tensor::randn([e.shape()[0]], 3.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let data = e.data().iter().enumerate().map(|(k, v)| v + shifts.data()[k / z]).collect();
    Tensor::new(e.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn icr_is_zero_on_identical_inputs(seed in any::<u64>(), z in 2usize..5, tau in 0.5f64..16.0) {
        let e = correlations(seed, z);
        prop_assert_eq!(icr(&e, &e, tau), 0.0);
    }

    #[test]
    fn icr_is_exactly_symmetric(seed in any::<u64>(), z in 2usize..5, tau in 0.5f64..16.0) {
        let (a, b) = (correlations(seed, z), correlations(seed ^ 1, z));
        prop_assert_eq!(icr(&a, &b, tau), icr(&b, &a, tau));
    }

    #[test]
    fn icr_ignores_row_shifts(seed in any::<u64>(), z in 2usize..5, tau in 0.5f64..16.0) {
        let (a, b) = (correlations(seed, z), correlations(seed ^ 1, z));
        let shifted: Vec<Tensor> = a.iter().enumerate().map(|(k, e)| shift_rows(e, seed ^ k as u64)).collect();
        prop_assert!((icr(&a, &b, tau) - icr(&shifted, &b, tau)).abs() < 1e-9);
    }

    #[test]
    fn icr_decreases_with_temperature(seed in any::<u64>(), z in 2usize..5) {
        let (a, b) = (correlations(seed, z), correlations(seed ^ 1, z));
        let values: Vec<f64> = [1.0, 2.0, 4.0, 8.0, 16.0].iter().map(|&t| icr(&a, &b, t)).collect();
        for w in values.windows(2) {
            prop_assert!(w[1] <= w[0], "{values:?}");
        }
    }

    #[test]
    fn mcr_vanishes_on_equal_embeddings(seed in any::<u64>(), z in 1usize..5, d in 1usize..6) {
        let q = Tensor::randn([z, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(mcr(&q, &q).abs() < 1e-12);
    }

    #[test]
    fn mcr_ignores_positive_row_scales(seed in any::<u64>(), z in 1usize..5, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q1, q2) = (Tensor::randn([z, d], 1.0, &mut rng), Tensor::randn([z, d], 1.0, &mut rng));
        let scales = Tensor::uniform([z], 1.0, &mut rng);
        let data = q1.data().iter().enumerate().map(|(k, v)| v * 10f64.powf(scales.data()[k / d])).collect();
        let scaled = Tensor::new([z, d], data).unwrap();
        prop_assert!((mcr(&q1, &q2) - mcr(&scaled, &q2)).abs() < 1e-9);
    }
}

#[test]
fn aux_loss_reaches_attention_and_projection_but_not_kernels() {
    let cfg = BackboneConfig::minimal(Variant::V2);
    let store = backbone::init_model(&cfg, 4).unwrap();
    let mut g = Graph::new(&store);
    let x = g.tape.constant(Tensor::randn([cfg.height, cfg.width, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
    let seg = backbone::segment(&mut g, &cfg, x, 0).unwrap();
    let out = eam::run_eam_cascade(&mut g, &cfg, &seg.features, 0, false).unwrap();
    let labels: Vec<u8> = (0..cfg.height * cfg.width).map(|i| (i % 2) as u8).collect();
    let loss = losses::aux_loss(&mut g.tape, &out.aux_logits, &labels, cfg.height, cfg.width).unwrap();
    let grads = g.backward(loss).unwrap();
    let reached = |n: &str| grads.by_name(&store, n).is_some_and(|t| t.data().iter().any(|&v| v != 0.0));
    assert!(reached("eam.m0.s1.mca.wq"));
    assert!(reached("eam.m0.s3.mca.wk"));
    assert!(reached("eam.m0.s2.aux.weight"));
    for s in 1..=3 {
        assert!(!reached(&format!("eam.m0.s{s}.kernels")));
    }
}

#[test]
fn logged_parts_recombine_to_the_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut t = Tape::new();
    let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
    let mut parts = losses::LossParts::default();
    for _ in 0..2 {
        let l = t.constant(Tensor::randn([4, 4, 3], 1.0, &mut rng));
        parts.seg.push(losses::seg_loss(&mut t, l, &labels).unwrap());
        let a = t.constant(Tensor::randn([2, 2, 3], 1.0, &mut rng));
        parts.aux.push(losses::aux_loss(&mut t, &[a], &labels, 4, 4).unwrap());
    }
    let q1 = t.constant(Tensor::randn([3, 4], 1.0, &mut rng));
    let q2 = t.constant(Tensor::randn([3, 4], 1.0, &mut rng));
    parts.mcr = Some(losses::mcr_loss(&mut t, q1, q2).unwrap());
    let e1 = t.constant(Tensor::randn([3, 3], 1.0, &mut rng));
    let e2 = t.constant(Tensor::randn([3, 3], 1.0, &mut rng));
    parts.icr = Some(losses::icr_loss(&mut t, &[e1], &[e2], 4.0).unwrap());
    let w = LossWeights {
        alpha: 0.7,
        beta: 0.4,
        gamma: 1.3,
        tau: 4.0,
    };
    let (total, breakdown) = losses::total_loss(&mut t, &parts, &w).unwrap();
    let v = t.value(total).item().unwrap();
    let manual = breakdown.seg[0]
        + breakdown.seg[1]
        + w.alpha * (breakdown.aux[0] + breakdown.aux[1])
        + w.beta * breakdown.mcr
        + w.gamma * breakdown.icr;
    assert!((v - manual).abs() < 1e-12);
    assert_eq!(breakdown.recombine(&w), v);
}
