mod common;

use mmseg_autodiff::{Tape, Tensor};
use mmseg_core::backbone::{self, BackboneConfig, Variant};
use mmseg_core::eam;
use mmseg_core::params::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn vectorized_pipeline_matches_loops_on_200_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let worst = (0..200).map(|_| common::eam_oracle_gap(&mut rng)).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

/// Duplicates every column of a `[.., H, W]` tensor.
fn tile_columns(x: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let w = *s.last().unwrap();
    let mut shape = s.clone();
    *shape.last_mut().unwrap() = 2 * w;
    let data: Vec<f64> = x.data().chunks(w).flat_map(|row| row.iter().flat_map(|&v| [v, v])).collect();
    Tensor::new(shape, data).unwrap()
}

fn correlations(a: &Tensor, s: &Tensor, eps: f64) -> Tensor {
    let mut t = Tape::new();
    let (av, sv) = (t.constant(a.clone()), t.constant(s.clone()));
    let (b, gate) = eam::semantic_reweighting(&mut t, av, sv).unwrap();
    eam::reference::aggregation(t.value(b), t.value(gate), eps)
}

#[test]
fn correlations_are_invariant_to_spatial_tiling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (z, n, h, w) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
        let a = Tensor::randn([z, n, h, w], 1.0, &mut rng);
        let s = Tensor::randn([z, z, h, w], 1.0, &mut rng);
        let (at, st) = (tile_columns(&a), tile_columns(&s));
        // without the denominator guard numerator and denominator both double
        let exact = correlations(&a, &s, 0.0).max_abs_diff(&correlations(&at, &st, 0.0));
        assert!(exact < 1e-9, "{exact:e}");
        // the guard perturbs the ratio by at most ε/(2·den) relative
        let guarded = correlations(&a, &s, eam::AGGREGATION_EPS);
        let gap = guarded.max_abs_diff(&correlations(&at, &st, eam::AGGREGATION_EPS));
        assert!(gap < 1e-5 * guarded.data().iter().fold(1.0f64, |m, v| m.max(v.abs())), "{gap:e}");
    }
}

#[test]
fn gates_sum_to_one_at_every_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (z, n, h, w) = (4, 3, 3, 2);
    let mut t = Tape::new();
    let a = t.constant(Tensor::randn([z, n, h, w], 1.0, &mut rng));
    let s = t.constant(Tensor::randn([z, z, h, w], 5.0, &mut rng));
    let (_, gate) = eam::semantic_reweighting(&mut t, a, s).unwrap();
    let g = t.value(gate);
    for i in 0..z {
        for p in 0..h * w {
            let sum: f64 = (0..z).map(|j| g.data()[(i * z + j) * h * w + p]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn segmentation_does_not_depend_on_the_cascade() {
    for variant in [Variant::V1, Variant::V2] {
        let cfg = BackboneConfig::minimal(variant);
        let store = backbone::init_model(&cfg, 3).unwrap();
        let img = Tensor::randn([cfg.height, cfg.width, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let plain = {
            let mut g = Graph::inference(&store);
            let x = g.tape.constant(img.clone());
            let s = backbone::segment(&mut g, &cfg, x, 1).unwrap();
            g.tape.value(s.logits).clone()
        };
        let with_eam = {
            let mut g = Graph::inference(&store);
            let x = g.tape.constant(img.clone());
            let s = backbone::segment(&mut g, &cfg, x, 1).unwrap();
            eam::run_eam_cascade(&mut g, &cfg, &s.features, 1, true).unwrap();
            g.tape.value(s.logits).clone()
        };
        assert_eq!(plain, with_eam);
    }
}

#[test]
fn cascade_errors_on_missing_modality() {
    let cfg = BackboneConfig::minimal(Variant::V2);
    let store = backbone::init_model(&cfg, 3).unwrap();
    let mut g = Graph::inference(&store);
    let x = g.tape.constant(Tensor::zeros([cfg.height, cfg.width, 3]));
    let s = backbone::segment(&mut g, &cfg, x, 0).unwrap();
    assert!(eam::run_eam_cascade(&mut g, &cfg, &s.features, 5, false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_maps_give_zero_correlations(z in 1usize..4, n in 1usize..4, d in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tape::new();
        let q = t.constant(Tensor::randn([z, d], 1.0, &mut rng));
        let a = t.constant(Tensor::zeros([z, n, h, w]));
        let k = t.constant(Tensor::randn([z, d, n], 1.0, &mut rng));
        let e = eam::semantic_correlations(&mut t, q, a, k).unwrap();
        prop_assert!(t.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_holds_for_arbitrary_seeds(seed in any::<u64>()) {
        let gap = common::eam_oracle_gap(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(gap < 1e-10);
    }
}
