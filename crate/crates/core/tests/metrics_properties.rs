mod common;

use mmseg_core::metrics::{
    average_symmetric_surface_distance as asd, dice_coefficient as dice, report, round_half_up, EvalSample, LabelMap,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair(seed: u64) -> (LabelMap, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
    (common::random_map(&mut rng, h, w, 3), common::random_map(&mut rng, h, w, 3))
}

#[test]
fn dice_and_asd_match_brute_force_on_50_pairs() {
    for seed in 0..50 {
        let (p, t) = pair(seed);
        for c in 0..3u8 {
            assert_eq!(dice(&p, &t, c).unwrap(), common::brute_dice(&p, &t, c));
            let got = asd(&p, &t, c, (1.0, 1.0)).unwrap();
            let want = common::brute_asd(&p, &t, c, (1.0, 1.0));
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }
}

#[test]
fn overall_mean_rounds_like_printed_tables() {
    let overall: f64 = (94.0 + 88.7) / 2.0;
    assert!((overall - 91.35).abs() < 1e-12);
    assert_eq!(format!("{:.1}", round_half_up(overall, 1)), "91.4");
}

#[test]
fn truth_as_prediction_is_perfect_and_background_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names = vec!["A".to_string()];
    let truths: Vec<LabelMap> = (0..4).map(|_| common::random_map(&mut rng, 12, 12, 4)).collect();
    let perfect: Vec<EvalSample> = truths
        .iter()
        .map(|t| EvalSample {
            pred: t.clone(),
            truth: t.clone(),
            modality: 0,
        })
        .collect();
    let r = report(&perfect, &names, 4, (1.0, 1.0)).unwrap();
    for c in &r.modalities[0].per_class {
        assert_eq!(c.dice.mean, 100.0);
        assert_eq!(c.asd.mean, 0.0);
    }
    let blank: Vec<EvalSample> = truths
        .iter()
        .map(|t| EvalSample {
            pred: LabelMap::filled(12, 12, 0),
            truth: t.clone(),
            modality: 0,
        })
        .collect();
    let r = report(&blank, &names, 4, (1.0, 1.0)).unwrap();
    for c in &r.modalities[0].per_class {
        assert_eq!(c.dice.mean, 0.0);
    }
    let again = report(&blank, &names, 4, (1.0, 1.0)).unwrap();
    assert_eq!(r.to_csv(), again.to_csv());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_and_asd_are_symmetric(seed in any::<u64>(), c in 1u8..3) {
        let (p, t) = pair(seed);
        prop_assert_eq!(dice(&p, &t, c).unwrap(), dice(&t, &p, c).unwrap());
        prop_assert_eq!(asd(&p, &t, c, (1.0, 1.0)).unwrap(), asd(&t, &p, c, (1.0, 1.0)).unwrap());
    }

    #[test]
    fn doubling_spacing_doubles_asd(seed in any::<u64>(), c in 1u8..3) {
        let (p, t) = pair(seed);
        let one = asd(&p, &t, c, (1.0, 1.0)).unwrap();
        let two = asd(&p, &t, c, (2.0, 2.0)).unwrap();
        match (one, two) {
            (Some(a), Some(b)) => prop_assert!((2.0 * a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn dice_ignores_shared_pixel_permutations(seed in any::<u64>(), c in 1u8..3) {
        let (p, t) = pair(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let n = p.data.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffle = |m: &LabelMap| LabelMap::new(m.height, m.width, perm.iter().map(|&i| m.data[i]).collect()).unwrap();
        prop_assert_eq!(dice(&p, &t, c).unwrap(), dice(&shuffle(&p), &shuffle(&t), c).unwrap());
    }
}
