//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use mmseg_autodiff::{Tape, Tensor};
use mmseg_core::eam;
use mmseg_core::metrics::LabelMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random label map with `classes` labels, biased toward small blobs.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    let mut m = LabelMap::filled(h, w, 0);
    let fill = rng.random_range(0.0..0.6);
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(fill) {
                m.set(y, x, rng.random_range(1..classes));
            }
        }
    }
    m
}

pub fn brute_dice(p: &LabelMap, t: &LabelMap, c: u8) -> Option<f64> {
    let mut inter = 0;
    let mut np = 0;
    let mut nt = 0;
    for y in 0..p.height {
        for x in 0..p.width {
            let a = p.get(y, x) == c;
            let b = t.get(y, x) == c;
            if a {
                np += 1;
            }
            if b {
                nt += 1;
            }
            if a && b {
                inter += 1;
            }
        }
    }
    if np + nt == 0 {
        None
    } else {
        Some(200.0 * inter as f64 / (np + nt) as f64)
    }
}

fn brute_boundary(m: &LabelMap, c: u8) -> Vec<(f64, f64)> {
    let at = |y: i64, x: i64| -> bool {
        if y < 0 || x < 0 || y >= m.height as i64 || x >= m.width as i64 {
            false
        } else {
            m.get(y as usize, x as usize) == c
        }
    };
    let mut out = Vec::new();
    for y in 0..m.height as i64 {
        for x in 0..m.width as i64 {
            if at(y, x) && [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)].iter().any(|&(a, b)| !at(a, b)) {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

pub fn brute_asd(p: &LabelMap, t: &LabelMap, c: u8, spacing: (f64, f64)) -> Option<f64> {
    let bp = brute_boundary(p, c);
    let bt = brute_boundary(t, c);
    if bp.is_empty() || bt.is_empty() {
        return None;
    }
    let nearest = |a: (f64, f64), set: &[(f64, f64)]| {
        set.iter()
            .map(|b| (((a.0 - b.0) * spacing.0).powi(2) + ((a.1 - b.1) * spacing.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let total: f64 = bp.iter().map(|&a| nearest(a, &bt)).sum::<f64>() + bt.iter().map(|&b| nearest(b, &bp)).sum::<f64>();
    Some(total / (bp.len() + bt.len()) as f64)
}

/// Largest absolute difference between the vectorized filtering,
/// re-weighting and aggregation pipeline and the nested-loop references on
/// one random instance.
pub fn eam_oracle_gap(rng: &mut ChaCha8Rng) -> f64 {
    let z = rng.random_range(1..=4);
    let n = rng.random_range(1..=4);
    let d = rng.random_range(1..=4);
    let h = rng.random_range(1..=4);
    let w = rng.random_range(1..=4);
    let q = Tensor::randn([z, d], 1.0, rng);
    let a = Tensor::randn([z, n, h, w], 1.0, rng);
    let k = Tensor::randn([z, d, n], 1.0, rng);

    let mut t = Tape::new();
    let (qv, av, kv) = (t.constant(q.clone()), t.constant(a.clone()), t.constant(k.clone()));
    let s = eam::semantic_filtering(&mut t, qv, av, kv).unwrap();
    let (b, gate) = eam::semantic_reweighting(&mut t, av, s).unwrap();
    let e = eam::semantic_aggregation(&mut t, b, gate).unwrap();

    let s_ref = eam::reference::filtering(&q, &a, &k);
    let (b_ref, g_ref) = eam::reference::reweighting(&a, &s_ref);
    let e_ref = eam::reference::aggregation(&b_ref, &g_ref, eam::AGGREGATION_EPS);
    [
        t.value(s).max_abs_diff(&s_ref),
        t.value(b).max_abs_diff(&b_ref),
        t.value(gate).max_abs_diff(&g_ref),
        t.value(e).max_abs_diff(&e_ref),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}
