//! Randomized finite-difference checks for every primitive with a backward
//! rule.
//!
//! Each trial draws small random shapes and inputs, contracts the primitive's
//! output with a fixed random weight tensor into a scalar, and runs
//! [`GradCheck`] over all inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome for one primitive across all its trials.
#[derive(Clone, Debug)]
pub struct PrimitiveOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
    pub failed_trials: usize,
}

impl PrimitiveOutcome {
    pub fn passed(&self) -> bool {
        self.failed_trials == 0 && self.trials > 0
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Uniform values in ±[lo, hi] with random sign, keeping clear of zero.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Wraps `f` so its output is reduced to `Σ w ⊙ f(x)` for a fixed random `w`.
fn weighted<F>(weight: Tensor, f: F) -> Build
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    Box::new(move |t: &mut Tape, p: &[Var]| {
        let y = f(t, p)?;
        let w = t.constant(weight.clone().reshape(t.shape(y).to_vec())?);
        let prod = t.mul(y, w)?;
        t.sum_all(prod)
    })
}

fn case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let randn = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape.to_vec(), 1.0, rng);
    match name {
        "add" | "sub" | "mul" | "div" => {
            let rank = rng.random_range(1..=3);
            let shape = dims(rng, rank);
            let a = randn(&shape, rng);
            let b = if name == "div" {
                away_from_zero(&shape, 0.5, 2.0, rng)
            } else {
                randn(&shape, rng)
            };
            let w = randn(&shape, rng);
            let op = name.to_string();
            Case {
                inputs: vec![a, b],
                build: weighted(w, move |t, p| match op.as_str() {
                    "add" => t.add(p[0], p[1]),
                    "sub" => t.sub(p[0], p[1]),
                    "mul" => t.mul(p[0], p[1]),
                    _ => t.div(p[0], p[1]),
                }),
            }
        }
        "scale" | "add_scalar" | "exp" | "log" | "relu" | "gelu" => {
            let rank = rng.random_range(1..=3);
            let shape = dims(rng, rank);
            let x = match name {
                "log" => away_from_zero(&shape, 0.2, 3.0, rng).map_abs(),
                "relu" => away_from_zero(&shape, 0.05, 2.0, rng),
                _ => randn(&shape, rng),
            };
            let s: f64 = rng.random_range(-2.0..2.0);
            let w = randn(&shape, rng);
            let op = name.to_string();
            Case {
                inputs: vec![x],
                build: weighted(w, move |t, p| match op.as_str() {
                    "scale" => t.scale(p[0], s),
                    "add_scalar" => t.add_scalar(p[0], s),
                    "exp" => t.exp(p[0]),
                    "log" => t.log(p[0]),
                    "relu" => t.relu(p[0]),
                    _ => t.gelu(p[0]),
                }),
            }
        }
        "matmul" => {
            let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            let w = randn(&[m, n], rng);
            Case {
                inputs: vec![randn(&[m, k], rng), randn(&[k, n], rng)],
                build: weighted(w, |t, p| t.matmul(p[0], p[1])),
            }
        }
        "bmm" => {
            let b = rng.random_range(1..=3);
            let (m, k, n) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
            let w = randn(&[b, m, n], rng);
            Case {
                inputs: vec![randn(&[b, m, k], rng), randn(&[b, k, n], rng)],
                build: weighted(w, |t, p| t.bmm(p[0], p[1])),
            }
        }
        "softmax" | "log_softmax" => {
            let rank = rng.random_range(1..=3);
            let shape = dims(rng, rank);
            let axis = rng.random_range(0..shape.len());
            let w = randn(&shape, rng);
            let log = name == "log_softmax";
            Case {
                inputs: vec![randn(&shape, rng)],
                build: weighted(w, move |t, p| {
                    if log {
                        t.log_softmax(p[0], axis)
                    } else {
                        t.softmax(p[0], axis)
                    }
                }),
            }
        }
        "reshape" => {
            let shape = dims(rng, 3);
            let target = vec![shape[0] * shape[1], shape[2]];
            let w = randn(&target, rng);
            Case {
                inputs: vec![randn(&shape, rng)],
                build: weighted(w, move |t, p| t.reshape(p[0], &target)),
            }
        }
        "permute" => {
            let shape = dims(rng, 4);
            let mut perm: Vec<usize> = (0..4).collect();
            for i in (1..4).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let out: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
            let w = randn(&out, rng);
            Case {
                inputs: vec![randn(&shape, rng)],
                build: weighted(w, move |t, p| t.permute(p[0], &perm)),
            }
        }
        "concat" => {
            let mut shape = dims(rng, 3);
            let axis = rng.random_range(0..3);
            let a = randn(&shape, rng);
            shape[axis] = rng.random_range(1..=3);
            let b = randn(&shape, rng);
            let mut out = shape.clone();
            out[axis] += a.shape()[axis];
            let w = randn(&out, rng);
            Case {
                inputs: vec![a, b],
                build: weighted(w, move |t, p| t.concat(&[p[0], p[1]], axis)),
            }
        }
        "slice" => {
            let mut shape = dims(rng, 3);
            let axis = rng.random_range(0..3);
            shape[axis] += 2;
            let start = rng.random_range(0..shape[axis]);
            let len = rng.random_range(1..=shape[axis] - start);
            let mut out = shape.clone();
            out[axis] = len;
            let w = randn(&out, rng);
            Case {
                inputs: vec![randn(&shape, rng)],
                build: weighted(w, move |t, p| t.slice(p[0], axis, start, len)),
            }
        }
        "sum_axes" => {
            let shape = dims(rng, 3);
            let axes: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
            let mut out = shape.clone();
            for &a in &axes {
                out[a] = 1;
            }
            let w = randn(&out, rng);
            Case {
                inputs: vec![randn(&shape, rng)],
                build: weighted(w, move |t, p| t.sum_axes(p[0], &axes)),
            }
        }
        "broadcast_to" => {
            let target = dims(rng, 3);
            let src: Vec<usize> = target
                .iter()
                .map(|&e| if rng.random_bool(0.5) { 1 } else { e })
                .collect();
            let w = randn(&target, rng);
            Case {
                inputs: vec![randn(&src, rng)],
                build: weighted(w, move |t, p| t.broadcast_to(p[0], &target)),
            }
        }
        "layer_norm" => {
            let rows = rng.random_range(1..=3);
            let d = rng.random_range(2..=6);
            let w = randn(&[rows, d], rng);
            Case {
                inputs: vec![randn(&[rows, d], rng), randn(&[d], rng), randn(&[d], rng)],
                build: weighted(w, |t, p| t.layer_norm(p[0], p[1], p[2])),
            }
        }
        "linear" => {
            let (h, wd) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=3));
            let w = randn(&[h, wd, cout], rng);
            Case {
                inputs: vec![randn(&[h, wd, cin], rng), randn(&[cin, cout], rng), randn(&[cout], rng)],
                build: weighted(w, |t, p| t.linear(p[0], p[1], Some(p[2]))),
            }
        }
        "gather_rows" => {
            let (r, c) = (rng.random_range(1..=4), rng.random_range(1..=4));
            let index: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
            let w = randn(&[r], rng);
            Case {
                inputs: vec![randn(&[r, c], rng)],
                build: weighted(w, move |t, p| t.gather_rows(p[0], &index)),
            }
        }
        "cosine_rows" => {
            let (r, d) = (rng.random_range(1..=3), rng.random_range(2..=5));
            let w = randn(&[r], rng);
            Case {
                inputs: vec![randn(&[r, d], rng), randn(&[r, d], rng)],
                build: weighted(w, |t, p| t.cosine_rows(p[0], p[1], 1e-12)),
            }
        }
        other => panic!("unknown primitive {other}"),
    }
}

trait MapAbs {
    fn map_abs(self) -> Tensor;
}

impl MapAbs for Tensor {
    fn map_abs(mut self) -> Tensor {
        for v in self.data_mut() {
            *v = v.abs();
        }
        self
    }
}

/// Names of every primitive covered by [`run_primitive_suite`].
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "relu",
    "gelu",
    "matmul",
    "bmm",
    "softmax",
    "log_softmax",
    "reshape",
    "permute",
    "concat",
    "slice",
    "sum_axes",
    "broadcast_to",
    "layer_norm",
    "linear",
    "gather_rows",
    "cosine_rows",
];

/// Runs `trials` randomized checks per primitive.
pub fn run_primitive_suite(trials: usize, seed: u64, check: &GradCheck) -> Result<Vec<PrimitiveOutcome>> {
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for (pi, &name) in PRIMITIVES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(pi as u64 * 7919));
        let mut outcome = PrimitiveOutcome {
            name,
            trials: 0,
            max_rel_error: 0.0,
            failed_trials: 0,
        };
        for _ in 0..trials {
            let Case { inputs, build } = case(name, &mut rng);
            let report: GradCheckReport = check.run(|t, p| build(t, p), &inputs)?;
            outcome.trials += 1;
            outcome.max_rel_error = outcome.max_rel_error.max(report.max_rel_error);
            if !report.passed() {
                outcome.failed_trials += 1;
            }
        }
        out.push(outcome);
    }
    Ok(out)
}
