//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so gradients close to
    /// zero are judged on absolute error `floor · tol`.
    pub floor: f64,
    /// Check at most this many elements per parameter (evenly strided).
    pub max_elements: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-3,
            max_elements: None,
        }
    }
}

impl GradCheck {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheck {
            step,
            tol,
            ..Default::default()
        }
    }

    pub fn max_elements(mut self, n: usize) -> Self {
        self.max_elements = Some(n);
        self
    }

    pub fn run<F>(&self, f: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|p| tape.constant(p.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            tape.value(loss).item()
        };

        let mut report = GradCheckReport {
            tol: self.tol,
            ..Default::default()
        };
        let mut work: Vec<Tensor> = params.to_vec();
        for (pi, param) in params.iter().enumerate() {
            let n = param.numel();
            let stride = match self.max_elements {
                Some(m) if m < n => n.div_ceil(m),
                _ => 1,
            };
            for idx in (0..n).step_by(stride) {
                let orig = param.data()[idx];
                work[pi].data_mut()[idx] = orig + self.step;
                let plus = eval(&work)?;
                work[pi].data_mut()[idx] = orig - self.step;
                let minus = eval(&work)?;
                work[pi].data_mut()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[pi].data()[idx];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(self.floor);
                report.checked += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel > self.tol || !rel.is_finite() {
                    report.failures.push(GradFailure {
                        param: pi,
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_error: rel,
                    });
                }
            }
        }
        Ok(report)
    }
}

/// Convenience wrapper with the default floor and every element checked.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(step, tol).run(f, params)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradFailure {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}
