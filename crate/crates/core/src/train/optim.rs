//! First-order optimizers over a [`ParamStore`].

use mmseg_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::train::config::{OptimizerConfig, OptimizerKind};

/// Moment estimates aligned with the store's entries. Plain SGD keeps the
/// vectors empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.shape().to_vec()))
                .collect()
        };
        match cfg.kind {
            OptimizerKind::Adam => OptimizerState {
                t: 0,
                m: zeros(),
                v: zeros(),
            },
            OptimizerKind::Sgd => OptimizerState {
                t: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    /// Applies one update. Entries without a gradient (frozen groups or
    /// parameters the loss did not reach) are left untouched, moments
    /// included.
    pub fn step(&mut self, cfg: &OptimizerConfig, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::config("gradients do not match the parameter store"));
        }
        self.t += 1;
        let t = self.t as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            if !entry.group.is_trainable() {
                continue;
            }
            let p = entry.value.data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in p.iter_mut().zip(g.data()) {
                        *p -= cfg.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for k in 0..p.len() {
                        let gk = g.data()[k];
                        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        p[k] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Graph, ParamGroup};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", ParamGroup::Trunk, Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        store.insert("f", ParamGroup::Folded, Tensor::from_vec(vec![5.0])).unwrap();
        let cfg = OptimizerConfig::default();
        let mut st = OptimizerState::new(&cfg, &store);
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param("w").unwrap();
            let f = g.param("f").unwrap();
            let s = g.tape.sum_all(w).unwrap();
            let fs = g.tape.sum_all(f).unwrap();
            let l = g.tape.add(s, fs).unwrap();
            g.backward(l).unwrap()
        };
        st.step(&cfg, &mut store, &grads).unwrap();
        let w = store.get("w").unwrap().data().to_vec();
        assert!((w[0] - (1.0 - 3e-4)).abs() < 1e-9);
        assert!((w[1] - (-2.0 - 3e-4)).abs() < 1e-9);
        assert_eq!(store.get("f").unwrap().data(), &[5.0]);
    }
}
