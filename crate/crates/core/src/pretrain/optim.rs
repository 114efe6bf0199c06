//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::{Matrix, ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Weight decay applies to linear weight matrices only.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    steps: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, v)| Matrix::zeros(v.dim())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Parameters without a gradient buffer are treated as
    /// having a zero gradient (they still decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.steps += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let decay = decays(store.name(id));
            let i = id.index();
            if let Some(g) = grads.get(id) {
                ndarray::Zip::from(&mut self.m[i])
                    .and(&mut self.v[i])
                    .and(g)
                    .for_each(|m, v, &g| {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    });
            } else {
                self.m[i].mapv_inplace(|m| c.beta1 * m);
                self.v[i].mapv_inplace(|v| c.beta2 * v);
            }
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    if decay {
                        *p -= lr * c.weight_decay * *p;
                    }
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
                });
        }
    }

    /// Moments as named arrays (`m.<param>`, `v.<param>`) plus `adam.steps`.
    pub fn state_arrays(&self, store: &ParamStore) -> Vec<(String, Matrix)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (id, name, _) in store.iter() {
            out.push((format!("m.{name}"), self.m[id.index()].clone()));
            out.push((format!("v.{name}"), self.v[id.index()].clone()));
        }
        out.push(("adam.steps".into(), Matrix::from_elem((1, 1), self.steps as f64)));
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, arrays: &[(String, Matrix)]) -> Result<()> {
        let find = |key: &str| {
            arrays
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, a)| a)
                .ok_or_else(|| config_err!("optimizer state {key} missing"))
        };
        for (id, name, value) in store.iter() {
            for (slot, prefix) in [(&mut self.m, "m"), (&mut self.v, "v")] {
                let key = format!("{prefix}.{name}");
                let a = find(&key)?;
                if a.dim() != value.dim() {
                    return Err(config_err!(
                        "optimizer state {key}: shape {:?} does not match {:?}",
                        a.dim(),
                        value.dim()
                    ));
                }
                slot[id.index()] = a.clone();
            }
        }
        self.steps = find("adam.steps")?[[0, 0]] as u64;
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::array;

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut store = ParamStore::new(0);
        let id = store.insert("x.w", array![[3.0, -2.0]]);
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..500 {
            let mut t = Tape::new(&store);
            let x = t.param(id);
            let sq = t.mul(x, x);
            let l = t.sum(sq);
            let g = t.backward(l).into_params();
            opt.step(&mut store, &g, 0.05);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn state_round_trips() {
        let mut store = ParamStore::new(0);
        let id = store.insert("a.w", array![[1.0]]);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let mut g = ParamGrads::zeros_like(&store);
        g.accumulate(&{
            let mut t = Tape::new(&store);
            let x = t.param(id);
            let l = t.sum(x);
            t.backward(l).into_params()
        });
        opt.step(&mut store, &g, 0.1);
        let saved = opt.state_arrays(&store);
        let mut other = AdamW::new(&store, AdamWConfig::default());
        other.load_state(&store, &saved).unwrap();
        assert_eq!(other.state_arrays(&store), saved);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = ParamStore::new(0);
        let id = store.insert("a.w", array![[3.0, 4.0]]);
        let mut t = Tape::new(&store);
        let x = t.param(id);
        let sq = t.mul(x, x);
        let l = t.sum(sq);
        let mut g = t.backward(l).into_params();
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
