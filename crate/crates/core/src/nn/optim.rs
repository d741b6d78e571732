//! Adam with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, _, p)| Tensor::zeros(p.rows, p.cols))
            .collect();
        Adam {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// and their moments are not decayed. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) -> f64 {
        let norm = grads.global_norm();
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = self.cfg.lr;
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            for j in 0..p.data.len() {
                let gj = g.data[j].as_f64() * clip;
                let m = b1 * self.m[i].data[j].as_f64() + (1.0 - b1) * gj;
                let v = b2 * self.v[i].data[j].as_f64() + (1.0 - b2) * gj * gj;
                self.m[i].data[j] = T::lit(m);
                self.v[i].data[j] = T::lit(v);
                let update = lr * (m / c1) / ((v / c2).sqrt() + self.cfg.eps);
                p.data[j] = T::lit(p.data[j].as_f64() - update);
            }
        }
        norm
    }
}
