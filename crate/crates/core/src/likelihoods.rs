//! Continuous mixture of logistics over a scalar in normalized attribute space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of mixture components.
pub const DEFAULT_COMPONENTS: usize = 10;
/// Lower bound applied to predicted log-scales by the network heads.
pub const LOG_SCALE_MIN: f64 = -7.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureOfLogistics {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

/// Gradient of the negative log-likelihood with respect to each parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct MolGrad {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl MolGrad {
    fn zeros(k: usize) -> Self {
        MolGrad {
            logits: vec![0.0; k],
            means: vec![0.0; k],
            log_scales: vec![0.0; k],
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn log_softmax(v: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(v);
    v.iter().map(|x| x - z).collect()
}

/// Log-density of a single logistic component.
fn logistic_log_pdf(x: f64, mean: f64, log_scale: f64) -> f64 {
    let z = (x - mean) * (-log_scale).exp();
    -z - log_scale - 2.0 * softplus(-z)
}

impl MixtureOfLogistics {
    pub fn new(logits: Vec<f64>, means: Vec<f64>, log_scales: Vec<f64>) -> Result<Self> {
        let k = logits.len();
        if k == 0 || means.len() != k || log_scales.len() != k {
            return Err(Error::Shape(format!(
                "mixture needs K >= 1 matching blocks, got {}/{}/{}",
                k,
                means.len(),
                log_scales.len()
            )));
        }
        if logits.iter().chain(&means).chain(&log_scales).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite mixture parameter".into()));
        }
        Ok(MixtureOfLogistics {
            logits,
            means,
            log_scales,
        })
    }

    /// Splits a flat `[logits | means | log_scales]` vector.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::Shape(format!(
                "flat mixture length {} is not a multiple of 3",
                flat.len()
            )));
        }
        let k = flat.len() / 3;
        MixtureOfLogistics::new(
            flat[..k].to_vec(),
            flat[k..2 * k].to_vec(),
            flat[2 * k..].to_vec(),
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.logits.clone();
        v.extend_from_slice(&self.means);
        v.extend_from_slice(&self.log_scales);
        v
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        log_softmax(&self.logits).into_iter().map(f64::exp).collect()
    }

    fn component_log_probs(&self, x: f64) -> Vec<f64> {
        let lw = log_softmax(&self.logits);
        (0..self.components())
            .map(|k| lw[k] + logistic_log_pdf(x, self.means[k], self.log_scales[k]))
            .collect()
    }

    pub fn log_prob(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            log::warn!("mixture density evaluated outside [0, 1] at {x}");
        }
        log_sum_exp(&self.component_log_probs(x))
    }

    /// Negative log-likelihood of `x` and its analytic gradient.
    pub fn nll_and_grad(&self, x: f64) -> (f64, MolGrad) {
        let k = self.components();
        let lp = self.component_log_probs(x);
        let total = log_sum_exp(&lp);
        let w = self.weights();
        let mut g = MolGrad::zeros(k);
        for i in 0..k {
            let r = (lp[i] - total).exp();
            let z = (x - self.means[i]) * (-self.log_scales[i]).exp();
            let t = 1.0 - 2.0 * sigmoid(-z);
            g.logits[i] = w[i] - r;
            g.means[i] = -r * t * (-self.log_scales[i]).exp();
            g.log_scales[i] = -r * (z * t - 1.0);
        }
        (-total, g)
    }

    /// Mean NLL over `xs` and its gradient.
    pub fn mean_nll_and_grad(&self, xs: &[f64]) -> (f64, MolGrad) {
        let k = self.components();
        let mut acc = MolGrad::zeros(k);
        let mut nll = 0.0;
        let n = xs.len().max(1) as f64;
        for &x in xs {
            let (l, g) = self.nll_and_grad(x);
            nll += l / n;
            for i in 0..k {
                acc.logits[i] += g.logits[i] / n;
                acc.means[i] += g.means[i] / n;
                acc.log_scales[i] += g.log_scales[i] / n;
            }
        }
        (nll, acc)
    }

    pub fn mean_nll(&self, xs: &[f64]) -> f64 {
        let n = xs.len().max(1) as f64;
        xs.iter().map(|&x| -self.log_prob(x)).sum::<f64>() / n
    }

    /// Draws a component from the mixture weights, then inverts its CDF. The
    /// result is clamped to `[0, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let w = self.weights();
        let mut u = rng.random::<f64>();
        let mut k = self.components() - 1;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                k = i;
                break;
            }
            u -= wi;
        }
        let v: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
        let x = self.means[k] + self.log_scales[k].exp() * (v.ln() - (1.0 - v).ln());
        x.clamp(0.0, 1.0)
    }

    /// Location of the highest-weight component, clamped to `[0, 1]`.
    pub fn mode_of_heaviest(&self) -> f64 {
        let k = (0..self.components())
            .max_by(|&a, &b| self.logits[a].total_cmp(&self.logits[b]))
            .expect("K >= 1");
        self.means[k].clamp(0.0, 1.0)
    }
}

/// Largest relative error between the analytic mean-NLL gradient and central
/// finite differences with step `1e-5`.
pub fn mol_nll_grad_check(params: &MixtureOfLogistics, xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs at least one point".into()));
    }
    let h = 1e-5;
    let (_, g) = params.mean_nll_and_grad(xs);
    let mut analytic = g.logits.clone();
    analytic.extend_from_slice(&g.means);
    analytic.extend_from_slice(&g.log_scales);
    let flat = params.to_flat();
    let mut worst: f64 = 0.0;
    for i in 0..flat.len() {
        let mut up = flat.clone();
        up[i] += h;
        let mut dn = flat.clone();
        dn[i] -= h;
        let fd = (MixtureOfLogistics::from_flat(&up)?.mean_nll(xs)
            - MixtureOfLogistics::from_flat(&dn)?.mean_nll(xs))
            / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
        worst = worst.max((fd - analytic[i]).abs() / denom);
    }
    Ok(worst)
}
