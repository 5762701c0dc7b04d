//! Adam with bias correction and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Shrink weights directly (AdamW) instead of adding `wd·θ` to the
    /// gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            decoupled: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Result<Self> {
        if !(config.lr >= 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::param("Adam needs lr >= 0 and betas in [0,1)"));
        }
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.numel()];
        Ok(Self {
            config,
            step: 0,
            m: params.iter().map(|(_, t)| zeros(t)).collect(),
            v: params.iter().map(|(_, t)| zeros(t)).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads` aligns with `params` registration order. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!("gradient shape mismatch for {name}")));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("adam_step on {name}[{pos}]"),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let k = Coefficients {
            lr: T::lit(c.lr),
            wd: T::lit(c.weight_decay),
            b1: T::lit(c.beta1),
            b2: T::lit(c.beta2),
            inv_bc1: T::lit(1.0 / (1.0 - c.beta1.powi(t))),
            inv_bc2: T::lit(1.0 / (1.0 - c.beta2.powi(t))),
            eps: T::lit(c.eps),
        };
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if c.decoupled {
                update::<T, true>(p.data_mut(), g.data(), m, v, &k);
            } else {
                update::<T, false>(p.data_mut(), g.data(), m, v, &k);
            }
        }
        Ok(())
    }
}

struct Coefficients<T> {
    lr: T,
    wd: T,
    b1: T,
    b2: T,
    inv_bc1: T,
    inv_bc2: T,
    eps: T,
}

#[inline]
fn update<T: Real, const DECOUPLED: bool>(w: &mut [T], g: &[T], m: &mut [T], v: &mut [T], k: &Coefficients<T>) {
    let one = T::one();
    for (((w, &gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let grad = if DECOUPLED { gi } else { gi + k.wd * *w };
        *mi = k.b1 * *mi + (one - k.b1) * grad;
        *vi = k.b2 * *vi + (one - k.b2) * grad * grad;
        let m_hat = *mi * k.inv_bc1;
        let v_hat = *vi * k.inv_bc2;
        if DECOUPLED {
            *w = *w - k.lr * k.wd * *w;
        }
        *w = *w - k.lr * m_hat / (v_hat.sqrt() + k.eps);
    }
}
