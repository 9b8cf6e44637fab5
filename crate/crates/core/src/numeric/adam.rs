//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], cfg: AdamConfig) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One Adam update of `p` from its accumulated gradient, which is then zeroed.
pub fn adam_step(p: &mut Parameter, s: &mut AdamState) -> Result<()> {
    if !p.trainable {
        return Err(Error::Contract(format!(
            "adam_step on frozen parameter {}",
            p.name
        )));
    }
    if s.m.shape() != p.value.shape() {
        return Err(Error::dim(format!(
            "optimizer state {:?} for parameter {:?}",
            s.m.shape(),
            p.value.shape()
        )));
    }
    s.step += 1;
    let bc1 = 1.0 - s.beta1.powi(s.step as i32);
    let bc2 = 1.0 - s.beta2.powi(s.step as i32);
    let (m, v) = (s.m.data_mut(), s.v.data_mut());
    let g = p.grad.data_mut();
    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
        let gi = g[i];
        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        *w -= s.lr * mh / (vh.sqrt() + s.eps);
        g[i] = 0.0;
    }
    p.value.ensure_finite(&p.name)
}

/// Adam over every trainable parameter of a store. Frozen parameters are
/// skipped and never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    states: Vec<Option<AdamState>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let states = store
            .iter()
            .map(|(_, p)| p.trainable.then(|| AdamState::new(p.value.shape(), cfg)))
            .collect();
        Self { cfg, states }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.states.len() != store.len() {
            return Err(Error::Contract(
                "optimizer was built for a different store".into(),
            ));
        }
        for (p, s) in store.iter_mut().zip(self.states.iter_mut()) {
            if let (true, Some(s)) = (p.trainable, s.as_mut()) {
                adam_step(p, s)?;
            }
        }
        Ok(())
    }
}
