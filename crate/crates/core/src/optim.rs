//! Adam with bias correction, and a reduce-on-plateau learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps {} must be > 0", self.eps)));
        }
        Ok(())
    }
}

/// Per-parameter moments plus the step count and current learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: IndexMap<String, Tensor<T>>,
    pub second: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: IndexMap<String, Tensor<T>> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One Adam update of every parameter in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter `{name}`")))?;
        let m = state.first.get(name);
        let v = state.second.get(name);
        let shapes_ok = g.shape() == p.shape()
            && m.is_some_and(|m| m.shape() == p.shape())
            && v.is_some_and(|v| v.shape() == p.shape());
        if !shapes_ok {
            return Err(Error::Contract(format!(
                "gradient or optimizer state for `{name}` does not match shape {:?}",
                p.shape()
            )));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let corr1 = T::one() - b1.powi(t);
    let corr2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::of(c.lr), T::of(c.eps));

    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let p = params.get(&name).expect("checked above");
        let g = &grads[&name];
        let n = p.len();
        let (mut pn, mut mn, mut vn) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        let (md, vd) = (state.first[&name].data(), state.second[&name].data());
        for i in 0..n {
            let gi = g.data()[i];
            let m = b1 * md[i] + one_b1 * gi;
            let v = b2 * vd[i] + one_b2 * gi * gi;
            let m_hat = m / corr1;
            let v_hat = v / corr2;
            pn.push(p.data()[i] - lr * m_hat / (v_hat.sqrt() + eps));
            mn.push(m);
            vn.push(v);
        }
        let shape = p.shape().to_vec();
        params.set(&name, Tensor::new(shape.clone(), pn)?)?;
        state.first.insert(name.clone(), Tensor::new(shape.clone(), mn)?);
        state.second.insert(name, Tensor::new(shape, vn)?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 5,
            min_delta: 1e-4,
            min_lr: 1e-6,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(format!("lr factor {} outside (0, 1)", self.factor)));
        }
        if self.min_lr <= 0.0 || self.min_delta < 0.0 {
            return Err(Error::Config("min_lr must be > 0 and min_delta >= 0".into()));
        }
        Ok(())
    }
}

/// Reduce-on-plateau state, monitoring validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub config: PlateauConfig,
    pub lr: f64,
    /// `None` until the first observation.
    pub best: Option<f64>,
    pub since_improvement: usize,
}

impl LrSchedule {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        LrSchedule {
            config,
            lr: lr.max(config.min_lr),
            best: None,
            since_improvement: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns the (possibly reduced) lr.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        let improved = self
            .best
            .is_none_or(|best| val_loss < best - self.config.min_delta);
        if improved {
            self.best = Some(val_loss);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
            if self.since_improvement >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.since_improvement = 0;
            }
        }
        self.lr
    }
}

pub fn maybe_reduce_lr(schedule: &mut LrSchedule, epoch_val_loss: f64) -> Result<f64> {
    if !epoch_val_loss.is_finite() {
        return Err(Error::Contract(format!(
            "validation loss {epoch_val_loss} is not finite"
        )));
    }
    Ok(schedule.observe(epoch_val_loss))
}
