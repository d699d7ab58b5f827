//! Adam optimizer with optional L2 weight decay.
//!
//! The decay is coupled (added to the gradient before the moment updates,
//! `g ← g + wd·θ`), matching the behavior of the reference GCN training
//! setups this crate reproduces. Moments are bias-corrected.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::mat::Mat;
use crate::{Error, Result};

/// Optimizer hyperparameters. [`AdamConfig::default`] gives the standard
/// `β₁ = 0.9`, `β₂ = 0.999`, `eps = 1e-8` with no weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("adam: lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("adam: {name} must be in [0,1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config(format!("adam: eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "adam: weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

struct Slot {
    name: String,
    len: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with per-parameter moment slots. Parameters are identified by their
/// position (and name, for error messages) in the `step` argument; the first
/// step fixes the layout and later steps must match it.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam { cfg, t: 0, slots: Vec::new() })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Number of steps taken.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every `(name, parameter, gradient)` triple.
    ///
    /// Fails without touching any parameter if a gradient is non-finite or
    /// the layout does not match the first step; fails after the fact (with
    /// the parameter name) if an update produced a non-finite value.
    pub fn step(&mut self, updates: &mut [(&str, &mut Mat, &Mat)]) -> Result<()> {
        if self.t == 0 && self.slots.is_empty() {
            for (name, p, _) in updates.iter() {
                self.slots.push(Slot {
                    name: name.to_string(),
                    len: p.rows() * p.cols(),
                    m: vec![0.0; p.rows() * p.cols()],
                    v: vec![0.0; p.rows() * p.cols()],
                });
            }
        }
        if updates.len() != self.slots.len() {
            return Err(Error::contract(format!(
                "adam: {} parameters passed but {} registered on the first step",
                updates.len(),
                self.slots.len()
            )));
        }
        for ((name, p, g), slot) in updates.iter().zip(&self.slots) {
            if *name != slot.name || p.rows() * p.cols() != slot.len {
                return Err(Error::contract(format!(
                    "adam: parameter {name} does not match registered slot {}",
                    slot.name
                )));
            }
            if p.shape() != g.shape() {
                return Err(Error::contract(format!(
                    "adam: gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::numerical(format!(
                    "adam: non-finite gradient for parameter {name}"
                )));
            }
        }

        self.t += 1;
        let bc1 = 1.0 - pow(self.cfg.beta1, self.t);
        let bc2 = 1.0 - pow(self.cfg.beta2, self.t);
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;

        for ((name, p, g), slot) in updates.iter_mut().zip(&mut self.slots) {
            let pv = p.as_mut_slice();
            let gv = g.as_slice();
            for i in 0..pv.len() {
                let grad = gv[i] + weight_decay * pv[i];
                slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * grad;
                slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * grad * grad;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                pv[i] -= lr * mhat / (super::sqrt(vhat) + eps);
            }
            if !p.all_finite() {
                return Err(Error::numerical(format!(
                    "adam: parameter {name} became non-finite at step {}",
                    self.t
                )));
            }
        }
        Ok(())
    }
}

/// `b^t` by squaring (no_std-safe, exact enough for bias correction).
fn pow(b: f64, mut t: u64) -> f64 {
    let mut base = b;
    let mut acc = 1.0;
    while t > 0 {
        if t & 1 == 1 {
            acc *= base;
        }
        base *= base;
        t >>= 1;
    }
    acc
}
