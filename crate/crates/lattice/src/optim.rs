//! AdamW with decoupled weight decay and per-parameter moment state.
//!
//! A step updates exactly the names it is given: everything else — values
//! and moments alike — stays bitwise untouched. That exclusion is how
//! epoch-level freezing is implemented; skipped parameters resume later
//! with their own step counts, so freezing an epoch neither decays frozen
//! weights nor ages their moment estimates.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::graph::GradMap;
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, state: BTreeMap::new() }
    }

    /// Step count of one parameter (0 if never updated).
    pub fn step_count(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.t)
    }

    /// Raw moment bits for freeze assertions.
    pub fn moment_bits(&self, name: &str) -> Option<(Vec<u64>, Vec<u64>)> {
        self.state.get(name).map(|s| {
            (
                s.m.iter().map(|x| x.to_bits()).collect(),
                s.v.iter().map(|x| x.to_bits()).collect(),
            )
        })
    }

    /// Apply one update to each named parameter that has a gradient.
    /// Names without a gradient entry are skipped entirely (they did not
    /// participate in the loss, so they neither move nor decay).
    pub fn step(&mut self, store: &mut ParamStore, names: &[String], grads: &GradMap) -> Result<()> {
        let c = &self.cfg;
        for name in names {
            let Some(grad) = grads.get(name) else { continue };
            let value = store.get_mut(name)?;
            if grad.shape() != value.shape() {
                return Err(Error::Internal(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    grad.shape(),
                    value.shape()
                )));
            }
            let entry = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: ArrayD::zeros(value.raw_dim()),
                v: ArrayD::zeros(value.raw_dim()),
                t: 0,
            });
            entry.t += 1;
            let t = entry.t as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (vs, ms, vvs, gs) = (
                value.as_slice_mut().expect("params are standard layout"),
                entry.m.as_slice_mut().unwrap(),
                entry.v.as_slice_mut().unwrap(),
                grad.as_slice().expect("grads are standard layout"),
            );
            for i in 0..vs.len() {
                let g = gs[i];
                ms[i] = c.beta1 * ms[i] + (1.0 - c.beta1) * g;
                vvs[i] = c.beta2 * vvs[i] + (1.0 - c.beta2) * g * g;
                let m_hat = ms[i] / bc1;
                let v_hat = vvs[i] / bc2;
                vs[i] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.eps))
                    + c.learning_rate * c.weight_decay * vs[i];
            }
        }
        Ok(())
    }
}
