use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AdamW hyperparameters. Betas, epsilon and weight decay default to the
/// values of the original decoupled-weight-decay formulation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// Moment estimates and step counter for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamWState {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        AdamWState {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One AdamW update of every coordinate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_ranges(params, grads, std::slice::from_ref(&(0..params.len())))
    }

    /// One AdamW update restricted to `ranges`; coordinates outside them
    /// (parameters and moments alike) are left untouched. The step counter
    /// advances once per call.
    pub fn step_ranges(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        ranges: &[Range<usize>],
    ) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                what: "AdamW parameters",
                expected: self.m.len(),
                got: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(Error::LengthMismatch {
                what: "AdamW gradients",
                expected: params.len(),
                got: grads.len(),
            });
        }
        for r in ranges {
            if r.end > params.len() {
                return Err(Error::LengthMismatch {
                    what: "AdamW range",
                    expected: params.len(),
                    got: r.end,
                });
            }
            if grads[r.clone()].iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("gradient"));
            }
        }

        let c = self.config;
        self.t += 1;
        let t = self.t as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for r in ranges {
            for i in r.clone() {
                let g = grads[i];
                self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = self.m[i] / bias1;
                let v_hat = self.v[i] / bias2;
                params[i] = params[i] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Functional form: returns updated parameters and state, inputs untouched.
pub fn adamw_step(
    params: &[f64],
    grads: &[f64],
    state: &AdamWState,
) -> Result<(Vec<f64>, AdamWState)> {
    let mut p = params.to_vec();
    let mut s = state.clone();
    s.step(&mut p, grads)?;
    Ok((p, s))
}
