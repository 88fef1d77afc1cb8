use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{to_f32_precision, ModelParams};
use crate::numeric::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Precision parameters and moments are kept at between steps.
    pub store: Precision,
}

/// Storage precision of the training state. Checkpoints hold `f32`, so only
/// `F32` storage resumes bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => to_f32_precision(x),
            Precision::F64 => x,
        }
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            store: Precision::F32,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Optimizer state. Moments are kept per trainable parameter, in store
/// order; frozen parameters never get any.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub hyper: AdamW,
    /// Applied updates.
    pub step: u64,
    /// Updates dropped because of non-finite gradients.
    pub skipped: u64,
    pub(crate) moments: Vec<Option<Moments>>,
}

impl OptState {
    pub fn new(params: &ModelParams, hyper: AdamW) -> Self {
        Self {
            hyper,
            step: 0,
            skipped: 0,
            moments: vec![None; params.len()],
        }
    }

    /// First and second moments of parameter `i`, if it has state.
    pub fn moments(&self, i: usize) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(i)?.as_ref().map(|s| (&s.m, &s.v))
    }

    pub fn with_state(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }
}

/// One AdamW update. Parameters without a gradient (`None`) and frozen
/// parameters are left untouched. A non-finite gradient drops the whole
/// step and bumps `skipped`; returns whether the update was applied.
///
/// Parameters and moments are then rounded to the storage precision.
pub fn opt_step(
    params: &mut ModelParams,
    grads: &[Option<Tensor>],
    state: &mut OptState,
    lr: f64,
    weight_decay: f64,
) -> Result<bool> {
    if grads.len() != params.len() || state.moments.len() != params.len() {
        return Err(Error::Shape {
            op: "opt_step",
            detail: format!(
                "{} grads / {} moment slots for {} parameters",
                grads.len(),
                state.moments.len(),
                params.len()
            ),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.values()[i].shape() {
                return Err(Error::Shape {
                    op: "opt_step",
                    detail: format!(
                        "gradient {:?} for {} {:?}",
                        g.shape(),
                        params.names()[i],
                        params.values()[i].shape()
                    ),
                });
            }
            if !g.all_finite() {
                state.skipped += 1;
                warn!(
                    "non-finite gradient for {}; skipping update ({} skipped so far)",
                    params.names()[i],
                    state.skipped
                );
                return Ok(false);
            }
        }
    }
    state.step += 1;
    let hyper = state.hyper;
    let t = state.step;
    for (i, g) in grads.iter().enumerate().take(params.len()) {
        let Some(g) = g else { continue };
        if params.is_frozen_at(i) {
            continue;
        }
        let p = &mut params.values_mut()[i];
        let slot = state.moments[i].get_or_insert_with(|| Moments {
            m: Tensor::zeros(p.shape()),
            v: Tensor::zeros(p.shape()),
        });
        adamw_update(
            p.data_mut(),
            g.data(),
            slot.m.data_mut(),
            slot.v.data_mut(),
            t,
            lr,
            weight_decay,
            &hyper,
        );
    }
    Ok(true)
}

/// Elementwise AdamW for update number `t` (1-based): decoupled decay, then
/// the bias-corrected moment step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
    hyper: &AdamW,
) {
    let AdamW {
        beta1,
        beta2,
        eps,
        store,
    } = *hyper;
    let t = t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let shrink = 1.0 - lr * weight_decay;
    for j in 0..p.len() {
        m[j] = store.round(beta1 * m[j] + (1.0 - beta1) * g[j]);
        v[j] = store.round(beta2 * v[j] + (1.0 - beta2) * g[j] * g[j]);
        let m_hat = m[j] / c1;
        let v_hat = v[j] / c2;
        p[j] = store.round(p[j] * shrink - lr * m_hat / (v_hat.sqrt() + eps));
    }
}
