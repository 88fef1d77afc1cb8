use std::path::Path;

use super::optim::{AdamW, Moments, OptState};
use crate::error::{Error, Result};
use crate::model::{read_tensors, write_tensors, ModelConfig, ModelParams};
use crate::numeric::Tensor;

const M_PREFIX: &str = "opt.m/";
const V_PREFIX: &str = "opt.v/";
const COUNTERS: &str = "train.counters";

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: OptState,
    /// Next optimizer step to run.
    pub step: usize,
    /// Best validation total so far, at storage precision.
    pub best_val: f64,
    pub bad_evals: usize,
    pub stopped: bool,
}

impl TrainState {
    pub fn new(params: ModelParams, hyper: AdamW) -> Self {
        let opt = OptState::new(&params, hyper);
        Self {
            params,
            opt,
            step: 0,
            best_val: f64::INFINITY,
            bad_evals: 0,
            stopped: false,
        }
    }
}

fn counter(x: u64) -> Result<f64> {
    if x >= 1 << 24 {
        return Err(Error::Checkpoint(format!("counter {x} too large to store")));
    }
    Ok(x as f64)
}

/// Writes parameters, optimizer moments and loop counters to one file.
pub fn save_state(state: &TrainState, path: &Path) -> Result<()> {
    let p = &state.params;
    let mut extra: Vec<(String, Tensor)> = Vec::new();
    for (i, name) in p.names().iter().enumerate() {
        if let Some((m, v)) = state.opt.moments(i) {
            extra.push((format!("{M_PREFIX}{name}"), m.clone()));
            extra.push((format!("{V_PREFIX}{name}"), v.clone()));
        }
    }
    let counters = vec![
        counter(state.opt.step)?,
        counter(state.opt.skipped)?,
        counter(state.step as u64)?,
        state.best_val,
        counter(state.bad_evals as u64)?,
        f64::from(u8::from(state.stopped)),
        counter(p.n_frozen() as u64)?,
    ];
    extra.push((COUNTERS.into(), Tensor::new(vec![counters.len()], counters)?));
    let all = p.iter().chain(extra.iter().map(|(n, t)| (n.as_str(), t)));
    write_tensors(path, all)
}

/// Reads a file written by [`save_state`]. Either everything loads or an
/// error is returned.
pub fn load_state(config: ModelConfig, hyper: AdamW, path: &Path) -> Result<TrainState> {
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut counters = None;
    for (name, t) in read_tensors(path)? {
        if let Some(rest) = name.strip_prefix(M_PREFIX) {
            m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
            v.push((rest.to_string(), t));
        } else if name == COUNTERS {
            counters = Some(t);
        } else {
            params.push((name, t));
        }
    }
    let counters = counters.ok_or_else(|| Error::Checkpoint("no training counters".into()))?;
    let c = counters.data();
    if c.len() != 7 {
        return Err(Error::Checkpoint(format!("{} training counters, expected 7", c.len())));
    }
    let mut params = ModelParams::from_named(config, params)?;
    params.set_frozen_layers(c[6] as usize)?;
    let mut opt = OptState::new(&params, hyper);
    opt.step = c[0] as u64;
    opt.skipped = c[1] as u64;
    if m.len() != v.len() {
        return Err(Error::Checkpoint("unpaired optimizer moments".into()));
    }
    for ((mn, mt), (vn, vt)) in m.into_iter().zip(v) {
        let i = params
            .position(&mn)
            .filter(|_| mn == vn)
            .ok_or_else(|| Error::Checkpoint(format!("moments for unknown parameter {mn}")))?;
        let shape = params.values()[i].shape();
        if mt.shape() != shape || vt.shape() != shape {
            return Err(Error::Checkpoint(format!("moment shape mismatch for {mn}")));
        }
        opt.moments[i] = Some(Moments { m: mt, v: vt });
    }
    Ok(TrainState {
        params,
        opt,
        step: c[2] as usize,
        best_val: c[3],
        bad_evals: c[4] as usize,
        stopped: c[5] != 0.0,
    })
}
