//! The two training stages: masked-token pre-training of the report encoder,
//! then joint image/report alignment.

mod augment;
mod loops;
mod optim;
mod state;

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub use augment::{augment_image, Augment};
pub use loops::{
    epoch_batches, train_mlm, train_vlp, vlp_terms, TrainOutcome, VlpExample,
};
pub use optim::{adamw_update, opt_step, AdamW, OptState, Precision};
pub use state::{load_state, save_state, TrainState};

use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossFlags, DEFAULT_LAMBDA, DEFAULT_SIGMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mlm,
    Vlp,
}

/// How the two language communities are arranged into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Batching {
    /// Uniform shuffle of the union.
    Mixed,
    /// Single-language batches, alternating En/Sp.
    Alternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the optimizer steps of the schedule.
    pub max_steps: Option<usize>,
    pub warmup_frac: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub n_frozen: usize,
    pub flags: LossFlags,
    pub seed: u64,
    pub mask_prob: f64,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    /// Steps between validation evaluations; 0 means once per epoch.
    pub eval_every: usize,
    pub batching: Batching,
    pub augment: Augment,
    pub adam: AdamW,
    /// Skipped (non-finite) updates tolerated before aborting.
    pub max_skips: u64,
    /// Stops the loop before this step without changing the schedule.
    pub halt_at: Option<usize>,
}

/// Lowest `ceil(3/4 * layers)` layers, the desk analog of 9 of 12.
pub fn default_frozen(layers: usize) -> usize {
    (3 * layers).div_ceil(4)
}

impl TrainConfig {
    pub fn mlm() -> Self {
        Self {
            stage: Stage::Mlm,
            lr_peak: 5e-4,
            weight_decay: 5e-2,
            batch_size: 32,
            epochs: 10,
            max_steps: None,
            warmup_frac: 0.1,
            sigma1: DEFAULT_SIGMA,
            sigma2: DEFAULT_SIGMA,
            lambda: DEFAULT_LAMBDA,
            n_frozen: 0,
            flags: LossFlags::mlm_only(),
            seed: 0,
            mask_prob: 0.15,
            grad_accum: 1,
            patience: 5,
            eval_every: 0,
            batching: Batching::Mixed,
            augment: Augment::none(),
            adam: AdamW::default(),
            max_skips: 10,
            halt_at: None,
        }
    }

    pub fn vlp(text_layers: usize) -> Self {
        Self {
            stage: Stage::Vlp,
            lr_peak: 4e-5,
            epochs: 50,
            n_frozen: default_frozen(text_layers),
            flags: LossFlags::vlp(),
            augment: Augment::default(),
            ..Self::mlm()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return fail(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return fail(format!("warmup fraction {} outside [0, 1)", self.warmup_frac));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight decay {} is negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.grad_accum == 0 {
            return fail("batch_size, epochs and grad_accum must be at least 1".into());
        }
        if self.max_steps == Some(0) {
            return fail("max_steps must be at least 1".into());
        }
        if !(self.sigma1 > 0.0 && self.sigma2 > 0.0) {
            return fail("temperatures must be positive".into());
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return fail(format!("lambda {} is negative", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return fail(format!("mask probability {} outside [0, 1]", self.mask_prob));
        }
        if !self.flags.any() {
            return fail("no loss component enabled".into());
        }
        match self.stage {
            Stage::Mlm if self.flags != LossFlags::mlm_only() => {
                return fail("the mlm stage optimizes only the mlm loss".into())
            }
            Stage::Vlp if self.flags.mlm => {
                return fail("the vlp stage has no mlm component".into())
            }
            Stage::Vlp if self.flags.ctr() && self.batch_size < 2 => {
                return fail("decorrelation terms need batch_size >= 2".into())
            }
            _ => {}
        }
        self.adam.validate()
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_frac * total_steps as f64).round() as usize
    }

    /// Optimizer steps for `batches_per_epoch` micro-batches per epoch.
    pub fn total_steps(&self, batches_per_epoch: usize) -> usize {
        let per_epoch = (batches_per_epoch / self.grad_accum).max(1);
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

/// Linear warm-up from 0 to `lr_peak`, then cosine annealing to 0.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_steps(total_steps);
    let peak = config.lr_peak;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub cvl: f64,
    pub ssv: f64,
    pub tf: f64,
    pub tt: f64,
    pub ctr: f64,
    pub mlm: f64,
    pub total: f64,
    pub disabled: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_total: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

impl StepRecord {
    pub fn new(step: usize, lr: f64, b: &LossBreakdown, flags: &LossFlags) -> Self {
        Self {
            step,
            lr,
            cvl: b.cvl,
            ssv: b.ssv,
            tf: b.tf,
            tt: b.tt,
            ctr: b.ctr,
            mlm: b.mlm,
            total: b.total,
            disabled: flags.disabled().into_iter().map(String::from).collect(),
            val_total: None,
            skipped: false,
        }
    }
}
