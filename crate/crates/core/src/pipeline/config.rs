//! Line-based `section.key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{BiasOptions, ImageSpace, TextSpace};
use crate::model::ModelConfig;
use crate::synth::{ReportStyle, SynthConfig};
use crate::train::{Batching, TrainConfig};

/// Environment variable that replaces the root seed.
pub const SEED_ENV: &str = "MEDUNIC_SEED";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    pub n_en: usize,
    pub n_sp: usize,
    pub findings: usize,
    pub prevalence: f64,
    pub noise_sigma: f64,
    pub image_size: usize,
    pub site_shift: f64,
    pub negation_rate: f64,
    pub filler_rate: f64,
    /// Reports with fewer words are dropped before training.
    pub min_tokens: usize,
    /// Added second-language tokens; `None` keeps the whole ranked list.
    pub sp_vocab: Option<usize>,
    pub test_frac: f64,
    pub val_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_en: s.n_en,
            n_sp: s.n_sp,
            findings: s.findings,
            prevalence: s.prevalence,
            noise_sigma: s.noise_sigma,
            image_size: s.image_size,
            site_shift: s.site_shift,
            negation_rate: s.style.negation_rate,
            filler_rate: s.style.filler_rate,
            min_tokens: 3,
            sp_vocab: None,
            test_frac: 0.2,
            val_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    pub retrieval_k: usize,
    pub text_space: TextSpace,
    pub image_space: ImageSpace,
    pub bias: BiasOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            retrieval_k: 5,
            text_space: TextSpace::Aligned,
            image_space: ImageSpace::Aligned,
            bias: BiasOptions::default(),
        }
    }
}

/// Everything a command needs. Per-stage seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub mlm: TrainConfig,
    pub vlp: TrainConfig,
    /// Start the alignment stage from the masked-token checkpoint.
    pub mlm_init: bool,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig {
            vocab_size: 0,
            max_len: 34,
            d_l: 32,
            heads: 2,
            layers: 4,
            ffn: 64,
            dropout: 0.1,
            image_size: 32,
            patch: 8,
            patch_dim: 16,
            d_v: 32,
            d: 32,
            d_prime: 64,
        };
        let mut mlm = TrainConfig::mlm();
        mlm.batch_size = 64;
        let mut vlp = TrainConfig::vlp(model.layers);
        vlp.batch_size = 64;
        vlp.epochs = 10;
        vlp.lr_peak = 1e-3;
        Self {
            seed: 1,
            data: DataConfig::default(),
            model,
            mlm,
            vlp,
            mlm_init: true,
            eval: EvalConfig::default(),
        }
    }
}

/// Text form of a config value.
trait Value: Sized {
    fn parse(s: &str) -> std::result::Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64, bool);

impl Value for Option<usize> {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            usize::parse(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

macro_rules! enum_value {
    ($t:ty { $($name:literal => $v:expr),* }) => {
        impl Value for $t {
            fn parse(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($v),)*
                    _ => Err(format!("expected one of: {}", [$($name),*].join(", "))),
                }
            }
            fn show(&self) -> String {
                $(if *self == $v { return $name.into(); })*
                unreachable!()
            }
        }
    };
}
enum_value!(Batching { "mixed" => Batching::Mixed, "alternating" => Batching::Alternating });
enum_value!(TextSpace {
    "pooled" => TextSpace::Pooled,
    "aligned" => TextSpace::Aligned,
    "decorrelation" => TextSpace::Decorrelation
});
enum_value!(ImageSpace { "raw" => ImageSpace::Raw, "aligned" => ImageSpace::Aligned });

/// One documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub note: &'static str,
}

macro_rules! schema {
    ($($key:literal => $($field:ident).+ , $note:literal;)*) => {
        pub const SCHEMA: &[KeySpec] = &[$(KeySpec { key: $key, note: $note }),*];

        impl RunConfig {
            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$($field).+ = Value::parse(value).map_err(|e| {
                            Error::Config(format!("{key} = {value:?}: {e}"))
                        })?;
                    })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Current value of a key in its text form.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.show()),)*
                    _ => None,
                }
            }
        }
    };
}

schema! {
    "seed" => seed, "root seed for every random stream [desk]";
    "data.n_en" => data.n_en, "English pairs [desk scale]";
    "data.n_sp" => data.n_sp, "Spanish pairs [desk scale]";
    "data.findings" => data.findings, "latent findings per pair [desk]";
    "data.prevalence" => data.prevalence, "probability of each finding [desk]";
    "data.noise_sigma" => data.noise_sigma, "pixel noise std [desk]";
    "data.image_size" => data.image_size, "image side in pixels [desk]";
    "data.site_shift" => data.site_shift, "per-language intensity offset [desk]";
    "data.negation_rate" => data.negation_rate, "chance an absent finding is negated [desk]";
    "data.filler_rate" => data.filler_rate, "chance of a boilerplate sentence [desk]";
    "data.min_tokens" => data.min_tokens, "drop reports shorter than this [published: 3]";
    "data.sp_vocab" => data.sp_vocab, "added Spanish tokens, none = all ranked tokens [unstated in source]";
    "data.test_frac" => data.test_frac, "pairs held out for testing [desk]";
    "data.val_frac" => data.val_frac, "pairs held out for early stopping [desk]";
    "model.max_len" => model.max_len, "tokens per report [published: 256, scaled]";
    "model.d_l" => model.d_l, "text encoder width [scaled]";
    "model.heads" => model.heads, "attention heads [scaled]";
    "model.layers" => model.layers, "text encoder layers [published: 12, scaled]";
    "model.ffn" => model.ffn, "feed-forward width [scaled]";
    "model.dropout" => model.dropout, "dropout, also the text augmentation [BERT default]";
    "model.patch" => model.patch, "vision patch side [desk]";
    "model.patch_dim" => model.patch_dim, "patch embedding width [desk]";
    "model.d_v" => model.d_v, "vision encoder width [desk]";
    "model.d" => model.d, "image/report alignment width [published: 512, scaled]";
    "model.d_prime" => model.d_prime, "decorrelation head width [published: 1024, scaled]";
    "mlm.lr" => mlm.lr_peak, "peak learning rate [published: 5e-4]";
    "mlm.weight_decay" => mlm.weight_decay, "decoupled weight decay [desk]";
    "mlm.batch_size" => mlm.batch_size, "reports per micro-batch [published: 1024 total, scaled]";
    "mlm.grad_accum" => mlm.grad_accum, "micro-batches per step [published: 16, scaled]";
    "mlm.epochs" => mlm.epochs, "epochs [published: 15, scaled]";
    "mlm.max_steps" => mlm.max_steps, "optimizer step cap, none = epochs decide [desk]";
    "mlm.warmup_frac" => mlm.warmup_frac, "linear warm-up share [published: 10%]";
    "mlm.mask_prob" => mlm.mask_prob, "masked token rate [published: 0.15]";
    "mlm.max_skips" => mlm.max_skips, "non-finite updates tolerated [desk]";
    "vlp.lr" => vlp.lr_peak, "peak learning rate [published: 4e-5, raised for desk scale]";
    "vlp.weight_decay" => vlp.weight_decay, "decoupled weight decay [published: 5e-2]";
    "vlp.batch_size" => vlp.batch_size, "pairs per micro-batch K [published: 128 per GPU, scaled]";
    "vlp.grad_accum" => vlp.grad_accum, "micro-batches per step [published: 2, scaled]";
    "vlp.epochs" => vlp.epochs, "epochs [published: 50 with early stop, scaled]";
    "vlp.max_steps" => vlp.max_steps, "optimizer step cap, none = epochs decide [desk]";
    "vlp.warmup_frac" => vlp.warmup_frac, "linear warm-up share before cosine decay [desk]";
    "vlp.sigma1" => vlp.sigma1, "image/report temperature [published: 0.07]";
    "vlp.sigma2" => vlp.sigma2, "image/image temperature [published: 0.07]";
    "vlp.lambda" => vlp.lambda, "off-diagonal weight [published: 5.1e-3]";
    "vlp.n_frozen" => vlp.n_frozen, "frozen lowest text layers [published: 9 of 12, scaled]";
    "vlp.patience" => vlp.patience, "evaluations without improvement before stopping [desk]";
    "vlp.eval_every" => vlp.eval_every, "steps between validations, 0 = per epoch [desk]";
    "vlp.batching" => vlp.batching, "mixed or alternating language batches [desk]";
    "vlp.max_shift" => vlp.augment.max_shift, "image view shift in pixels [desk]";
    "vlp.flips" => vlp.augment.flips, "horizontal flips in image views [desk]";
    "vlp.rot90" => vlp.augment.rot90, "quarter turns in image views [desk]";
    "vlp.cvl" => vlp.flags.cvl, "image/report alignment term [published]";
    "vlp.ssv" => vlp.flags.ssv, "image/image alignment term [published]";
    "vlp.tf" => vlp.flags.tf, "feature decorrelation term [published]";
    "vlp.tt" => vlp.flags.tt, "sample decorrelation term [published]";
    "vlp.mlm_init" => mlm_init, "start from the masked-token checkpoint [published]";
    "vlp.max_skips" => vlp.max_skips, "non-finite updates tolerated [desk]";
    "eval.retrieval_k" => eval.retrieval_k, "recall cut-off [desk]";
    "eval.text_space" => eval.text_space, "report embedding for diagnostics [desk]";
    "eval.image_space" => eval.image_space, "image embedding for diagnostics [desk]";
    "eval.probe_train_frac" => eval.bias.probe.train_frac, "probe training share [desk: 70/30]";
    "eval.probe_steps" => eval.bias.probe.steps, "probe optimizer steps [desk]";
    "eval.probe_lr" => eval.bias.probe.lr, "probe learning rate [desk]";
    "eval.probe_l2" => eval.bias.probe.l2, "probe ridge penalty [desk]";
    "eval.pca_iters" => eval.bias.pca_iters, "power iterations per axis [desk]";
    "eval.heatmap_per_group" => eval.bias.heatmap_per_group, "similarity rows per language [desk]";
}

impl RunConfig {
    /// Parses `section.key = value` lines over the defaults. `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            c.set(k.trim(), v.trim())
                .map_err(|e| prefix(&format!("line {}", n + 1), e))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides, then the seed environment variable.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.set("seed", s.trim())
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not a seed")))?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Canonical text form, every key in schema order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in SCHEMA {
            writeln!(out, "{} = {}", k.key, self.get(k.key).unwrap()).unwrap();
        }
        out
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn synth(&self) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            n_en: d.n_en,
            n_sp: d.n_sp,
            seed: crate::seed::derive(self.seed, "data", 0),
            findings: d.findings,
            prevalence: d.prevalence,
            noise_sigma: d.noise_sigma,
            image_size: d.image_size,
            site_shift: d.site_shift,
            style: ReportStyle {
                negation_rate: d.negation_rate,
                filler_rate: d.filler_rate,
            },
        }
    }

    /// Model shape for a vocabulary of `vocab_size` tokens.
    pub fn model_for(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            image_size: self.data.image_size,
            ..self.model.clone()
        }
    }

    pub fn mlm_train(&self) -> TrainConfig {
        TrainConfig {
            seed: crate::seed::derive(self.seed, "mlm", 0),
            ..self.mlm.clone()
        }
    }

    pub fn vlp_train(&self) -> TrainConfig {
        TrainConfig {
            seed: crate::seed::derive(self.seed, "vlp", 0),
            ..self.vlp.clone()
        }
    }

    pub fn bias_options(&self) -> BiasOptions {
        let mut b = self.eval.bias;
        b.probe.seed = crate::seed::derive(self.seed, "eval", 0);
        b.pca_seed = crate::seed::derive(self.seed, "eval", 1);
        b
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if d.n_en + d.n_sp == 0 {
            return fail("data.n_en and data.n_sp are both 0".into());
        }
        if !(0.0..=1.0).contains(&d.prevalence) {
            return fail(format!("data.prevalence {} outside [0, 1]", d.prevalence));
        }
        for (k, v) in [("data.negation_rate", d.negation_rate), ("data.filler_rate", d.filler_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{k} {v} outside [0, 1]"));
            }
        }
        if d.noise_sigma.is_nan() || d.noise_sigma < 0.0 {
            return fail(format!("data.noise_sigma {} is negative", d.noise_sigma));
        }
        if !(d.test_frac > 0.0 && d.val_frac >= 0.0 && d.test_frac + d.val_frac < 1.0) {
            return fail(format!(
                "data.test_frac {} and data.val_frac {} must leave training pairs",
                d.test_frac, d.val_frac
            ));
        }
        self.model_for(1).validate()?;
        if self.vlp.n_frozen > self.model.layers {
            return fail(format!(
                "vlp.n_frozen {} exceeds model.layers {}",
                self.vlp.n_frozen, self.model.layers
            ));
        }
        self.mlm.validate().map_err(|e| prefix("mlm", e))?;
        self.vlp.validate().map_err(|e| prefix("vlp", e))?;
        if self.eval.retrieval_k == 0 {
            return fail("eval.retrieval_k must be at least 1".into());
        }
        let p = &self.eval.bias.probe;
        if !(p.train_frac > 0.0 && p.train_frac < 1.0) {
            return fail(format!("eval.probe_train_frac {} outside (0, 1)", p.train_frac));
        }
        Ok(())
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{section}: {m}")),
        other => other,
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Key listing with defaults and provenance, for `--help`.
pub fn schema_help() -> String {
    let d = RunConfig::default();
    let mut out = String::from("Configuration keys (`section.key = value`; default, note):\n");
    for k in SCHEMA {
        writeln!(out, "  {:<24} {:<10} {}", k.key, d.get(k.key).unwrap(), k.note).unwrap();
    }
    writeln!(out, "  {SEED_ENV} in the environment overrides `seed`.").unwrap();
    out
}
