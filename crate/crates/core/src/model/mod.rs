//! Toy text/image encoders, projection heads and their parameter store.

mod checkpoint;
mod encoders;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_tensors, encode_tensors, read_tensors, to_f32_precision, write_tensors, MAGIC,
};
pub use encoders::{
    mlm_head, project, stack_images, text_encode, vision_encode, Bound, TextOutput,
};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::seed;
use crate::text::extend_embeddings;

/// Standard deviation for word and position embedding rows.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_l: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub image_size: usize,
    pub patch: usize,
    pub patch_dim: usize,
    pub d_v: usize,
    /// Shared image/text alignment dimension.
    pub d: usize,
    /// Output width of the decorrelation projector.
    pub d_prime: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            max_len: 32,
            d_l: 64,
            heads: 2,
            layers: 4,
            ffn: 128,
            dropout: 0.1,
            image_size: 32,
            patch: 8,
            patch_dim: 16,
            d_v: 64,
            d: 32,
            d_prime: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_l", self.d_l),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("patch_dim", self.patch_dim),
            ("d_v", self.d_v),
            ("d", self.d),
            ("d_prime", self.d_prime),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("model.{k} must be positive"));
        }
        if !self.d_l.is_multiple_of(self.heads) {
            return fail(format!("model.d_l {} not divisible by heads {}", self.d_l, self.heads));
        }
        if self.d_prime <= self.d_l {
            return fail(format!(
                "model.d_prime {} must exceed model.d_l {}",
                self.d_prime, self.d_l
            ));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return fail(format!(
                "model.patch {} does not tile image_size {}",
                self.patch, self.image_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("model.dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 2 {
            return fail("model.max_len must leave room for CLS and SEP".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let per_side = self.image_size / self.patch;
        per_side * per_side
    }

    pub fn head_dim(&self) -> usize {
        self.d_l / self.heads
    }
}

/// Which projection head to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Projector {
    /// Image head, unit-norm rows.
    V,
    /// Text head, unit-norm rows.
    L,
    /// Text decorrelation head, unnormalized.
    D,
}

impl Projector {
    pub fn tag(self) -> &'static str {
        match self {
            Projector::V => "v",
            Projector::L => "l",
            Projector::D => "d",
        }
    }
}

impl fmt::Display for Projector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Projector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v" => Ok(Projector::V),
            "l" => Ok(Projector::L),
            "d" => Ok(Projector::D),
            other => Err(Error::Config(format!("unknown projector {other:?}"))),
        }
    }
}

/// Where a parameter lives, for freezing decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Embeddings,
    Layer(usize),
    Other,
}

fn group_of(name: &str) -> Group {
    if let Some(rest) = name.strip_prefix("text.layer") {
        let idx = rest.split('.').next().and_then(|s| s.parse().ok());
        return idx.map(Group::Layer).unwrap_or(Group::Other);
    }
    if name.starts_with("text.") {
        return Group::Embeddings;
    }
    Group::Other
}

/// Named parameter tensors in a fixed order, plus the text freeze depth.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
    n_frozen: usize,
}

fn shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![
        ("text.word_emb".to_string(), vec![c.vocab_size, c.d_l]),
        ("text.pos_emb".to_string(), vec![c.max_len, c.d_l]),
        ("text.emb_ln.g".to_string(), vec![c.d_l]),
        ("text.emb_ln.b".to_string(), vec![c.d_l]),
    ];
    for i in 0..c.layers {
        let p = format!("text.layer{i}");
        out.extend([
            (format!("{p}.attn.wqkv"), vec![c.d_l, 3 * c.d_l]),
            (format!("{p}.attn.bq"), vec![c.d_l]),
            (format!("{p}.attn.bv"), vec![c.d_l]),
            (format!("{p}.attn.wo"), vec![c.d_l, c.d_l]),
            (format!("{p}.attn.bo"), vec![c.d_l]),
            (format!("{p}.ln1.g"), vec![c.d_l]),
            (format!("{p}.ln1.b"), vec![c.d_l]),
            (format!("{p}.ffn.w1"), vec![c.d_l, c.ffn]),
            (format!("{p}.ffn.b1"), vec![c.ffn]),
            (format!("{p}.ffn.w2"), vec![c.ffn, c.d_l]),
            (format!("{p}.ffn.b2"), vec![c.d_l]),
            (format!("{p}.ln2.g"), vec![c.d_l]),
            (format!("{p}.ln2.b"), vec![c.d_l]),
        ]);
    }
    let pp = c.patch * c.patch;
    out.extend([
        ("mlm.bias".to_string(), vec![c.vocab_size]),
        ("vision.patch.w".to_string(), vec![pp, c.patch_dim]),
        ("vision.patch.b".to_string(), vec![c.patch_dim]),
        ("vision.mlp.w1".to_string(), vec![c.patches() * c.patch_dim, c.d_v]),
        ("vision.mlp.b1".to_string(), vec![c.d_v]),
        ("vision.mlp.w2".to_string(), vec![c.d_v, c.d_v]),
        ("vision.mlp.b2".to_string(), vec![c.d_v]),
    ]);
    for (tag, input, output) in [("v", c.d_v, c.d), ("l", c.d_l, c.d), ("d", c.d_l, c.d_prime)] {
        out.extend([
            (format!("proj.{tag}.w1"), vec![input, output]),
            (format!("proj.{tag}.b1"), vec![output]),
            (format!("proj.{tag}.w2"), vec![output, output]),
            (format!("proj.{tag}.b2"), vec![output]),
        ]);
    }
    out
}

fn init_tensor(name: &str, shape: &[usize], rng_seed: u64) -> Tensor {
    let mut rng = seed::rng(rng_seed);
    let last = name.rsplit('.').next().unwrap_or(name);
    match last {
        "g" => Tensor::full(shape, 1.0),
        _ if last.starts_with('b') => Tensor::zeros(shape),
        "word_emb" | "pos_emb" => Tensor::randn(shape, EMBED_INIT_STD, &mut rng),
        _ => Tensor::randn(shape, (1.0 / shape[0] as f64).sqrt(), &mut rng),
    }
}

impl ModelParams {
    /// Fresh parameters. Values are held at `f32` precision so that a saved
    /// checkpoint reloads bit-identically.
    pub fn init(config: ModelConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let named = shapes(&config)
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let t = init_tensor(&name, &shape, seed::derive(rng_seed, "init", i as u64));
                (name, t.map(to_f32_precision))
            })
            .collect();
        Self::from_named(config, named)
    }

    /// Assembles parameters from named tensors, checking names and shapes
    /// against `config`. Extra names are rejected.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut given: HashMap<String, Tensor> = HashMap::new();
        for (name, t) in named {
            if given.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, shape) in shapes(&config) {
            let t = given
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            values.push(t);
        }
        if let Some(extra) = given.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            config,
            names,
            values,
            index,
            n_frozen: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Freezes the lowest `n` text layers; `n == layers` also freezes the
    /// embeddings.
    pub fn set_frozen_layers(&mut self, n: usize) -> Result<()> {
        if n > self.config.layers {
            return Err(Error::Config(format!(
                "cannot freeze {n} of {} text layers",
                self.config.layers
            )));
        }
        self.n_frozen = n;
        Ok(())
    }

    pub fn n_frozen(&self) -> usize {
        self.n_frozen
    }

    /// Per-layer freeze flags, lowest layer first.
    pub fn freeze_mask(&self) -> Vec<bool> {
        (0..self.config.layers).map(|i| i < self.n_frozen).collect()
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        match group_of(name) {
            Group::Layer(i) => i < self.n_frozen,
            Group::Embeddings => self.config.layers > 0 && self.n_frozen == self.config.layers,
            Group::Other => false,
        }
    }

    pub fn is_frozen_at(&self, i: usize) -> bool {
        self.is_frozen(&self.names[i])
    }

    /// Appends `m` freshly initialized word rows (and zero output biases).
    pub fn extend_vocab(&mut self, m: usize, rng_seed: u64) -> Result<()> {
        if m == 0 {
            return Ok(());
        }
        let d_l = self.config.d_l;
        let w = extend_embeddings(self.get("text.word_emb").unwrap(), m, d_l, rng_seed)?
            .map(to_f32_precision);
        let bias = self.get("mlm.bias").unwrap();
        let mut b = bias.data().to_vec();
        b.resize(b.len() + m, 0.0);
        let b = Tensor::new(vec![b.len()], b)?;
        *self.get_mut("text.word_emb").unwrap() = w;
        *self.get_mut("mlm.bias").unwrap() = b;
        self.config.vocab_size += m;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_tensors(path, self.iter())
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        Self::from_named(config, read_tensors(path)?)
    }
}

#[cfg(test)]
mod tests;
