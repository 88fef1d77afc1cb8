use super::{ModelParams, Projector};
use crate::error::{Error, Result};
use crate::numeric::{Bcast, Graph, Tensor, Var};
use crate::seed;
use crate::synth::ImageGrid;
use crate::text::TokenSequence;

/// Additive score for attention to padding; `exp` of it underflows to 0.
const MASKED_SCORE: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Parameters recorded on one graph. Frozen tensors enter as constants.
pub struct Bound<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl ModelParams {
    pub fn bind(&self, g: &Graph) -> Bound<'_> {
        let vars = self
            .values
            .iter()
            .enumerate()
            .map(|(i, t)| g.leaf(t.clone(), !self.is_frozen_at(i)))
            .collect();
        Bound { params: self, vars }
    }
}

impl<'p> Bound<'p> {
    /// Uses caller-provided leaves, one per parameter in store order.
    pub fn from_vars(params: &'p ModelParams, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::Shape {
                op: "bind",
                detail: format!("{} vars for {} parameters", vars.len(), params.len()),
            });
        }
        Ok(Self { params, vars })
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    /// Gradients after `backward`, in store order; `None` for frozen or
    /// untouched parameters.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

fn linear(g: &Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bcast(y, b, Bcast::PerColumn)
}

fn affine_norm(g: &Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let n = g.mul_bcast(n, gain, Bcast::PerColumn)?;
    g.add_bcast(n, bias, Bcast::PerColumn)
}

/// Report encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct TextOutput {
    /// `K x D_l` CLS-position vectors.
    pub pooled: Var,
    /// `K x T x D_l`.
    pub per_token: Var,
}

/// Post-norm transformer over token ids. Attention ignores padded keys, and
/// the CLS position is the pooled report embedding.
pub fn text_encode(
    g: &Graph,
    b: &Bound<'_>,
    batch: &[TokenSequence],
    dropout_on: bool,
    rng_seed: u64,
) -> Result<TextOutput> {
    let c = b.params.config();
    let k = batch.len();
    if k == 0 {
        return Err(Error::EmptyDataset("text batch is empty".into()));
    }
    let t = batch[0].len();
    if t == 0 || t > c.max_len {
        return Err(Error::Shape {
            op: "text_encode",
            detail: format!("sequence length {t} outside 1..={}", c.max_len),
        });
    }
    let mut ids = Vec::with_capacity(k * t);
    let mut mask = Vec::with_capacity(k * t * t);
    for seq in batch {
        if seq.len() != t || seq.attention.len() != t {
            return Err(Error::Shape {
                op: "text_encode",
                detail: format!("ragged batch: {} vs {t}", seq.len()),
            });
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                c.vocab_size
            )));
        }
        ids.extend(seq.ids.iter().map(|&id| id as usize));
        let row: Vec<f64> = seq
            .attention
            .iter()
            .map(|&a| if a == 1 { 0.0 } else { MASKED_SCORE })
            .collect();
        for _ in 0..t {
            mask.extend_from_slice(&row);
        }
    }
    let mask = g.constant(Tensor::new(vec![k, t, t], mask)?);
    let positions: Vec<usize> = (0..k).flat_map(|_| 0..t).collect();

    let rate = if dropout_on { c.dropout } else { 0.0 };
    let mut site = 0u64;
    let mut drop = |x: Var| -> Result<Var> {
        site += 1;
        g.dropout(x, rate, seed::derive(rng_seed, "dropout", site))
    };

    let words = g.gather_rows(b.var("text.word_emb"), &ids)?;
    let pos = g.gather_rows(b.var("text.pos_emb"), &positions)?;
    let x = g.add(words, pos)?;
    let x = affine_norm(g, x, b.var("text.emb_ln.g"), b.var("text.emb_ln.b"))?;
    let mut x = drop(x)?;

    let (d, heads, dh) = (c.d_l, c.heads, c.head_dim());
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    for layer in 0..c.layers {
        let p = |s: &str| b.var(&format!("text.layer{layer}.{s}"));
        // No key bias: it shifts every score of a query equally and so
        // cannot change the attention weights.
        let qkv = g.matmul(x, p("attn.wqkv"))?;
        let q = g.slice_cols(qkv, 0, d)?;
        let q = g.add_bcast(q, p("attn.bq"), Bcast::PerColumn)?;
        let keys = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;
        let v = g.add_bcast(v, p("attn.bv"), Bcast::PerColumn)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let part = |m: Var| -> Result<Var> {
                let s = g.slice_cols(m, h * dh, dh)?;
                g.reshape(s, &[k, t, dh])
            };
            let (q, kk, v) = (part(q)?, part(keys)?, part(v)?);
            let scores = g.bmm_t(q, kk, false, true)?;
            let scores = g.scale(scores, inv_sqrt);
            let scores = g.add(scores, mask)?;
            let attn = g.softmax(scores);
            let o = g.bmm_t(attn, v, false, false)?;
            outs.push(g.reshape(o, &[k * t, dh])?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let att = linear(g, cat, p("attn.wo"), p("attn.bo"))?;
        let att = drop(att)?;
        let res = g.add(x, att)?;
        let h1 = affine_norm(g, res, p("ln1.g"), p("ln1.b"))?;
        let f = linear(g, h1, p("ffn.w1"), p("ffn.b1"))?;
        let f = g.relu(f);
        let f = linear(g, f, p("ffn.w2"), p("ffn.b2"))?;
        let f = drop(f)?;
        let res = g.add(h1, f)?;
        x = affine_norm(g, res, p("ln2.g"), p("ln2.b"))?;
    }
    let cls: Vec<usize> = (0..k).map(|i| i * t).collect();
    let pooled = g.gather_rows(x, &cls)?;
    let per_token = g.reshape(x, &[k, t, d])?;
    Ok(TextOutput { pooled, per_token })
}

/// Stacks square grids into a `K x H x W` tensor.
pub fn stack_images(images: &[&ImageGrid]) -> Result<Tensor> {
    let size = images.first().map(|im| im.size).unwrap_or(0);
    let mut data = Vec::with_capacity(images.len() * size * size);
    for im in images {
        if im.size != size || im.pixels.len() != size * size {
            return Err(Error::Shape {
                op: "stack_images",
                detail: format!("image of size {} among size {size}", im.size),
            });
        }
        data.extend_from_slice(&im.pixels);
    }
    Tensor::new(vec![images.len(), size, size], data)
}

/// Rearranges `K x H x W` into `(K * patches) x (patch * patch)` rows,
/// patches in row-major order.
fn patchify(images: &Tensor, size: usize, patch: usize) -> Result<Tensor> {
    let k = images.shape()[0];
    let per_side = size / patch;
    let mut out = Vec::with_capacity(images.len());
    let px = images.data();
    for i in 0..k {
        let img = &px[i * size * size..(i + 1) * size * size];
        for pr in 0..per_side {
            for pc in 0..per_side {
                for r in 0..patch {
                    let start = (pr * patch + r) * size + pc * patch;
                    out.extend_from_slice(&img[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![k * per_side * per_side, patch * patch], out)
}

/// Per-patch linear embedding, then an MLP over the concatenated patch
/// codes, so spatial layout is preserved.
pub fn vision_encode(g: &Graph, b: &Bound<'_>, images: &Tensor) -> Result<Var> {
    let c = b.params.config();
    if images.rank() != 3 || images.shape()[1] != c.image_size || images.shape()[2] != c.image_size
    {
        return Err(Error::Shape {
            op: "vision_encode",
            detail: format!(
                "images {:?}, expected K x {} x {}",
                images.shape(),
                c.image_size,
                c.image_size
            ),
        });
    }
    let k = images.shape()[0];
    let patches = g.constant(patchify(images, c.image_size, c.patch)?);
    let e = linear(g, patches, b.var("vision.patch.w"), b.var("vision.patch.b"))?;
    let e = g.relu(e);
    let flat = g.reshape(e, &[k, c.patches() * c.patch_dim])?;
    let h = linear(g, flat, b.var("vision.mlp.w1"), b.var("vision.mlp.b1"))?;
    let h = g.relu(h);
    linear(g, h, b.var("vision.mlp.w2"), b.var("vision.mlp.b2"))
}

/// Two-layer MLP head. Image and text alignment heads return unit rows.
pub fn project(g: &Graph, b: &Bound<'_>, which: Projector, x: Var) -> Result<Var> {
    let tag = which.tag();
    let w1 = b.var(&format!("proj.{tag}.w1"));
    let in_dim = b.params.get(&format!("proj.{tag}.w1")).unwrap().shape()[0];
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != in_dim {
        return Err(Error::Shape {
            op: "project",
            detail: format!("projector {tag} expects width {in_dim}, got {shape:?}"),
        });
    }
    let h = linear(g, x, w1, b.var(&format!("proj.{tag}.b1")))?;
    let h = g.relu(h);
    let y = linear(g, h, b.var(&format!("proj.{tag}.w2")), b.var(&format!("proj.{tag}.b2")))?;
    Ok(match which {
        Projector::V | Projector::L => g.l2_normalize(y),
        Projector::D => y,
    })
}

/// Vocabulary logits `K x T x |T|` from the tied word embeddings.
pub fn mlm_head(g: &Graph, b: &Bound<'_>, per_token: Var) -> Result<Var> {
    let shape = g.shape(per_token);
    if shape.len() != 3 {
        return Err(Error::Shape {
            op: "mlm_head",
            detail: format!("per-token states {shape:?}"),
        });
    }
    let (k, t, d) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(per_token, &[k * t, d])?;
    let logits = g.matmul_t(flat, b.var("text.word_emb"), false, true)?;
    let logits = g.add_bcast(logits, b.var("mlm.bias"), Bcast::PerColumn)?;
    let v = b.params.config().vocab_size;
    g.reshape(logits, &[k, t, v])
}
