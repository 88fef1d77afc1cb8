//! Finite-difference verification of every loss and encoder path.

use serde::Serialize;

use crate::error::Result;
use crate::losses::{
    ctr_tf_loss, ctr_tt_loss, cvl_loss, mlm_loss, ssv_loss, total_loss, LossFlags, DEFAULT_LAMBDA,
    DEFAULT_SIGMA,
};
use crate::model::{
    mlm_head, project, stack_images, text_encode, vision_encode, Bound, ModelConfig, ModelParams,
    Projector,
};
use crate::numeric::{grad_check, Graph, Tensor, Var, DEFAULT_EPS};
use crate::seed;
use crate::synth::{ImageGrid, Language};
use crate::text::{TokenSequence, CLS, PAD, SEP};
use crate::train::{vlp_terms, TrainConfig, VlpExample};

/// Largest accepted relative error.
pub const GRAD_TOL: f64 = 1e-4;
/// Random points per row.
pub const GRAD_POINTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 14,
        max_len: 6,
        d_l: 8,
        heads: 2,
        layers: 2,
        ffn: 8,
        dropout: 0.1,
        image_size: 8,
        patch: 4,
        patch_dim: 3,
        d_v: 6,
        d: 5,
        d_prime: 12,
    }
}

fn seq(ids: &[u32]) -> TokenSequence {
    let mut s = TokenSequence {
        ids: ids.to_vec(),
        attention: vec![1; ids.len()],
    };
    s.ids.resize(6, PAD);
    s.attention.resize(6, 0);
    s
}

fn reports() -> Vec<TokenSequence> {
    vec![
        seq(&[CLS, 5, 6, SEP]),
        seq(&[CLS, 7, 8, 9, 10, SEP]),
        seq(&[CLS, 11, 12, 13, SEP]),
    ]
}

/// Fixed pseudo-random weights so every output element reaches the loss.
fn weighted_sum(g: &Graph, v: Var, salt: f64) -> Result<Var> {
    let shape = g.shape(v);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| (i as f64 * 0.377 + salt).sin()).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn sum_all(g: &Graph, parts: &[Var]) -> Result<Var> {
    let mut total = parts[0];
    for &x in &parts[1..] {
        total = g.add(total, x)?;
    }
    Ok(total)
}

fn worst_over_points<F>(points: impl Iterator<Item = Vec<Tensor>>, f: F) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for p in points {
        worst = worst.max(grad_check(&f, &p, DEFAULT_EPS)?);
    }
    Ok(worst)
}

fn pair_points(root: u64, name: &str, k: usize, d: usize) -> impl Iterator<Item = Vec<Tensor>> + '_ {
    let name = name.to_string();
    (0..GRAD_POINTS as u64).map(move |i| {
        let mut rng = seed::rng(seed::derive(root, &name, i));
        vec![
            Tensor::randn(&[k, d], 1.0, &mut rng),
            Tensor::randn(&[k, d], 1.0, &mut rng),
        ]
    })
}

fn param_points(root: u64, name: &str) -> impl Iterator<Item = Result<ModelParams>> + '_ {
    let name = name.to_string();
    (0..GRAD_POINTS as u64).map(move |i| {
        let mut p = ModelParams::init(tiny(), seed::derive(root, &name, i))?;
        // Move away from the initial zero biases and unit gains.
        let mut rng = seed::rng(seed::derive(root, &name, 100 + i));
        for t in p.values_mut() {
            let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
        }
        Ok(p)
    })
}

fn model_row<F>(root: u64, name: &str, f: F) -> Result<f64>
where
    F: Fn(&Graph, &Bound<'_>) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for p in param_points(root, name) {
        let p = p?;
        let err = grad_check(
            |g, vars| {
                let b = Bound::from_vars(&p, vars.to_vec())?;
                f(g, &b)
            },
            p.values(),
            DEFAULT_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn images(root: u64) -> Vec<ImageGrid> {
    let mut rng = seed::rng(seed::derive(root, "grad-images", 0));
    (0..3)
        .map(|_| ImageGrid {
            size: 8,
            pixels: Tensor::randn(&[64], 1.0, &mut rng).into_data(),
        })
        .collect()
}

/// Runs every row; `root` seeds all random points.
pub fn grad_check_suite(root: u64) -> Result<Vec<GradCheckRow>> {
    let (k, d) = (6, 8);
    let mut rows = Vec::new();
    let mut push = |name: &str, err: f64| {
        rows.push(GradCheckRow {
            name: name.to_string(),
            points: GRAD_POINTS,
            max_rel_error: err,
            pass: err < GRAD_TOL,
        })
    };

    push(
        "cvl",
        worst_over_points(pair_points(root, "cvl", k, d), |g, x| {
            let (a, b) = (g.l2_normalize(x[0]), g.l2_normalize(x[1]));
            cvl_loss(g, a, b, DEFAULT_SIGMA)
        })?,
    );
    push(
        "ssv",
        worst_over_points(pair_points(root, "ssv", k, d), |g, x| {
            let (a, b) = (g.l2_normalize(x[0]), g.l2_normalize(x[1]));
            ssv_loss(g, a, b, DEFAULT_SIGMA)
        })?,
    );
    push(
        "ctr_tf",
        worst_over_points(pair_points(root, "tf", k, d), |g, x| {
            ctr_tf_loss(g, x[0], x[1], DEFAULT_LAMBDA).map(|r| r.0)
        })?,
    );
    push(
        "ctr_tt",
        worst_over_points(pair_points(root, "tt", k, d), |g, x| {
            ctr_tt_loss(g, x[0], x[1], DEFAULT_LAMBDA).map(|r| r.0)
        })?,
    );
    push(
        "mlm",
        worst_over_points(pair_points(root, "mlm", 3, d), |g, x| {
            let logits = g.add(x[0], x[1])?;
            let logits = g.reshape(logits, &[3, 2, 4])?;
            mlm_loss(g, logits, &[vec![1, -1], vec![0, 3], vec![-1, 2]])
        })?,
    );

    let text = reports();
    let labels: Vec<Vec<i64>> = vec![
        vec![-1, 5, -1, -1, -1, -1],
        vec![-1, -1, 8, -1, 10, -1],
        vec![-1, -1, -1, 13, -1, -1],
    ];
    push(
        "text_encoder",
        model_row(root, "text", |g, b| {
            let t = text_encode(g, b, &text, true, 5)?;
            let logits = mlm_head(g, b, t.per_token)?;
            let pl = project(g, b, Projector::L, t.pooled)?;
            let pd = project(g, b, Projector::D, t.pooled)?;
            let parts = [
                mlm_loss(g, logits, &labels)?,
                weighted_sum(g, pl, 0.2)?,
                weighted_sum(g, pd, 0.3)?,
            ];
            sum_all(g, &parts)
        })?,
    );

    let imgs = images(root);
    let refs: Vec<&ImageGrid> = imgs.iter().collect();
    let stacked = stack_images(&refs)?;
    push(
        "vision_encoder",
        model_row(root, "vision", |g, b| {
            let v = vision_encode(g, b, &stacked)?;
            let pv = project(g, b, Projector::V, v)?;
            sum_all(g, &[weighted_sum(g, v, 0.1)?, weighted_sum(g, pv, 0.4)?])
        })?,
    );

    let examples: Vec<VlpExample> = text
        .iter()
        .zip(&imgs)
        .enumerate()
        .map(|(i, (t, img))| VlpExample {
            id: i as u64,
            language: if i % 2 == 0 { Language::En } else { Language::Sp },
            tokens: t.clone(),
            image: img.clone(),
        })
        .collect();
    let batch: Vec<&VlpExample> = examples.iter().collect();
    let mut cfg = TrainConfig::vlp(2);
    cfg.n_frozen = 0;
    push(
        "vlp_objective",
        model_row(root, "vlp", |g, b| {
            let terms = vlp_terms(g, b, &batch, &cfg, 7)?;
            total_loss(g, &terms, &LossFlags::vlp())
        })?,
    );
    Ok(rows)
}
