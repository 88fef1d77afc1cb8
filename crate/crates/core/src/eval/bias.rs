use log::warn;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::seed;
use crate::train::{adamw_update, AdamW, Precision};

fn check_rows(op: &'static str, emb: &Tensor, labels: &[bool]) -> Result<()> {
    if emb.rank() != 2 || emb.outer_rows() != labels.len() {
        return Err(Error::Shape {
            op,
            detail: format!("embeddings {:?} with {} labels", emb.shape(), labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(format!("{op}: no embeddings")));
    }
    Ok(())
}

fn unit(r: &[f64]) -> Vec<f64> {
    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    r.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeOptions {
    pub seed: u64,
    pub train_frac: f64,
    pub steps: usize,
    pub lr: f64,
    /// Ridge penalty on the weights; makes the optimum unique.
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            train_frac: 0.7,
            steps: 500,
            lr: 0.1,
            l2: 1e-3,
        }
    }
}

/// Held-out accuracy of a logistic classifier predicting `labels` from the
/// embedding rows. Features are centered and scaled by one global factor,
/// so the result does not depend on the orientation of the space.
pub fn language_probe(emb: &Tensor, labels: &[bool], opts: &ProbeOptions) -> Result<f64> {
    check_rows("language_probe", emb, labels)?;
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(opts.seed, "probe-split", 0)));
    let n_train = ((opts.train_frac * n as f64).round() as usize).min(n);
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "probe split of {n} rows at {} leaves an empty side",
            opts.train_frac
        )));
    }
    let (train, test) = order.split_at(n_train);
    let d = emb.last_dim();

    let mut mean = vec![0.0; d];
    for &i in train {
        mean.iter_mut().zip(emb.row(i)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let centered = |i: usize| -> Vec<f64> { emb.row(i).iter().zip(&mean).map(|(x, m)| x - m).collect() };
    let ms = train
        .iter()
        .map(|&i| centered(i).iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / train.len() as f64;
    let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };
    let feats = |i: usize| -> Vec<f64> { centered(i).iter().map(|x| x * scale).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| feats(i)).collect();
    let ys: Vec<f64> = train.iter().map(|&i| if labels[i] { 1.0 } else { 0.0 }).collect();

    // Weights then bias in one buffer.
    let mut p = vec![0.0; d + 1];
    let mut m = vec![0.0; d + 1];
    let mut v = vec![0.0; d + 1];
    let hyper = AdamW {
        store: Precision::F64,
        ..AdamW::default()
    };
    let inv_n = 1.0 / xs.len() as f64;
    for t in 0..opts.steps {
        let mut g = vec![0.0; d + 1];
        for (x, &y) in xs.iter().zip(&ys) {
            let z = dot(&p[..d], x) + p[d];
            let r = (sigmoid(z) - y) * inv_n;
            g[..d].iter_mut().zip(x).for_each(|(g, x)| *g += r * x);
            g[d] += r;
        }
        g[..d].iter_mut().zip(&p[..d]).for_each(|(g, w)| *g += opts.l2 * w);
        let lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / opts.steps as f64).cos());
        adamw_update(&mut p, &g, &mut m, &mut v, t as u64 + 1, lr, 0.0, &hyper);
    }
    let correct = test
        .iter()
        .filter(|&&i| (dot(&p[..d], &feats(i)) + p[d] > 0.0) == labels[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Distance between the two label centroids of the unit-normalized rows.
pub fn centroid_gap(emb: &Tensor, labels: &[bool]) -> Result<f64> {
    check_rows("centroid_gap", emb, labels)?;
    let d = emb.last_dim();
    let mut c = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0usize; 2];
    for (r, &l) in emb.rows().zip(labels) {
        let k = usize::from(l);
        counts[k] += 1;
        c[k].iter_mut().zip(unit(r)).for_each(|(c, x)| *c += x);
    }
    if counts.contains(&0) {
        return Err(Error::Config("centroid gap needs both groups".into()));
    }
    Ok(c[0]
        .iter()
        .zip(&c[1])
        .map(|(a, b)| (a / counts[0] as f64 - b / counts[1] as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Mean silhouette of the label partition, Euclidean distance between
/// unit-normalized rows.
pub fn silhouette(emb: &Tensor, labels: &[bool]) -> Result<f64> {
    check_rows("silhouette", emb, labels)?;
    let rows: Vec<Vec<f64>> = emb.rows().map(unit).collect();
    let n = rows.len();
    let counts = [
        labels.iter().filter(|&&l| !l).count(),
        labels.iter().filter(|&&l| l).count(),
    ];
    if counts.contains(&0) {
        return Err(Error::Config("silhouette needs both groups".into()));
    }
    // sums[i][g]: total distance from i to members of group g.
    let mut sums = vec![[0.0f64; 2]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d2 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let dist = d2.sqrt();
            sums[i][usize::from(labels[j])] += dist;
            sums[j][usize::from(labels[i])] += dist;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = usize::from(labels[i]);
        if counts[own] == 1 {
            continue;
        }
        let a = sums[i][own] / (counts[own] - 1) as f64;
        let b = sums[i][1 - own] / counts[1 - own] as f64;
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Cosine similarity between all rows.
pub fn cosine_similarity_matrix(emb: &Tensor) -> Result<Tensor> {
    if emb.rank() != 2 {
        return Err(Error::Shape {
            op: "cosine_similarity_matrix",
            detail: format!("{:?}", emb.shape()),
        });
    }
    let rows: Vec<Vec<f64>> = emb.rows().map(unit).collect();
    let n = rows.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let s = dot(&rows[i], &rows[j]);
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Tensor::new(vec![n, n], out)
}

fn mat_vec(c: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    (0..d).map(|i| dot(&c[i * d..(i + 1) * d], x)).collect()
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Coordinates on the top two principal axes found by power iteration with
/// deflation, plus the variance along each. Axis signs make the largest
/// component of each axis positive.
pub fn pca_2d(emb: &Tensor, rng_seed: u64, iters: usize) -> Result<(Vec<[f64; 2]>, [f64; 2])> {
    if emb.rank() != 2 || emb.outer_rows() == 0 || emb.last_dim() < 2 {
        return Err(Error::Shape {
            op: "pca_2d",
            detail: format!("need n x D with D >= 2, got {:?}", emb.shape()),
        });
    }
    let (n, d) = (emb.outer_rows(), emb.last_dim());
    let mut mean = vec![0.0; d];
    for r in emb.rows() {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n as f64);
    }
    let centered: Vec<Vec<f64>> = emb
        .rows()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j] / n as f64;
            }
        }
    }
    let mut rng = seed::rng(rng_seed);
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut variances = [0.0; 2];
    for (a, var) in variances.iter_mut().enumerate() {
        let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..iters {
            for prev in &axes {
                let p = dot(&x, prev);
                x.iter_mut().zip(prev).for_each(|(x, q)| *x -= p * q);
            }
            x = mat_vec(&cov, d, &x);
            if normalize(&mut x) == 0.0 {
                break;
            }
        }
        for prev in &axes {
            let p = dot(&x, prev);
            x.iter_mut().zip(prev).for_each(|(x, q)| *x -= p * q);
        }
        normalize(&mut x);
        let big = x.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 {
            x.iter_mut().for_each(|v| *v = -*v);
        }
        *var = dot(&x, &mat_vec(&cov, d, &x));
        if a == 0 && *var == 0.0 {
            warn!("embeddings have zero variance; PCA coordinates are all 0");
        }
        axes.push(x);
    }
    let coords = centered
        .iter()
        .map(|r| [dot(r, &axes[0]), dot(r, &axes[1])])
        .collect();
    Ok((coords, variances))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasOptions {
    pub probe: ProbeOptions,
    pub pca_seed: u64,
    pub pca_iters: usize,
    /// Rows per language in the exported similarity matrix.
    pub heatmap_per_group: usize,
}

impl Default for BiasOptions {
    fn default() -> Self {
        Self {
            probe: ProbeOptions::default(),
            pca_seed: 0,
            pca_iters: 100,
            heatmap_per_group: 32,
        }
    }
}

/// Language-separation diagnostics of one embedding set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModalityBias {
    pub probe_accuracy: f64,
    pub centroid_gap: f64,
    pub silhouette: f64,
    pub pca_variance: [f64; 2],
    #[serde(skip)]
    pub pca_coords: Vec<[f64; 2]>,
    /// Input rows of the similarity matrix, first group first.
    #[serde(skip)]
    pub heatmap_rows: Vec<usize>,
    #[serde(skip)]
    pub similarity_matrix: Tensor,
}

impl ModalityBias {
    pub fn compute(emb: &Tensor, labels: &[bool], opts: &BiasOptions) -> Result<Self> {
        let (pca_coords, pca_variance) = pca_2d(emb, opts.pca_seed, opts.pca_iters)?;
        let mut heatmap_rows: Vec<usize> = Vec::new();
        for group in [false, true] {
            heatmap_rows.extend(
                (0..labels.len())
                    .filter(|&i| labels[i] == group)
                    .take(opts.heatmap_per_group),
            );
        }
        let mut sub = Vec::with_capacity(heatmap_rows.len() * emb.last_dim());
        for &i in &heatmap_rows {
            sub.extend_from_slice(emb.row(i));
        }
        let sub = Tensor::new(vec![heatmap_rows.len(), emb.last_dim()], sub)?;
        Ok(Self {
            probe_accuracy: language_probe(emb, labels, &opts.probe)?,
            centroid_gap: centroid_gap(emb, labels)?,
            silhouette: silhouette(emb, labels)?,
            pca_variance,
            pca_coords,
            heatmap_rows,
            similarity_matrix: cosine_similarity_matrix(&sub)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasReport {
    pub text: ModalityBias,
    pub image: ModalityBias,
}

/// Diagnostics for paired report and image embeddings; `labels` is true for
/// the second language.
pub fn bias_report(
    text: &Tensor,
    image: &Tensor,
    labels: &[bool],
    opts: &BiasOptions,
) -> Result<BiasReport> {
    Ok(BiasReport {
        text: ModalityBias::compute(text, labels, opts)?,
        image: ModalityBias::compute(image, labels, opts)?,
    })
}
