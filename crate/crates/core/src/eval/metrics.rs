use std::cmp::Ordering;
use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Rank-statistic AUC: the probability that a random positive outscores a
/// random negative, ties counted half. `None` when only one class occurs.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Mid-ranks (1-based) over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * idx[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

fn f1(decisions: &[bool], labels: &[bool]) -> Option<f64> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub auc: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucF1 {
    pub per_category: Vec<CategoryMetrics>,
    /// Mean over categories with both classes present.
    pub macro_auc: Option<f64>,
    /// Mean over categories where F1 is defined.
    pub macro_f1: Option<f64>,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Macro AUC and F1 over categories. `scores[i][c]` is a signed score for
/// sample `i`, category `c`; the decision is positive iff it is > 0.
pub fn macro_auc_f1(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<AucF1> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset("no scored samples".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "macro_auc_f1",
            detail: format!("{} score rows, {} label rows", scores.len(), labels.len()),
        });
    }
    let cats = scores[0].len();
    if scores.iter().any(|r| r.len() != cats) || labels.iter().any(|r| r.len() != cats)
    {
        return Err(Error::Shape {
            op: "macro_auc_f1",
            detail: "ragged score or label rows".into(),
        });
    }
    let mut per_category = Vec::with_capacity(cats);
    for c in 0..cats {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        let d: Vec<bool> = s.iter().map(|&x| x > 0.0).collect();
        let a = auc(&s, &l);
        if a.is_none() {
            warn!("category {c} has a single class; skipped for AUC");
        }
        per_category.push(CategoryMetrics { auc: a, f1: f1(&d, &l) });
    }
    Ok(AucF1 {
        macro_auc: mean_of(per_category.iter().map(|m| m.auc)),
        macro_f1: mean_of(per_category.iter().map(|m| m.f1)),
        per_category,
    })
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
        })
        .collect()
}

/// Fraction of `(a, b)` pairs whose `b` row ranks within the top `k` of all
/// `B` rows by cosine similarity to row `a`. Equal similarities are broken
/// uniformly at random, in expectation.
pub fn retrieval_at_k(a: &Tensor, b: &Tensor, pairs: &[(usize, usize)], k: usize) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.last_dim() != b.last_dim() {
        return Err(Error::Shape {
            op: "retrieval_at_k",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no retrieval pairs".into()));
    }
    let (na, nb) = (a.outer_rows(), b.outer_rows());
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= na || j >= nb) {
        return Err(Error::Config(format!("pair ({i}, {j}) out of range")));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let (ua, ub) = (unit_rows(a), unit_rows(b));
    let mut hits = 0.0;
    for &(i, j) in pairs {
        let sims: Vec<f64> = ub
            .iter()
            .map(|r| r.iter().zip(&ua[i]).map(|(x, y)| x * y).sum())
            .collect();
        let target = sims[j];
        let above = sims.iter().filter(|&&s| s > target).count();
        let ties = sims.iter().filter(|&&s| s == target).count() - 1;
        // The true row lands uniformly in positions above+1 ..= above+ties+1.
        let p = (k as f64 - above as f64) / (ties + 1) as f64;
        hits += p.clamp(0.0, 1.0);
    }
    Ok(hits / pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

/// Runs `run` once per seed and summarizes every reported metric.
pub fn seed_variance<F>(seeds: &[u64], mut run: F) -> Result<BTreeMap<String, MeanStd>>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    if seeds.len() == 1 {
        warn!("a single seed gives no spread; std reported as 0");
    }
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &s in seeds {
        for (name, v) in run(s)? {
            values.entry(name).or_default().push(v);
        }
    }
    let mut out = BTreeMap::new();
    for (name, v) in values {
        if v.len() != seeds.len() {
            return Err(Error::Contract(format!(
                "metric {name} reported by {} of {} runs",
                v.len(),
                seeds.len()
            )));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        out.insert(
            name,
            MeanStd {
                mean,
                std: var.sqrt(),
                n: v.len(),
            },
        );
    }
    Ok(out)
}
