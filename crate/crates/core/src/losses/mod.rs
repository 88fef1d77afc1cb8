//! Alignment objectives: two InfoNCE losses, the two-axis decorrelation
//! regularizer and masked-token cross entropy.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Bcast, Graph, Tensor, Var};

/// InfoNCE temperature for image-text and image-image alignment.
pub const DEFAULT_SIGMA: f64 = 0.07;
/// Off-diagonal weight of the decorrelation terms.
pub const DEFAULT_LAMBDA: f64 = 5.1e-3;
/// Floor on the normalization denominators; guards zero-variance columns
/// and rows without perturbing non-degenerate ones.
pub const NORM_EPS: f64 = 1e-8;
/// Allowed deviation of an input row norm from 1.
pub const UNIT_TOL: f64 = 1e-6;

fn require_unit_rows(g: &Graph, x: Var, what: &str) -> Result<()> {
    let v = g.value(x);
    if v.rank() != 2 {
        return Err(Error::Shape {
            op: "infonce",
            detail: format!("{what} must be 2-D, got {:?}", v.shape()),
        });
    }
    for (i, row) in v.rows().enumerate() {
        let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!(
                "{what} row {i} has norm {n}, expected unit rows"
            )));
        }
    }
    Ok(())
}

fn same_shape(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::Shape {
            op,
            detail: format!("{sa:?} vs {sb:?}"),
        });
    }
    Ok((sa[0], sa[1]))
}

fn check_temperature(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature {sigma} must be positive")))
    }
}

/// `-sum_i log softmax(s_i.)_i` over rows of a square score matrix.
fn diagonal_nll(g: &Graph, scores: Var, k: usize) -> Result<Var> {
    let lp = g.log_softmax(scores);
    let idx: Vec<usize> = (0..k).collect();
    let diag = g.select_per_row(lp, &idx)?;
    let s = g.sum(diag);
    Ok(g.scale(s, -1.0))
}

/// Symmetric image-text InfoNCE averaged over both directions and the
/// batch. Inputs must have unit rows.
pub fn cvl_loss(g: &Graph, v: Var, l: Var, sigma: f64) -> Result<Var> {
    check_temperature(sigma)?;
    let (k, _) = same_shape(g, v, l, "cvl_loss")?;
    require_unit_rows(g, v, "image embeddings")?;
    require_unit_rows(g, l, "text embeddings")?;
    let s = g.matmul_t(v, l, false, true)?;
    let s = g.scale(s, 1.0 / sigma);
    let v2l = diagonal_nll(g, s, k)?;
    let st = g.transpose(s)?;
    let l2v = diagonal_nll(g, st, k)?;
    let both = g.add(v2l, l2v)?;
    Ok(g.scale(both, 1.0 / (2 * k) as f64))
}

/// One-direction InfoNCE between two augmented image views.
pub fn ssv_loss(g: &Graph, v: Var, v2: Var, sigma: f64) -> Result<Var> {
    check_temperature(sigma)?;
    let (k, _) = same_shape(g, v, v2, "ssv_loss")?;
    require_unit_rows(g, v, "first view")?;
    require_unit_rows(g, v2, "second view")?;
    let s = g.matmul_t(v, v2, false, true)?;
    let s = g.scale(s, 1.0 / sigma);
    let nll = diagonal_nll(g, s, k)?;
    Ok(g.scale(nll, 1.0 / k as f64))
}

fn standardize(g: &Graph, z: Var, axis: usize, along: Bcast) -> Result<Var> {
    let n = g.shape(z)[axis];
    let mu = g.mean_axis(z, axis)?;
    let centered = g.sub_bcast(z, mu, along)?;
    let var = g.variance_axis(z, axis)?;
    let sd = g.sqrt(var);
    let denom = g.scale(sd, (n as f64).sqrt());
    let denom = g.clamp_min(denom, NORM_EPS);
    g.div_bcast(centered, denom, along)
}

/// Column-wise `(z - mean) / max(sqrt(K) * std, eps)`: unit-norm, zero-mean
/// columns.
pub fn batch_normalize(g: &Graph, z: Var) -> Result<Var> {
    let shape = g.shape(z);
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::Shape {
            op: "batch_normalize",
            detail: format!("need at least 2 rows, got {shape:?}"),
        });
    }
    standardize(g, z, 0, Bcast::PerColumn)
}

/// Row-wise `(z - mean) / max(sqrt(D') * std, eps)`: unit-norm, zero-mean
/// rows.
pub fn feature_normalize(g: &Graph, z: Var) -> Result<Var> {
    let shape = g.shape(z);
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::Shape {
            op: "feature_normalize",
            detail: format!("need at least 2 columns, got {shape:?}"),
        });
    }
    standardize(g, z, 1, Bcast::PerRow)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrAxis {
    Feature,
    Sample,
}

/// Cross-correlation matrix behind a decorrelation term.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Tensor,
    pub axis: CorrAxis,
}

/// `(1/n) [sum_j (1 - C_jj)^2 + lambda sum_{i != j} C_ij^2]` for square `C`.
fn redundancy(g: &Graph, c: Var, n: usize, lambda: f64) -> Result<Var> {
    let idx: Vec<usize> = (0..n).collect();
    let diag = g.select_per_row(c, &idx)?;
    let miss = g.scale(diag, -1.0);
    let miss = g.add_scalar(miss, 1.0);
    let on = g.mul(miss, miss)?;
    let on = g.sum(on);
    let mut mask = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mask = g.constant(mask);
    let sq = g.mul(c, c)?;
    let off = g.mul(sq, mask)?;
    let off = g.sum(off);
    let off = g.scale(off, lambda);
    let total = g.add(on, off)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda {lambda} must be non-negative")))
    }
}

/// Feature-axis term: `C = Z~_A^T Z~_B` (`D' x D'`), normalized by `D'`.
pub fn ctr_tf_loss(g: &Graph, za: Var, zb: Var, lambda: f64) -> Result<(Var, CorrelationMatrix)> {
    check_lambda(lambda)?;
    let (_, d) = same_shape(g, za, zb, "ctr_tf_loss")?;
    let a = batch_normalize(g, za)?;
    let b = batch_normalize(g, zb)?;
    let c = g.matmul_t(a, b, true, false)?;
    let corr = CorrelationMatrix {
        values: g.value(c).clone(),
        axis: CorrAxis::Feature,
    };
    Ok((redundancy(g, c, d, lambda)?, corr))
}

/// Sample-axis term: `C = Z^_A Z^_B^T` (`K x K`), normalized by `K`.
pub fn ctr_tt_loss(g: &Graph, za: Var, zb: Var, lambda: f64) -> Result<(Var, CorrelationMatrix)> {
    check_lambda(lambda)?;
    let (k, _) = same_shape(g, za, zb, "ctr_tt_loss")?;
    let a = feature_normalize(g, za)?;
    let b = feature_normalize(g, zb)?;
    let c = g.matmul_t(a, b, false, true)?;
    let corr = CorrelationMatrix {
        values: g.value(c).clone(),
        axis: CorrAxis::Sample,
    };
    Ok((redundancy(g, c, k, lambda)?, corr))
}

/// Both decorrelation terms and their sum.
#[derive(Clone, Copy, Debug)]
pub struct CtrTerms {
    pub tf: Var,
    pub tt: Var,
    pub ctr: Var,
}

pub fn ctr_loss(g: &Graph, za: Var, zb: Var, lambda: f64) -> Result<CtrTerms> {
    let (tf, _) = ctr_tf_loss(g, za, zb, lambda)?;
    let (tt, _) = ctr_tt_loss(g, za, zb, lambda)?;
    let ctr = g.add(tf, tt)?;
    Ok(CtrTerms { tf, tt, ctr })
}

/// Mean cross entropy over positions whose label is non-negative. With no
/// labeled position the loss is a constant 0.
pub fn mlm_loss(g: &Graph, logits: Var, labels: &[Vec<i64>]) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 3 || shape[0] != labels.len() {
        return Err(Error::Shape {
            op: "mlm_loss",
            detail: format!("logits {shape:?} with {} label rows", labels.len()),
        });
    }
    let (k, t, v) = (shape[0], shape[1], shape[2]);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, row) in labels.iter().enumerate() {
        if row.len() != t {
            return Err(Error::Shape {
                op: "mlm_loss",
                detail: format!("label row {i} has length {}, expected {t}", row.len()),
            });
        }
        for (j, &y) in row.iter().enumerate() {
            if y < 0 {
                continue;
            }
            if y as usize >= v {
                return Err(Error::Contract(format!("label {y} outside vocabulary of {v}")));
            }
            rows.push(i * t + j);
            targets.push(y as usize);
        }
    }
    if rows.is_empty() {
        warn!("mlm_loss: batch has no labeled positions, loss set to 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let flat = g.reshape(logits, &[k * t, v])?;
    let picked = g.gather_rows(flat, &rows)?;
    let lp = g.log_softmax(picked);
    let ll = g.select_per_row(lp, &targets)?;
    let m = g.mean(ll);
    Ok(g.scale(m, -1.0))
}

/// Which objective components contribute to the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub cvl: bool,
    pub ssv: bool,
    pub tf: bool,
    pub tt: bool,
    pub mlm: bool,
}

impl LossFlags {
    /// Image-text, image-image and both decorrelation terms.
    pub fn vlp() -> Self {
        Self {
            cvl: true,
            ssv: true,
            tf: true,
            tt: true,
            mlm: false,
        }
    }

    pub fn mlm_only() -> Self {
        Self {
            cvl: false,
            ssv: false,
            tf: false,
            tt: false,
            mlm: true,
        }
    }

    pub fn ctr(&self) -> bool {
        self.tf || self.tt
    }

    pub fn any(&self) -> bool {
        self.cvl || self.ssv || self.tf || self.tt || self.mlm
    }

    /// Names of disabled components, in stream order.
    pub fn disabled(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for (on, name) in [
            (self.cvl, "cvl"),
            (self.ssv, "ssv"),
            (self.tf, "tf"),
            (self.tt, "tt"),
            (self.mlm, "mlm"),
        ] {
            if !on {
                out.push(name);
            }
        }
        if !self.ctr() {
            out.insert(out.iter().position(|&n| n == "mlm").unwrap_or(out.len()), "ctr");
        }
        out
    }
}

/// Graph nodes of the computed components; `None` when not computed.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub cvl: Option<Var>,
    pub ssv: Option<Var>,
    pub tf: Option<Var>,
    pub tt: Option<Var>,
    pub mlm: Option<Var>,
}

/// Unit-weight sum of the enabled components.
pub fn total_loss(g: &Graph, terms: &LossTerms, flags: &LossFlags) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (on, term, name) in [
        (flags.cvl, terms.cvl, "cvl"),
        (flags.ssv, terms.ssv, "ssv"),
        (flags.tf, terms.tf, "tf"),
        (flags.tt, terms.tt, "tt"),
        (flags.mlm, terms.mlm, "mlm"),
    ] {
        if !on {
            continue;
        }
        let v = term.ok_or_else(|| Error::Config(format!("{name} enabled but not computed")))?;
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v)?,
        });
    }
    total.ok_or_else(|| Error::Config("no loss component enabled".into()))
}

/// Scalar record of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cvl: f64,
    pub ssv: f64,
    pub tf: f64,
    pub tt: f64,
    pub ctr: f64,
    pub mlm: f64,
    pub total: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Reads term values; disabled terms are recorded as 0.
    pub fn collect(
        g: &Graph,
        terms: &LossTerms,
        flags: &LossFlags,
        sigma1: f64,
        sigma2: f64,
        lambda: f64,
    ) -> Self {
        let read = |on: bool, v: Option<Var>| match (on, v) {
            (true, Some(v)) => g.scalar(v),
            _ => 0.0,
        };
        let cvl = read(flags.cvl, terms.cvl);
        let ssv = read(flags.ssv, terms.ssv);
        let tf = read(flags.tf, terms.tf);
        let tt = read(flags.tt, terms.tt);
        let mlm = read(flags.mlm, terms.mlm);
        let ctr = tf + tt;
        Self {
            cvl,
            ssv,
            tf,
            tt,
            ctr,
            mlm,
            total: cvl + ssv + ctr + mlm,
            sigma1,
            sigma2,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cvl, self.ssv, self.tf, self.tt, self.ctr, self.mlm, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}
