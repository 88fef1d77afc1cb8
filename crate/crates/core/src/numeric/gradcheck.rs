use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst per-coordinate relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` receives a fresh graph and one leaf per entry of `point`.
pub fn grad_check<F>(f: F, point: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let leaves: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &leaves)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(point)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = point.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ci in 0..point[ti].len() {
            let orig = point[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ci];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
