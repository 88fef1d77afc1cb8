use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a vector operand is broadcast against a 2-D operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bcast {
    /// One entry per column, repeated down every row (a bias).
    PerColumn,
    /// One entry per row, repeated across every column.
    PerRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Tanh,
    Relu,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Binary { a: Var, b: Var, kind: BinKind },
    Broadcast { a: Var, v: Var, kind: BinKind, along: Bcast },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    ClampMin { a: Var },
    Unary { a: Var, kind: Unary },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    SumAll { a: Var },
    SumAxis { a: Var, axis: usize },
    VarianceAxis { a: Var, axis: usize },
    L2Normalize { a: Var, norms: Vec<f64> },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Transpose { a: Var },
    Reshape { a: Var },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Dropout { a: Var, mask: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    SelectPerRow { a: Var, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of primitive operations with reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape is already a
/// topological order; [`Graph::backward`] walks it once in reverse.
/// Gradients of leaves accumulate across `backward` calls until
/// [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<usize, Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// First element of a value; intended for scalar results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.leaf_grads.borrow();
        let g = grads.get(&v.0)?;
        let shape = self.shape(v);
        Some(Tensor::new(shape, g.clone()).expect("gradient matches leaf shape"))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    // ------------------------------------------------------------------
    // linear algebra

    /// 2-D product `op(a) * op(b)`, where `ta`/`tb` transpose the operand.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return shape_err("matmul", format!("{sa:?}{} x {sb:?}{}", t(ta), t(tb)));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            gemm(m, ka, n, nodes[a.0].value.data(), ta, nodes[b.0].value.data(), tb, 0.0, &mut out);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product over the leading axis of two rank-3 values.
    pub fn bmm_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let bs = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return shape_err("bmm", format!("{sa:?}{} x {sb:?}{}", t(ta), t(tb)));
        }
        let mut out = vec![0.0; bs * m * n];
        {
            let nodes = self.nodes.borrow();
            let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            for i in 0..bs {
                gemm(
                    m,
                    ka,
                    n,
                    &ad[i * m * ka..(i + 1) * m * ka],
                    ta,
                    &bd[i * ka * n..(i + 1) * ka * n],
                    tb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul { a, b, ta, tb },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // elementwise

    fn binary(&self, a: Var, b: Var, kind: BinKind, name: &'static str) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| apply_bin(kind, x, y))
            .collect();
        let shape = va.shape().to_vec();
        drop((va, vb));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add, "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub, "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul, "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Div, "div")
    }

    fn broadcast(&self, a: Var, v: Var, kind: BinKind, along: Bcast) -> Result<Var> {
        let (va, vv) = (self.value(a), self.value(v));
        if va.rank() != 2 {
            return shape_err("broadcast", format!("lhs {:?} is not 2-D", va.shape()));
        }
        let (m, n) = (va.shape()[0], va.shape()[1]);
        let want = match along {
            Bcast::PerColumn => n,
            Bcast::PerRow => m,
        };
        if vv.len() != want {
            return shape_err(
                "broadcast",
                format!("{:?} against vector of {} for {along:?}", va.shape(), vv.len()),
            );
        }
        let mut data = va.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                let w = match along {
                    Bcast::PerColumn => vv.data()[j],
                    Bcast::PerRow => vv.data()[i],
                };
                data[i * n + j] = apply_bin(kind, data[i * n + j], w);
            }
        }
        drop((va, vv));
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![m, n], data)?,
            Op::Broadcast { a, v, kind, along },
            rg,
        ))
    }

    pub fn add_bcast(&self, a: Var, v: Var, along: Bcast) -> Result<Var> {
        self.broadcast(a, v, BinKind::Add, along)
    }

    pub fn sub_bcast(&self, a: Var, v: Var, along: Bcast) -> Result<Var> {
        self.broadcast(a, v, BinKind::Sub, along)
    }

    pub fn mul_bcast(&self, a: Var, v: Var, along: Bcast) -> Result<Var> {
        self.broadcast(a, v, BinKind::Mul, along)
    }

    pub fn div_bcast(&self, a: Var, v: Var, along: Bcast) -> Result<Var> {
        self.broadcast(a, v, BinKind::Div, along)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar { a }, rg)
    }

    /// `max(x, floor)` elementwise; the gradient passes where `x >= floor`.
    pub fn clamp_min(&self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(a);
        self.push(value, Op::ClampMin { a }, rg)
    }

    fn unary(&self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |x| if x > 0.0 { x } else { 0.0 },
            Unary::Sqrt => f64::sqrt,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, Op::Unary { a, kind }, rg)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    // ------------------------------------------------------------------
    // row-wise (last axis) operations

    pub fn softmax(&self, a: Var) -> Var {
        let value = {
            let va = self.value(a);
            let mut out = va.clone();
            let c = va.last_dim();
            for row in out.data_mut().chunks_mut(c.max(1)) {
                softmax_in_place(row);
            }
            out
        };
        let rg = self.rg(a);
        self.push(value, Op::Softmax { a }, rg)
    }

    pub fn log_softmax(&self, a: Var) -> Var {
        let value = {
            let va = self.value(a);
            let mut out = va.clone();
            let c = va.last_dim();
            for row in out.data_mut().chunks_mut(c.max(1)) {
                // ln_1p keeps precision when the max term dominates.
                let (arg, max) = row
                    .iter()
                    .cloned()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, x)| if x > b.1 { (i, x) } else { b });
                let rest: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != arg)
                    .map(|(_, x)| (x - max).exp())
                    .sum();
                let tail = rest.ln_1p();
                row.iter_mut().for_each(|x| *x = (*x - max) - tail);
            }
            out
        };
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmax { a }, rg)
    }

    /// Divides each row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&self, a: Var) -> Var {
        let (value, norms) = {
            let va = self.value(a);
            let mut out = va.clone();
            let c = va.last_dim();
            let mut norms = Vec::with_capacity(va.outer_rows());
            for row in out.data_mut().chunks_mut(c.max(1)) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                row.iter_mut().for_each(|x| *x /= norm);
                norms.push(norm);
            }
            (out, norms)
        };
        let rg = self.rg(a);
        self.push(value, Op::L2Normalize { a, norms }, rg)
    }

    /// Standardizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, a: Var, eps: f64) -> Var {
        let (value, inv_std) = {
            let va = self.value(a);
            let mut out = va.clone();
            let c = va.last_dim();
            let mut inv_std = Vec::with_capacity(va.outer_rows());
            for row in out.data_mut().chunks_mut(c.max(1)) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|x| *x = (*x - mean) * is);
                inv_std.push(is);
            }
            (out, inv_std)
        };
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { a, inv_std }, rg)
    }

    // ------------------------------------------------------------------
    // reductions

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of a 2-D value along `axis`; the reduced axis disappears.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let va = self.value(a);
            if va.rank() != 2 || axis > 1 {
                return shape_err("sum_axis", format!("{:?} axis {axis}", va.shape()));
            }
            let (m, n) = (va.shape()[0], va.shape()[1]);
            let d = va.data();
            if axis == 0 {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += d[i * n + j];
                    }
                }
                Tensor::new(vec![n], out)?
            } else {
                Tensor::new(vec![m], d.chunks(n.max(1)).map(|r| r.iter().sum()).collect())?
            }
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumAxis { a, axis }, rg))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Population variance (divide by n) of a 2-D value along `axis`.
    pub fn variance_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let va = self.value(a);
            if va.rank() != 2 || axis > 1 {
                return shape_err("variance_axis", format!("{:?} axis {axis}", va.shape()));
            }
            let (m, n) = (va.shape()[0], va.shape()[1]);
            let d = va.data();
            let (outer, inner) = if axis == 0 { (n, m) } else { (m, n) };
            let at = |o: usize, i: usize| if axis == 0 { d[i * n + o] } else { d[o * n + i] };
            let out: Vec<f64> = (0..outer)
                .map(|o| {
                    let mean = (0..inner).map(|i| at(o, i)).sum::<f64>() / inner as f64;
                    (0..inner).map(|i| (at(o, i) - mean).powi(2)).sum::<f64>() / inner as f64
                })
                .collect();
            Tensor::new(vec![outer], out)?
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::VarianceAxis { a, axis }, rg))
    }

    // ------------------------------------------------------------------
    // layout

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.value(a).transposed()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose { a }, rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// Rows `[start, start + len)` of a 2-D value.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let va = self.value(a);
            if va.rank() != 2 || start + len > va.shape()[0] {
                return shape_err("slice_rows", format!("{:?} [{start}..+{len}]", va.shape()));
            }
            let n = va.shape()[1];
            Tensor::new(vec![len, n], va.data()[start * n..(start + len) * n].to_vec())?
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows { a, start }, rg))
    }

    /// Columns `[start, start + len)` of a 2-D value.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let va = self.value(a);
            if va.rank() != 2 || start + len > va.shape()[1] {
                return shape_err("slice_cols", format!("{:?} [{start}..+{len}]", va.shape()));
            }
            let (m, n) = (va.shape()[0], va.shape()[1]);
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&va.data()[i * n + start..i * n + start + len]);
            }
            Tensor::new(vec![m, len], out)?
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols { a, start }, rg))
    }

    /// Concatenation of 2-D values along `axis` (0 = stack rows, 1 = join columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return shape_err("concat", "no inputs or axis > 1");
        }
        let value = {
            let nodes = self.nodes.borrow();
            let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.0].value.shape()).collect();
            if shapes.iter().any(|s| s.len() != 2) {
                return shape_err("concat", format!("{shapes:?}"));
            }
            let other = 1 - axis;
            if shapes.iter().any(|s| s[other] != shapes[0][other]) {
                return shape_err("concat", format!("{shapes:?} along {axis}"));
            }
            if axis == 0 {
                let rows = shapes.iter().map(|s| s[0]).sum();
                let data = parts.iter().flat_map(|p| nodes[p.0].value.data().iter().copied());
                Tensor::new(vec![rows, shapes[0][1]], data.collect())?
            } else {
                let m = shapes[0][0];
                let cols: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(m * cols);
                for i in 0..m {
                    for p in parts {
                        let v = &nodes[p.0].value;
                        data.extend_from_slice(v.row(i));
                    }
                }
                Tensor::new(vec![m, cols], data)?
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout(&self, a: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.scale(a, 1.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = {
            let va = self.value(a);
            let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            Tensor::new(va.shape().to_vec(), data)?
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Dropout { a, mask }, rg))
    }

    /// Rows of a 2-D table selected by index (embedding lookup).
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = {
            let vt = self.value(table);
            if vt.rank() != 2 {
                return shape_err("gather_rows", format!("table {:?}", vt.shape()));
            }
            let (rows, n) = (vt.shape()[0], vt.shape()[1]);
            if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
                return shape_err("gather_rows", format!("index {bad} >= {rows}"));
            }
            let mut out = Vec::with_capacity(ids.len() * n);
            for &i in ids {
                out.extend_from_slice(vt.row(i));
            }
            Tensor::new(vec![ids.len(), n], out)?
        };
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `a[i, idx[i]]` from each row of a 2-D value.
    pub fn select_per_row(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = {
            let va = self.value(a);
            if va.rank() != 2 || va.shape()[0] != idx.len() {
                return shape_err(
                    "select_per_row",
                    format!("{:?} with {} indices", va.shape(), idx.len()),
                );
            }
            let n = va.shape()[1];
            if let Some(bad) = idx.iter().find(|&&j| j >= n) {
                return shape_err("select_per_row", format!("column {bad} >= {n}"));
            }
            let out = idx.iter().enumerate().map(|(i, &j)| va.data()[i * n + j]).collect();
            Tensor::new(vec![idx.len()], out)?
        };
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::SelectPerRow {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    // ------------------------------------------------------------------
    // reverse pass

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            });
        }
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let mut leaf = self.leaf_grads.borrow_mut();
                let slot = leaf.entry(id).or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(())
    }
}

fn t(flag: bool) -> &'static str {
    if flag {
        "ᵀ"
    } else {
        ""
    }
}

fn apply_bin(kind: BinKind, x: f64, y: f64) -> f64 {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Adds `g` into the gradient slot of `v`, allocating it on first use.
fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    g(slot);
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            let k = if *ta { va.shape()[0] } else { va.shape()[1] };
            acc(grads, nodes, *a, |da| {
                if *ta {
                    gemm(k, n, m, vb.data(), *tb, g, true, 1.0, da);
                } else {
                    gemm(m, n, k, g, false, vb.data(), !*tb, 1.0, da);
                }
            });
            acc(grads, nodes, *b, |db| {
                if *tb {
                    gemm(n, m, k, g, true, va.data(), *ta, 1.0, db);
                } else {
                    gemm(k, m, n, va.data(), !*ta, g, false, 1.0, db);
                }
            });
        }
        Op::BatchMatMul { a, b, ta, tb } => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let s = node.value.shape();
            let (bs, m, n) = (s[0], s[1], s[2]);
            let k = if *ta { va.shape()[1] } else { va.shape()[2] };
            let (sa, sb, sc) = (m * k, k * n, m * n);
            acc(grads, nodes, *a, |da| {
                for i in 0..bs {
                    let gi = &g[i * sc..(i + 1) * sc];
                    let bi = &vb.data()[i * sb..(i + 1) * sb];
                    let dai = &mut da[i * sa..(i + 1) * sa];
                    if *ta {
                        gemm(k, n, m, bi, *tb, gi, true, 1.0, dai);
                    } else {
                        gemm(m, n, k, gi, false, bi, !*tb, 1.0, dai);
                    }
                }
            });
            acc(grads, nodes, *b, |db| {
                for i in 0..bs {
                    let gi = &g[i * sc..(i + 1) * sc];
                    let ai = &va.data()[i * sa..(i + 1) * sa];
                    let dbi = &mut db[i * sb..(i + 1) * sb];
                    if *tb {
                        gemm(n, m, k, gi, true, ai, *ta, 1.0, dbi);
                    } else {
                        gemm(k, m, n, ai, !*ta, gi, false, 1.0, dbi);
                    }
                }
            });
        }
        Op::Binary { a, b, kind } => {
            let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            acc(grads, nodes, *a, |da| {
                for i in 0..g.len() {
                    da[i] += match kind {
                        BinKind::Add | BinKind::Sub => g[i],
                        BinKind::Mul => g[i] * xb[i],
                        BinKind::Div => g[i] / xb[i],
                    };
                }
            });
            acc(grads, nodes, *b, |db| {
                for i in 0..g.len() {
                    db[i] += match kind {
                        BinKind::Add => g[i],
                        BinKind::Sub => -g[i],
                        BinKind::Mul => g[i] * xa[i],
                        BinKind::Div => -g[i] * xa[i] / (xb[i] * xb[i]),
                    };
                }
            });
        }
        Op::Broadcast { a, v, kind, along } => {
            let (xa, xv) = (nodes[a.0].value.data(), nodes[v.0].value.data());
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            let vi = |i: usize, j: usize| match along {
                Bcast::PerColumn => j,
                Bcast::PerRow => i,
            };
            acc(grads, nodes, *a, |da| {
                for i in 0..m {
                    for j in 0..n {
                        let p = i * n + j;
                        da[p] += match kind {
                            BinKind::Add | BinKind::Sub => g[p],
                            BinKind::Mul => g[p] * xv[vi(i, j)],
                            BinKind::Div => g[p] / xv[vi(i, j)],
                        };
                    }
                }
            });
            acc(grads, nodes, *v, |dv| {
                for i in 0..m {
                    for j in 0..n {
                        let p = i * n + j;
                        let w = xv[vi(i, j)];
                        dv[vi(i, j)] += match kind {
                            BinKind::Add => g[p],
                            BinKind::Sub => -g[p],
                            BinKind::Mul => g[p] * xa[p],
                            BinKind::Div => -g[p] * xa[p] / (w * w),
                        };
                    }
                }
            });
        }
        Op::Scale { a, factor } => {
            acc(grads, nodes, *a, |da| {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x * factor)
            });
        }
        Op::AddScalar { a } => {
            acc(grads, nodes, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
        }
        Op::ClampMin { a } => {
            let x = nodes[a.0].value.data();
            acc(grads, nodes, *a, |da| {
                for i in 0..g.len() {
                    if x[i] >= out[i] {
                        da[i] += g[i];
                    }
                }
            });
        }
        Op::Unary { a, kind } => {
            let x = nodes[a.0].value.data();
            acc(grads, nodes, *a, |da| {
                for i in 0..g.len() {
                    da[i] += g[i]
                        * match kind {
                            Unary::Exp => out[i],
                            Unary::Log => 1.0 / x[i],
                            Unary::Tanh => 1.0 - out[i] * out[i],
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            // sqrt(0) has an infinite slope; callers only reach it
                            // through ε-guarded expressions whose upstream is zero.
                            Unary::Sqrt => {
                                if out[i] > 0.0 {
                                    0.5 / out[i]
                                } else {
                                    0.0
                                }
                            }
                        };
                }
            });
        }
        Op::Softmax { a } => {
            let c = node.value.last_dim().max(1);
            acc(grads, nodes, *a, |da| {
                for ((y, gr), d) in out.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[j] += y[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax { a } => {
            let c = node.value.last_dim().max(1);
            acc(grads, nodes, *a, |da| {
                for ((y, gr), d) in out.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c)) {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        d[j] += gr[j] - y[j].exp() * gs;
                    }
                }
            });
        }
        Op::SumAll { a } => {
            acc(grads, nodes, *a, |da| da.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::SumAxis { a, axis } => {
            let s = nodes[a.0].value.shape();
            let (m, n) = (s[0], s[1]);
            acc(grads, nodes, *a, |da| {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += if *axis == 0 { g[j] } else { g[i] };
                    }
                }
            });
        }
        Op::VarianceAxis { a, axis } => {
            let va = &nodes[a.0].value;
            let (m, n) = (va.shape()[0], va.shape()[1]);
            let x = va.data();
            let inner = if *axis == 0 { m } else { n };
            let outer = if *axis == 0 { n } else { m };
            let idx = |o: usize, i: usize| if *axis == 0 { i * n + o } else { o * n + i };
            acc(grads, nodes, *a, |da| {
                for o in 0..outer {
                    let mean = (0..inner).map(|i| x[idx(o, i)]).sum::<f64>() / inner as f64;
                    for i in 0..inner {
                        da[idx(o, i)] += g[o] * 2.0 * (x[idx(o, i)] - mean) / inner as f64;
                    }
                }
            });
        }
        Op::L2Normalize { a, norms } => {
            let c = node.value.last_dim().max(1);
            acc(grads, nodes, *a, |da| {
                for (r, norm) in norms.iter().enumerate() {
                    let y = &out[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[r * c + j] += (gr[j] - y[j] * dot) / norm;
                    }
                }
            });
        }
        Op::LayerNorm { a, inv_std } => {
            let c = node.value.last_dim().max(1);
            acc(grads, nodes, *a, |da| {
                for (r, is) in inv_std.iter().enumerate() {
                    let y = &out[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = y.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[r * c + j] += is * (gr[j] - mg - y[j] * mgy);
                    }
                }
            });
        }
        Op::Transpose { a } => {
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            acc(grads, nodes, *a, |da| {
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] += g[i * n + j];
                    }
                }
            });
        }
        Op::Reshape { a } => {
            acc(grads, nodes, *a, |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
        }
        Op::Dropout { a, mask } => {
            acc(grads, nodes, *a, |da| {
                for i in 0..g.len() {
                    da[i] += g[i] * mask[i];
                }
            });
        }
        Op::SliceRows { a, start } => {
            let n = node.value.shape()[1];
            acc(grads, nodes, *a, |da| {
                da[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, x)| *d += x)
            });
        }
        Op::SliceCols { a, start } => {
            let (m, len) = (node.value.shape()[0], node.value.shape()[1]);
            let n = nodes[a.0].value.shape()[1];
            acc(grads, nodes, *a, |da| {
                for i in 0..m {
                    for j in 0..len {
                        da[i * n + start + j] += g[i * len + j];
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let total_cols = node.value.shape()[1];
            let mut offset = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                let (pm, pn) = (s[0], s[1]);
                acc(grads, nodes, *p, |dp| {
                    if *axis == 0 {
                        let base = offset * total_cols;
                        dp.iter_mut()
                            .zip(&g[base..base + pm * pn])
                            .for_each(|(d, x)| *d += x);
                    } else {
                        for i in 0..pm {
                            for j in 0..pn {
                                dp[i * pn + j] += g[i * total_cols + offset + j];
                            }
                        }
                    }
                });
                offset += if *axis == 0 { pm } else { pn };
            }
        }
        Op::GatherRows { table, ids } => {
            let n = node.value.shape()[1];
            acc(grads, nodes, *table, |dt| {
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[i * n + j] += g[r * n + j];
                    }
                }
            });
        }
        Op::SelectPerRow { a, idx } => {
            let n = nodes[a.0].value.shape()[1];
            acc(grads, nodes, *a, |da| {
                for (i, &j) in idx.iter().enumerate() {
                    da[i * n + j] += g[i];
                }
            });
        }
    }
}
