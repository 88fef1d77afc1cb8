use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Reduces any value to a scalar with a non-uniform weighting so that
/// every output coordinate carries a distinct upstream gradient.
fn weigh(g: &Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.731).sin() + 0.3).collect())?;
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    for trial in 0..10u64 {
        let point: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| rand_t(s, 1000 * trial + i as u64))
            .collect();
        let err = grad_check(|g, xs| f(g, xs).and_then(|y| weigh(g, y)), &point, DEFAULT_EPS)
            .unwrap();
        assert!(err < 1e-6, "{name}: trial {trial} rel err {err:e}");
    }
}

#[test]
fn matmul_adjoints() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, x| g.matmul(x[0], x[1]));
    check("matmul ta", &[&[4, 3], &[4, 2]], |g, x| g.matmul_t(x[0], x[1], true, false));
    check("matmul tb", &[&[3, 4], &[2, 4]], |g, x| g.matmul_t(x[0], x[1], false, true));
    check("matmul ta tb", &[&[4, 3], &[2, 4]], |g, x| g.matmul_t(x[0], x[1], true, true));
}

#[test]
fn bmm_adjoints() {
    check("bmm", &[&[2, 3, 4], &[2, 4, 2]], |g, x| g.bmm_t(x[0], x[1], false, false));
    check("bmm tb", &[&[2, 3, 4], &[2, 5, 4]], |g, x| g.bmm_t(x[0], x[1], false, true));
    check("bmm ta", &[&[2, 4, 3], &[2, 4, 5]], |g, x| g.bmm_t(x[0], x[1], true, false));
}

#[test]
fn elementwise_adjoints() {
    check("add", &[&[3, 4], &[3, 4]], |g, x| g.add(x[0], x[1]));
    check("sub", &[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1]));
    check("mul", &[&[3, 4], &[3, 4]], |g, x| g.mul(x[0], x[1]));
    check("div", &[&[3, 4], &[3, 4]], |g, x| {
        let d = g.exp(x[1]);
        g.div(x[0], d)
    });
    check("scale", &[&[5]], |g, x| Ok(g.scale(x[0], -2.5)));
    check("add_scalar", &[&[5]], |g, x| Ok(g.add_scalar(x[0], 3.0)));
    check("exp", &[&[6]], |g, x| Ok(g.exp(x[0])));
    check("log", &[&[6]], |g, x| {
        let p = g.exp(x[0]);
        Ok(g.log(p))
    });
    check("tanh", &[&[6]], |g, x| Ok(g.tanh(x[0])));
    check("relu", &[&[6]], |g, x| Ok(g.relu(x[0])));
    check("clamp_min", &[&[6]], |g, x| Ok(g.clamp_min(x[0], 0.1)));
    check("sqrt", &[&[6]], |g, x| {
        let p = g.exp(x[0]);
        Ok(g.sqrt(p))
    });
}

#[test]
fn broadcast_adjoints() {
    for along in [Bcast::PerColumn, Bcast::PerRow] {
        let vlen = if along == Bcast::PerColumn { 4 } else { 3 };
        check("add_bcast", &[&[3, 4], &[vlen]], |g, x| g.add_bcast(x[0], x[1], along));
        check("sub_bcast", &[&[3, 4], &[vlen]], |g, x| g.sub_bcast(x[0], x[1], along));
        check("mul_bcast", &[&[3, 4], &[vlen]], |g, x| g.mul_bcast(x[0], x[1], along));
        check("div_bcast", &[&[3, 4], &[vlen]], |g, x| {
            let d = g.exp(x[1]);
            g.div_bcast(x[0], d, along)
        });
    }
}

#[test]
fn rowwise_adjoints() {
    check("softmax", &[&[3, 5]], |g, x| Ok(g.softmax(x[0])));
    check("log_softmax", &[&[3, 5]], |g, x| Ok(g.log_softmax(x[0])));
    check("l2_normalize", &[&[3, 5]], |g, x| Ok(g.l2_normalize(x[0])));
    check("layer_norm", &[&[3, 5]], |g, x| Ok(g.layer_norm(x[0], 1e-5)));
    check("softmax rank3", &[&[2, 3, 4]], |g, x| Ok(g.softmax(x[0])));
}

#[test]
fn reduction_adjoints() {
    check("sum", &[&[3, 4]], |g, x| Ok(g.sum(x[0])));
    check("mean", &[&[3, 4]], |g, x| Ok(g.mean(x[0])));
    for axis in 0..2 {
        check("sum_axis", &[&[3, 4]], |g, x| g.sum_axis(x[0], axis));
        check("mean_axis", &[&[3, 4]], |g, x| g.mean_axis(x[0], axis));
        check("variance_axis", &[&[3, 4]], |g, x| g.variance_axis(x[0], axis));
    }
}

#[test]
fn layout_adjoints() {
    check("transpose", &[&[3, 4]], |g, x| g.transpose(x[0]));
    check("reshape", &[&[3, 4]], |g, x| g.reshape(x[0], &[2, 6]));
    check("slice_rows", &[&[5, 3]], |g, x| g.slice_rows(x[0], 1, 3));
    check("slice_cols", &[&[3, 5]], |g, x| g.slice_cols(x[0], 2, 2));
    check("concat rows", &[&[2, 3], &[4, 3]], |g, x| g.concat(&[x[0], x[1]], 0));
    check("concat cols", &[&[3, 2], &[3, 4]], |g, x| g.concat(&[x[0], x[1]], 1));
    check("dropout", &[&[4, 5]], |g, x| g.dropout(x[0], 0.3, 11));
    check("gather_rows", &[&[5, 3]], |g, x| g.gather_rows(x[0], &[4, 0, 4, 2]));
    check("select_per_row", &[&[3, 4]], |g, x| g.select_per_row(x[0], &[3, 0, 1]));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let g = Graph::new();
    let x = g.constant(rand_t(&[7, 9], 3).map(|v| v * 20.0));
    let y = g.softmax(x);
    for row in g.value(y).rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn l2_normalize_three_four_five() {
    let g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
    let y = g.l2_normalize(x);
    let v = g.value(y);
    assert!((v.data()[0] - 0.6).abs() < 1e-15);
    assert!((v.data()[1] - 0.8).abs() < 1e-15);
}

#[test]
fn dropout_zero_rate_is_identity() {
    let g = Graph::new();
    let t = rand_t(&[4, 4], 9);
    let x = g.constant(t.clone());
    let y = g.dropout(x, 0.0, 1).unwrap();
    assert_eq!(*g.value(y), t);
}

#[test]
fn dropout_scales_survivors() {
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[1000], 1.0));
    let y = g.dropout(x, 0.25, 5).unwrap();
    for &v in g.value(y).data() {
        assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let g = Graph::new();
    let x = g.param(rand_t(&[3, 2], 1));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn backward_of_dot_is_other_operand() {
    let g = Graph::new();
    let xt = rand_t(&[1, 4], 1);
    let yt = rand_t(&[4, 1], 2);
    let x = g.param(xt);
    let y = g.constant(yt.clone());
    let d = g.matmul(x, y).unwrap();
    let s = g.sum(d);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), yt.data());
}

#[test]
fn backward_accumulates_until_zeroed() {
    let g = Graph::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    let s = g.sum(x);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    assert!(g.backward(x).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[2], 1.0));
    let w = g.param(Tensor::full(&[2], 2.0));
    let p = g.mul(x, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let g = Graph::new();
        let a = g.param(rand_t(&[5, 6], 4));
        let b = g.param(rand_t(&[6, 3], 5));
        let m = g.matmul(a, b).unwrap();
        let s = g.log_softmax(m);
        let l = g.sum(s);
        g.backward(l).unwrap();
        (g.grad(a).unwrap(), g.grad(b).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_mismatches_are_errors() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, c).is_err());
    assert!(g.gather_rows(a, &[2]).is_err());
}

#[test]
fn sum_of_squares_grad_check_is_tight() {
    let x = rand_t(&[10], 77);
    let err = grad_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        },
        &[x],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-7, "{err:e}");
}

#[test]
fn log_softmax_keeps_precision_for_a_dominant_logit() {
    let g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0 / 0.07, 0.0]).unwrap());
    let y = g.log_softmax(x);
    let expect = -(-1.0f64 / 0.07).exp().ln_1p();
    assert!((g.value(y).data()[0] - expect).abs() <= 1e-22);
}

#[test]
fn clamp_min_floors_values_and_blocks_gradient_below() {
    let g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap());
    let y = g.clamp_min(x, 1.0);
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}
