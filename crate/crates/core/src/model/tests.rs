use super::*;
use crate::numeric::{grad_check, Graph, Var, DEFAULT_EPS};
use crate::text::{TokenSequence, CLS, MASK, PAD, SEP};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
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
        d_prime: 10,
    }
}

fn seq(ids: &[u32], len: usize) -> TokenSequence {
    let mut s = TokenSequence {
        ids: ids.to_vec(),
        attention: vec![1; ids.len()],
    };
    s.ids.resize(len, PAD);
    s.attention.resize(len, 0);
    s
}

fn batch() -> Vec<TokenSequence> {
    vec![
        seq(&[CLS, 5, 6, SEP], 6),
        seq(&[CLS, 7, 8, 9, 10, SEP], 6),
        seq(&[CLS, 11, SEP], 6),
    ]
}

fn images(k: usize, seed: u64) -> Tensor {
    let mut rng = crate::seed::rng(seed);
    Tensor::randn(&[k, 8, 8], 1.0, &mut rng)
}

fn pooled(p: &ModelParams, b: &[TokenSequence], dropout: bool, seed: u64) -> Tensor {
    let g = Graph::new();
    let bound = p.bind(&g);
    let out = text_encode(&g, &bound, b, dropout, seed).unwrap();
    let v = g.value(out.pooled).clone();
    v
}

fn weighted_sum(g: &Graph, v: Var, salt: f64) -> crate::Result<Var> {
    let shape = g.shape(v);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.377 + salt).sin()).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

#[test]
fn encoding_without_dropout_is_deterministic() {
    let p = ModelParams::init(tiny(), 1).unwrap();
    assert_eq!(pooled(&p, &batch(), false, 1), pooled(&p, &batch(), false, 2));
}

#[test]
fn dropout_seeds_give_different_views() {
    let p = ModelParams::init(tiny(), 1).unwrap();
    assert_ne!(pooled(&p, &batch(), true, 1), pooled(&p, &batch(), true, 2));
    assert_eq!(pooled(&p, &batch(), true, 3), pooled(&p, &batch(), true, 3));
}

#[test]
fn padding_ids_do_not_reach_the_pooled_output() {
    let p = ModelParams::init(tiny(), 4).unwrap();
    let a = batch();
    let mut b = a.clone();
    b[0].ids[4] = 9;
    b[0].ids[5] = 11;
    b[2].ids[3] = 6;
    let g = Graph::new();
    let bound = p.bind(&g);
    let oa = text_encode(&g, &bound, &a, false, 0).unwrap();
    let ob = text_encode(&g, &bound, &b, false, 0).unwrap();
    assert_eq!(*g.value(oa.pooled), *g.value(ob.pooled));
    let (ta, tb) = (g.value(oa.per_token).clone(), g.value(ob.per_token).clone());
    // Non-padded positions of the first sequence are untouched as well.
    assert_eq!(&ta.data()[..4 * 8], &tb.data()[..4 * 8]);
}

#[test]
fn out_of_range_ids_are_rejected() {
    let p = ModelParams::init(tiny(), 1).unwrap();
    let g = Graph::new();
    let bound = p.bind(&g);
    let err = text_encode(&g, &bound, &[seq(&[CLS, 12, SEP], 6)], false, 0).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn overlong_sequences_are_rejected() {
    let p = ModelParams::init(tiny(), 1).unwrap();
    let g = Graph::new();
    let bound = p.bind(&g);
    assert!(text_encode(&g, &bound, &[seq(&[CLS, SEP], 7)], false, 0).is_err());
}

#[test]
fn text_output_shapes() {
    let p = ModelParams::init(tiny(), 1).unwrap();
    let g = Graph::new();
    let bound = p.bind(&g);
    let out = text_encode(&g, &bound, &batch(), false, 0).unwrap();
    assert_eq!(g.shape(out.pooled), vec![3, 8]);
    assert_eq!(g.shape(out.per_token), vec![3, 6, 8]);
    let logits = mlm_head(&g, &bound, out.per_token).unwrap();
    assert_eq!(g.shape(logits), vec![3, 6, 12]);
    let l = project(&g, &bound, Projector::L, out.pooled).unwrap();
    let d = project(&g, &bound, Projector::D, out.pooled).unwrap();
    assert_eq!(g.shape(l), vec![3, 5]);
    assert_eq!(g.shape(d), vec![3, 10]);
}

#[test]
fn zero_image_depends_only_on_biases() {
    let mut p = ModelParams::init(tiny(), 2).unwrap();
    let zeros = Tensor::zeros(&[2, 8, 8]);
    let run = |p: &ModelParams| {
        let g = Graph::new();
        let b = p.bind(&g);
        let v = vision_encode(&g, &b, &zeros).unwrap();
        let out = g.value(v).clone();
        out
    };
    let before = run(&p);
    assert_eq!(before.row(0), before.row(1));
    let w = p.get_mut("vision.patch.w").unwrap();
    *w = w.map(|x| 3.0 * x + 1.0);
    assert_eq!(run(&p), before);
}

#[test]
fn identical_images_give_identical_rows() {
    let p = ModelParams::init(tiny(), 2).unwrap();
    let one = images(1, 5);
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let two = Tensor::new(vec![2, 8, 8], data).unwrap();
    let g = Graph::new();
    let b = p.bind(&g);
    let v = vision_encode(&g, &b, &two).unwrap();
    let out = g.value(v);
    assert_eq!(out.shape(), &[2, 6]);
    assert_eq!(out.row(0), out.row(1));
}

#[test]
fn image_shape_mismatch_is_rejected() {
    let p = ModelParams::init(tiny(), 2).unwrap();
    let g = Graph::new();
    let b = p.bind(&g);
    assert!(vision_encode(&g, &b, &Tensor::zeros(&[2, 4, 4])).is_err());
    let x = g.constant(Tensor::zeros(&[2, 7]));
    assert!(project(&g, &b, Projector::V, x).is_err());
}

#[test]
fn unknown_projector_tag_is_rejected() {
    assert_eq!("d".parse::<Projector>().unwrap(), Projector::D);
    assert!("q".parse::<Projector>().is_err());
}

#[test]
fn alignment_heads_emit_unit_rows() {
    let p = ModelParams::init(tiny(), 3).unwrap();
    let g = Graph::new();
    let b = p.bind(&g);
    let v = vision_encode(&g, &b, &images(4, 1)).unwrap();
    let pv = project(&g, &b, Projector::V, v).unwrap();
    for row in g.value(pv).rows() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
    let t = text_encode(&g, &b, &batch(), false, 0).unwrap();
    let pd = project(&g, &b, Projector::D, t.pooled).unwrap();
    let norms: Vec<f64> = g
        .value(pd)
        .rows()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    assert!(norms.iter().all(|n| (n - 1.0).abs() > 1e-3), "{norms:?}");
}

/// Plain-loop MLP head, no normalization.
fn head_by_hand(p: &ModelParams, tag: &str, x: &[f64]) -> Vec<f64> {
    let layer = |x: &[f64], w: &Tensor, b: &Tensor, relu: bool| -> Vec<f64> {
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        (0..n_out)
            .map(|j| {
                let s = b.data()[j] + (0..n_in).map(|i| x[i] * w.get2(i, j)).sum::<f64>();
                if relu {
                    s.max(0.0)
                } else {
                    s
                }
            })
            .collect()
    };
    let get = |n: &str| p.get(&format!("proj.{tag}.{n}")).unwrap();
    let h = layer(x, get("w1"), get("b1"), true);
    layer(&h, get("w2"), get("b2"), false)
}

#[test]
fn dot_of_projected_rows_is_cosine() {
    let p = ModelParams::init(tiny(), 6).unwrap();
    let g = Graph::new();
    let b = p.bind(&g);
    let v = vision_encode(&g, &b, &images(3, 2)).unwrap();
    let t = text_encode(&g, &b, &batch(), false, 0).unwrap();
    let pv = project(&g, &b, Projector::V, v).unwrap();
    let pl = project(&g, &b, Projector::L, t.pooled).unwrap();
    let (vv, lv) = (g.value(v).clone(), g.value(t.pooled).clone());
    let (pv, pl) = (g.value(pv).clone(), g.value(pl).clone());
    for i in 0..3 {
        for j in 0..3 {
            let a = head_by_hand(&p, "v", vv.row(i));
            let c = head_by_hand(&p, "l", lv.row(j));
            let norm = |x: &[f64]| x.iter().map(|y| y * y).sum::<f64>().sqrt();
            let cos = a.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>() / (norm(&a) * norm(&c));
            let dot: f64 = pv.row(i).iter().zip(pl.row(j)).map(|(x, y)| x * y).sum();
            assert!((cos - dot).abs() < 1e-9);
        }
    }
}

#[test]
fn encoder_and_projector_paths_pass_grad_check() {
    let p = ModelParams::init(tiny(), 8).unwrap();
    let imgs = images(3, 9);
    let err = grad_check(
        |g, vars| {
            let b = Bound::from_vars(&p, vars.to_vec())?;
            let t = text_encode(g, &b, &batch(), true, 5)?;
            let v = vision_encode(g, &b, &imgs)?;
            let pv = project(g, &b, Projector::V, v)?;
            let pl = project(g, &b, Projector::L, t.pooled)?;
            let pd = project(g, &b, Projector::D, t.pooled)?;
            let logits = mlm_head(g, &b, t.per_token)?;
            let parts = [
                weighted_sum(g, pv, 0.1)?,
                weighted_sum(g, pl, 0.2)?,
                weighted_sum(g, pd, 0.3)?,
                weighted_sum(g, logits, 0.4)?,
            ];
            let mut total = parts[0];
            for &x in &parts[1..] {
                total = g.add(total, x)?;
            }
            Ok(total)
        },
        p.values(),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");
}

/// Masked-token cross entropy written directly on the graph.
fn masked_ce(g: &Graph, b: &Bound<'_>, input: &TokenSequence, pos: usize, label: usize) -> Var {
    let t = text_encode(g, b, std::slice::from_ref(input), false, 0).unwrap();
    let logits = mlm_head(g, b, t.per_token).unwrap();
    let flat = g.reshape(logits, &[6, 12]).unwrap();
    let row = g.slice_rows(flat, pos, 1).unwrap();
    let lp = g.log_softmax(row);
    let picked = g.select_per_row(lp, &[label]).unwrap();
    let s = g.sum(picked);
    g.scale(s, -1.0)
}

#[test]
fn masked_target_row_receives_gradient() {
    let p = ModelParams::init(tiny(), 1).unwrap();
    let g = Graph::new();
    let b = p.bind(&g);
    let input = seq(&[CLS, 5, MASK, SEP], 6);
    let loss = masked_ce(&g, &b, &input, 2, 10);
    g.backward(loss).unwrap();
    let grad = g.grad(b.var("text.word_emb")).unwrap();
    assert!(grad.row(10).iter().any(|&x| x != 0.0));
}

#[test]
fn freeze_depth_controls_trainable_set() {
    let mut p = ModelParams::init(tiny(), 1).unwrap();
    assert!(p.names().iter().all(|n| !p.is_frozen(n)));
    p.set_frozen_layers(1).unwrap();
    assert_eq!(p.freeze_mask(), vec![true, false]);
    assert!(p.is_frozen("text.layer0.attn.wqkv"));
    assert!(!p.is_frozen("text.layer1.attn.wqkv"));
    assert!(!p.is_frozen("text.word_emb"));
    p.set_frozen_layers(2).unwrap();
    assert!(p.is_frozen("text.word_emb"));
    assert!(p.is_frozen("text.layer1.ln2.g"));
    assert!(!p.is_frozen("mlm.bias"));
    assert!(!p.is_frozen("proj.l.w1"));
    assert!(p.set_frozen_layers(3).is_err());
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut p = ModelParams::init(tiny(), 1).unwrap();
    p.set_frozen_layers(1).unwrap();
    let g = Graph::new();
    let b = p.bind(&g);
    let input = seq(&[CLS, 5, MASK, SEP], 6);
    let loss = masked_ce(&g, &b, &input, 2, 7);
    g.backward(loss).unwrap();
    for (i, grad) in b.grads(&g).iter().enumerate() {
        let name = &p.names()[i];
        if p.is_frozen(name) {
            assert!(grad.is_none(), "{name}");
        }
    }
    assert!(g.grad(b.var("text.layer1.attn.wqkv")).is_some());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.muc");
    let p = ModelParams::init(tiny(), 1).unwrap();
    p.save(&path).unwrap();
    let q = ModelParams::load(tiny(), &path).unwrap();
    for (a, b) in p.values().iter().zip(q.values()) {
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(p, q);
}

#[test]
fn corrupt_or_truncated_checkpoints_fail() {
    let p = ModelParams::init(tiny(), 1).unwrap();
    let bytes = encode_tensors(p.iter()).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_tensors(&bad), Err(Error::Checkpoint(_))));
    assert!(decode_tensors(&bytes[..bytes.len() - 3]).is_err());
    assert!(decode_tensors(&bytes).is_ok());
}

#[test]
fn checkpoint_shape_and_name_mismatches_fail() {
    let p = ModelParams::init(tiny(), 1).unwrap();
    let mut named: Vec<(String, Tensor)> =
        p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let other = ModelConfig {
        d_prime: 12,
        ..tiny()
    };
    assert!(ModelParams::from_named(other, named.clone()).is_err());
    named.push(("stray".into(), Tensor::scalar(1.0)));
    assert!(ModelParams::from_named(tiny(), named.clone()).is_err());
    named.pop();
    named.pop();
    assert!(ModelParams::from_named(tiny(), named).is_err());
}

#[test]
fn vocabulary_growth_keeps_existing_rows() {
    let mut p = ModelParams::init(tiny(), 1).unwrap();
    let before = p.get("text.word_emb").unwrap().clone();
    p.extend_vocab(3, 7).unwrap();
    assert_eq!(p.config().vocab_size, 15);
    let after = p.get("text.word_emb").unwrap();
    assert_eq!(after.shape(), &[15, 8]);
    assert_eq!(&after.data()[..96], before.data());
    assert_eq!(p.get("mlm.bias").unwrap().len(), 15);
}

#[test]
fn decorrelation_width_must_exceed_text_width() {
    let c = ModelConfig {
        d_prime: 8,
        ..tiny()
    };
    assert!(ModelParams::init(c, 0).is_err());
}
