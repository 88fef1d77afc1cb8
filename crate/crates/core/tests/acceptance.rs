//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Lines go straight to stderr so they show up without `--nocapture`.
#![allow(clippy::needless_range_loop)]

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use medunic::eval::{classify_embedding, decide, seed_variance, PromptEmbeddings};
use medunic::losses::{
    batch_normalize, ctr_tf_loss, ctr_tt_loss, cvl_loss, feature_normalize, mlm_loss, ssv_loss,
    DEFAULT_LAMBDA, DEFAULT_SIGMA,
};
use medunic::model::{mlm_head, text_encode, ModelConfig, ModelParams};
use medunic::pipeline::{
    apply_ablation, build_vocab, evaluate, generate, grad_check_suite, metrics_stream, prepare,
    run_mlm, run_seeds, run_vlp, Evaluation, RunConfig, GRAD_TOL,
};
use medunic::synth::{make_dataset, Language, Lexicon, SynthConfig};
use medunic::text::{mask_tokens, tokenize, MaskSplit, TokenSequence, Vocabulary};
use medunic::train::{load_state, save_state, train_mlm, train_vlp, TrainConfig, TrainState, VlpExample};
use medunic::{Graph, Tensor};
use rand::Rng;

fn report(n: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {status} | {detail}");
}

fn randn(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut medunic::seed::rng(seed))
}

fn unit_rows(t: &Tensor) -> Tensor {
    let d = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

fn eval2(f: impl Fn(&Graph, medunic::Var, medunic::Var) -> medunic::Result<medunic::Var>, a: &Tensor, b: &Tensor) -> f64 {
    let g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = f(&g, va, vb).unwrap();
    g.scalar(out)
}

fn tf(a: &Tensor, b: &Tensor) -> f64 {
    eval2(|g, x, y| ctr_tf_loss(g, x, y, DEFAULT_LAMBDA).map(|r| r.0), a, b)
}

fn tt(a: &Tensor, b: &Tensor) -> f64 {
    eval2(|g, x, y| ctr_tt_loss(g, x, y, DEFAULT_LAMBDA).map(|r| r.0), a, b)
}

fn cvl(a: &Tensor, b: &Tensor) -> f64 {
    eval2(|g, x, y| cvl_loss(g, x, y, DEFAULT_SIGMA), a, b)
}

fn ssv(a: &Tensor, b: &Tensor) -> f64 {
    eval2(|g, x, y| ssv_loss(g, x, y, DEFAULT_SIGMA), a, b)
}

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    t.rows().map(|r| r.to_vec()).collect()
}

/// Population statistics of a slice.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let (m, sd) = mean_sd(xs);
    let denom = ((xs.len() as f64).sqrt() * sd).max(1e-8);
    xs.iter().map(|x| (x - m) / denom).collect()
}

fn redundancy(c: &Mat, lambda: f64) -> f64 {
    let n = c.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                total += (1.0 - c[i][j]) * (1.0 - c[i][j]);
            } else {
                total += lambda * c[i][j] * c[i][j];
            }
        }
    }
    total / n as f64
}

/// Explicit-loop feature-axis term.
fn brute_tf(a: &Mat, b: &Mat, lambda: f64) -> f64 {
    let (k, d) = (a.len(), a[0].len());
    let col = |m: &Mat, j: usize| standardize(&(0..k).map(|i| m[i][j]).collect::<Vec<_>>());
    let ca: Vec<Vec<f64>> = (0..d).map(|j| col(a, j)).collect();
    let cb: Vec<Vec<f64>> = (0..d).map(|j| col(b, j)).collect();
    let mut c = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            for r in 0..k {
                c[i][j] += ca[i][r] * cb[j][r];
            }
        }
    }
    redundancy(&c, lambda)
}

/// Explicit-loop sample-axis term.
fn brute_tt(a: &Mat, b: &Mat, lambda: f64) -> f64 {
    let (k, d) = (a.len(), a[0].len());
    let ra: Vec<Vec<f64>> = a.iter().map(|r| standardize(r)).collect();
    let rb: Vec<Vec<f64>> = b.iter().map(|r| standardize(r)).collect();
    let mut c = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            for f in 0..d {
                c[i][j] += ra[i][f] * rb[j][f];
            }
        }
    }
    redundancy(&c, lambda)
}

#[test]
fn criterion_1_gradient_correctness() {
    let t = Instant::now();
    let rows = grad_check_suite(2024).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    let covered = ["cvl", "ssv", "ctr_tf", "ctr_tt", "mlm", "text_encoder", "vision_encoder", "vlp_objective"]
        .iter()
        .all(|n| names.contains(n));
    let pass = covered && rows.iter().all(|r| r.pass && r.points == 10) && worst < GRAD_TOL && secs < 30.0;
    report(1, pass, &format!("{} rows x 10 points, worst rel err {worst:.2e}, {secs:.1}s", rows.len()));
    assert!(pass, "{rows:?} in {secs}s");
}

#[test]
fn criterion_2_loss_oracles() {
    let mut rng = medunic::seed::rng(7);
    let mut worst: f64 = 0.0;
    for i in 0..25u64 {
        let k = rng.random_range(2..=6);
        let d = rng.random_range(2..=8);
        let (a, b) = (randn(k, d, 100 + 2 * i), randn(k, d, 101 + 2 * i));
        let (ma, mb) = (to_mat(&a), to_mat(&b));
        worst = worst.max((tf(&a, &b) - brute_tf(&ma, &mb, DEFAULT_LAMBDA)).abs());
        worst = worst.max((tt(&a, &b) - brute_tt(&ma, &mb, DEFAULT_LAMBDA)).abs());
    }
    let z = Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.0]]).unwrap();
    let hand = tf(&z, &z);
    let pass = worst < 1e-12 && (hand - 5.1e-3).abs() < 1e-15 && DEFAULT_LAMBDA == 5.1e-3;
    report(2, pass, &format!("25 instances, worst |diff| {worst:.1e}; hand case {hand:.17} vs lambda 5.1e-3"));
    assert!(pass);
}

#[test]
fn criterion_3_normalization_contracts() {
    let mut rng = medunic::seed::rng(8);
    let (mut worst_mean, mut worst_norm): (f64, f64) = (0.0, 0.0);
    for i in 0..20u64 {
        let k = rng.random_range(2..=16);
        let d = rng.random_range(2..=16);
        let shift: f64 = rng.random_range(-5.0..5.0);
        let z = randn(k, d, 300 + i).map(|x| 3.0 * x + shift);
        let g = Graph::new();
        let v = g.constant(z);
        let cols = g.value(batch_normalize(&g, v).unwrap()).clone();
        let rows = g.value(feature_normalize(&g, v).unwrap()).clone();
        for j in 0..d {
            let c: Vec<f64> = (0..k).map(|r| cols.get2(r, j)).collect();
            worst_mean = worst_mean.max((c.iter().sum::<f64>() / k as f64).abs());
            worst_norm = worst_norm.max((c.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
        }
        for r in rows.rows() {
            worst_mean = worst_mean.max((r.iter().sum::<f64>() / d as f64).abs());
            worst_norm = worst_norm.max((r.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
        }
    }
    let pass = worst_mean < 1e-9 && worst_norm < 1e-6;
    report(3, pass, &format!("20 inputs, worst |mean| {worst_mean:.1e}, worst |norm-1| {worst_norm:.1e}"));
    assert!(pass);
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn mlm_value(logits: &Tensor, labels: &[Vec<i64>]) -> f64 {
    let g = Graph::new();
    let l = g.constant(logits.clone());
    let out = mlm_loss(&g, l, labels).unwrap();
    g.scalar(out)
}

#[test]
fn criterion_4_invariance_suite() {
    use rand::seq::SliceRandom;
    let mut rng = medunic::seed::rng(9);
    let (mut perm_err, mut scale_err, mut shift_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut decision_flips = 0;
    for i in 0..20u64 {
        let k = rng.random_range(2..=6);
        let d = rng.random_range(2..=8);
        let (a, b) = (randn(k, d, 500 + 2 * i), randn(k, d, 501 + 2 * i));
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let (pa, pb) = (permute_rows(&a, &perm), permute_rows(&b, &perm));
        let (ua, ub) = (unit_rows(&a), unit_rows(&b));
        let (upa, upb) = (unit_rows(&pa), unit_rows(&pb));
        for (x, y) in [
            (cvl(&ua, &ub), cvl(&upa, &upb)),
            (ssv(&ua, &ub), ssv(&upa, &upb)),
            (tf(&a, &b), tf(&pa, &pb)),
            (tt(&a, &b), tt(&pa, &pb)),
        ] {
            perm_err = perm_err.max((x - y).abs());
        }
        let (t, v) = (3, 5);
        let logits = Tensor::randn(&[k, t, v], 2.0, &mut rng);
        let labels: Vec<Vec<i64>> = (0..k)
            .map(|_| (0..t).map(|_| if rng.random_bool(0.5) { rng.random_range(0..v as i64) } else { -1 }).collect())
            .collect();
        let mut pl = Vec::new();
        for &p in &perm {
            pl.extend_from_slice(&logits.data()[p * t * v..(p + 1) * t * v]);
        }
        let plogits = Tensor::new(vec![k, t, v], pl).unwrap();
        let plabels: Vec<Vec<i64>> = perm.iter().map(|&p| labels[p].clone()).collect();
        perm_err = perm_err.max((mlm_value(&logits, &labels) - mlm_value(&plogits, &plabels)).abs());

        let col_scale = |m: &Tensor, s: &[f64]| {
            let mut out = m.clone();
            for (n, x) in out.data_mut().iter_mut().enumerate() {
                *x *= s[n % d];
            }
            out
        };
        let sa: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..10.0)).collect();
        let sb: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..10.0)).collect();
        scale_err = scale_err.max((tf(&a, &b) - tf(&col_scale(&a, &sa), &col_scale(&b, &sb))).abs());

        let row_affine = |m: &Tensor, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut out = m.clone();
            for row in out.data_mut().chunks_mut(d) {
                let (c, s): (f64, f64) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
                row.iter_mut().for_each(|x| *x = c * *x + s);
            }
            out
        };
        let (ra, rb) = (row_affine(&a, &mut rng), row_affine(&b, &mut rng));
        shift_err = shift_err.max((tt(&a, &b) - tt(&ra, &rb)).abs());

        let image = unit_rows(&randn(1, 8, 700 + i));
        let prompts = PromptEmbeddings {
            language: Language::En,
            positive: unit_rows(&randn(6, 8, 800 + i)),
            negative: unit_rows(&randn(6, 8, 900 + i)),
        };
        let z = classify_embedding(image.row(0), &prompts);
        let fs: [fn(f64) -> f64; 4] = [f64::exp, |x| x * x * x, f64::atan, |x| 2.0 * x + 5.0];
        for f in fs {
            for (j, &dec) in z.positive.iter().enumerate() {
                if decide(f(z.sim_pos[j]), f(z.sim_neg[j])) != dec {
                    decision_flips += 1;
                }
            }
        }
    }
    let pass = perm_err < 1e-9 && scale_err < 1e-9 && shift_err < 1e-9 && decision_flips == 0;
    report(
        4,
        pass,
        &format!(
            "20 instances each: permutation {perm_err:.1e}, tf column scale {scale_err:.1e}, tt row shift/scale {shift_err:.1e}, zero-shot flips {decision_flips}"
        ),
    );
    assert!(pass);
}

/// Per-seed results of the CTR / no-CTR comparison.
struct SeedRun {
    seed: u64,
    ctr: Evaluation,
    no_ctr: Evaluation,
    secs: f64,
}

const EXPERIMENT_SEEDS: [u64; 3] = [1, 2, 3];

fn experiment() -> &'static Vec<SeedRun> {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        EXPERIMENT_SEEDS
            .iter()
            .map(|&seed| {
                let t = Instant::now();
                let cfg = RunConfig { seed, ..RunConfig::default() };
                assert_eq!((cfg.data.n_en, cfg.data.n_sp, cfg.data.findings), (2000, 2000, 8));
                let splits = prepare(&cfg, generate(&cfg).unwrap()).unwrap();
                let vocab = build_vocab(&splits.train, cfg.data.sp_vocab).unwrap();
                let mlm = run_mlm(&cfg, &splits, &vocab).unwrap();
                let with = run_vlp(&cfg, Some(&mlm), &splits, &vocab).unwrap();
                let mut ablated = cfg.clone();
                apply_ablation(&mut ablated, "ctr").unwrap();
                let without = run_vlp(&ablated, Some(&mlm), &splits, &vocab).unwrap();
                SeedRun {
                    seed,
                    ctr: evaluate(&cfg, &with, &splits.test).unwrap(),
                    no_ctr: evaluate(&ablated, &without, &splits.test).unwrap(),
                    secs: t.elapsed().as_secs_f64(),
                }
            })
            .collect()
    })
}

fn recall5(e: &Evaluation) -> f64 {
    e.retrieval.recall["en_to_sp@5"]
}

#[test]
fn criterion_5_desk_bias_reduction() {
    let runs = experiment();
    let (mut a, mut b, mut c) = (0, 0, 0);
    let mut lines = Vec::new();
    for r in runs {
        let (tp1, tp0) = (r.ctr.diagnosis.report.text.probe_accuracy, r.no_ctr.diagnosis.report.text.probe_accuracy);
        let (ip1, ip0) = (r.ctr.diagnosis.report.image.probe_accuracy, r.no_ctr.diagnosis.report.image.probe_accuracy);
        let (r1, r0) = (recall5(&r.ctr), recall5(&r.no_ctr));
        a += usize::from(tp0 - tp1 >= 0.15);
        b += usize::from(r1 > r0);
        c += usize::from(ip1 < ip0);
        lines.push(format!(
            "seed {}: text probe {tp1:.3} vs {tp0:.3}, recall@5 {r1:.3} vs {r0:.3}, image probe {ip1:.3} vs {ip0:.3} ({:.0}s)",
            r.seed, r.secs
        ));
    }
    let pass = a >= 2 && b >= 2 && c >= 2;
    report(
        5,
        pass,
        &format!(
            "with vs without CTR; seeds passing (a) {a}/3, (b) {b}/3, (c) {c}/3; {}",
            lines.join("; ")
        ),
    );
    assert!(pass, "{}", lines.join("\n"));
}

#[test]
fn criterion_6_zero_shot_language_parity() {
    let e = &experiment()[0].ctr;
    let f1 = |lang: &str| e.zero_shot.iter().find(|z| z.language == lang).unwrap().macro_f1.unwrap();
    let (en, sp) = (f1("en"), f1("sp"));
    let pass = (en - sp).abs() <= 0.10 && en > e.random_f1 && sp > e.random_f1;
    report(
        6,
        pass,
        &format!("seed-1 CTR model: macro-F1 en {en:.3}, sp {sp:.3}, random baseline {:.3}", e.random_f1),
    );
    assert!(pass);
}

fn toy_corpus() -> (Vec<TokenSequence>, usize) {
    let cfg = SynthConfig {
        n_en: 25,
        n_sp: 25,
        seed: 5,
        image_size: 16,
        ..SynthConfig::default()
    };
    let data = make_dataset(&cfg, &Lexicon::builtin()).unwrap();
    let reports: Vec<&str> = data.iter().map(|s| s.report.as_str()).collect();
    let vocab = Vocabulary::from_corpus(&reports);
    (data.iter().map(|s| tokenize(&s.report, &vocab, 34)).collect(), vocab.len())
}

fn fixed_mask_loss(params: &ModelParams, corpus: &[TokenSequence]) -> f64 {
    let masked = mask_tokens(corpus, 0.15, 77, params.config().vocab_size, MaskSplit::default()).unwrap();
    let g = Graph::new();
    let b = params.bind(&g);
    let out = text_encode(&g, &b, &masked.inputs, false, 0).unwrap();
    let logits = mlm_head(&g, &b, out.per_token).unwrap();
    let l = mlm_loss(&g, logits, &masked.labels).unwrap();
    g.scalar(l)
}

#[test]
fn criterion_7_mlm_sanity() {
    let (corpus, v) = toy_corpus();
    assert_eq!(corpus.len(), 50);
    let mc = ModelConfig {
        vocab_size: v,
        max_len: 34,
        d_l: 64,
        heads: 2,
        layers: 2,
        ffn: 128,
        dropout: 0.1,
        image_size: 16,
        patch: 4,
        patch_dim: 4,
        d_v: 32,
        d: 32,
        d_prime: 128,
    };
    let params = ModelParams::init(mc, 1).unwrap();
    let mut c = TrainConfig::mlm();
    c.batch_size = 50;
    c.epochs = 200;
    c.lr_peak = 3e-3;
    c.weight_decay = 0.0;
    c.seed = 2;
    let initial = fixed_mask_loss(&params, &corpus);
    let out = train_mlm(&corpus, TrainState::new(params, c.adam), &c).unwrap();
    let last = fixed_mask_loss(&out.state.params, &corpus);
    let steps = out.records.len();

    let labels = vec![vec![0, -1, 3], vec![-1, v as i64 - 1, 2]];
    let uniform = mlm_value(&Tensor::zeros(&[2, 3, v]), &labels);
    let analytic = (v as f64).ln();
    let pass = steps <= 200 && last < 0.5 * initial && (uniform - analytic).abs() < 1e-12;
    report(
        7,
        pass,
        &format!(
            "mlm loss {initial:.3} -> {last:.3} in {steps} steps (ratio {:.3}); uniform logits {uniform:.12} vs ln|T| {analytic:.12}",
            last / initial
        ),
    );
    assert!(pass);
}

fn small_config() -> RunConfig {
    RunConfig::parse(
        "data.n_en = 120\ndata.n_sp = 120\ndata.image_size = 16\n\
         model.d_l = 16\nmodel.ffn = 32\nmodel.layers = 2\nmodel.patch = 4\nmodel.patch_dim = 4\n\
         model.d_v = 16\nmodel.d = 16\nmodel.d_prime = 32\n\
         mlm.batch_size = 32\nmlm.epochs = 2\nvlp.batch_size = 32\nvlp.epochs = 2\nvlp.n_frozen = 1\n\
         eval.probe_steps = 100\n",
    )
    .unwrap()
}

fn bits(p: &ModelParams) -> Vec<u64> {
    p.values().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let cfg = small_config();
    let once = || {
        let splits = prepare(&cfg, generate(&cfg).unwrap()).unwrap();
        let vocab = build_vocab(&splits.train, None).unwrap();
        let mlm = run_mlm(&cfg, &splits, &vocab).unwrap();
        let vlp = run_vlp(&cfg, Some(&mlm), &splits, &vocab).unwrap();
        let e = evaluate(&cfg, &vlp, &splits.test).unwrap();
        (
            metrics_stream(&mlm.records).unwrap() + &metrics_stream(&vlp.records).unwrap(),
            medunic::pipeline::json::to_pretty(&e).unwrap(),
            mlm,
            vlp,
        )
    };
    let (s1, e1, mlm, vlp) = once();
    let (s2, e2, _, _) = once();
    let streams_equal = s1 == s2 && e1 == e2;

    // Frozen layers keep their exact bits through the alignment stage.
    let frozen: Vec<&str> = vlp.params.names().iter().map(String::as_str).filter(|n| vlp.params.is_frozen(n)).collect();
    let frozen_same = !frozen.is_empty()
        && frozen.iter().all(|n| {
            let (a, b) = (mlm.params.get(n).unwrap(), vlp.params.get(n).unwrap());
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let trained_changed = vlp.params.names().iter().any(|n| !vlp.params.is_frozen(n) && mlm.params.get(n) != vlp.params.get(n));

    // Halt, save, load and continue versus one uninterrupted run.
    let splits = prepare(&cfg, generate(&cfg).unwrap()).unwrap();
    let vocab = build_vocab(&splits.train, None).unwrap();
    let train: Vec<VlpExample> = splits.train.iter().map(|s| VlpExample::from_sample(s, &vocab, 34)).collect();
    let val: Vec<VlpExample> = splits.val.iter().map(|s| VlpExample::from_sample(s, &vocab, 34)).collect();
    let mut tc = cfg.vlp_train();
    tc.eval_every = 2;
    tc.halt_at = Some(9);
    let full = train_vlp(&train, &val, TrainState::new(mlm.params.clone(), tc.adam), &tc).unwrap();
    let mut first = tc.clone();
    first.halt_at = Some(4);
    let part = train_vlp(&train, &val, TrainState::new(mlm.params.clone(), tc.adam), &first).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.ckpt");
    save_state(&part.state, &path).unwrap();
    let loaded = load_state(part.state.params.config().clone(), tc.adam, &path).unwrap();
    let rest = train_vlp(&train, &val, loaded, &tc).unwrap();
    let resumed = bits(&rest.state.params) == bits(&full.state.params)
        && rest.records[..] == full.records[4..]
        && rest.state.step == 9;

    let pass = streams_equal && frozen_same && trained_changed && resumed;
    report(
        8,
        pass,
        &format!(
            "byte-identical streams {streams_equal}; {} frozen tensors unchanged {frozen_same}; resume at step 4 of 9 bit-identical {resumed}",
            frozen.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_error_bar_protocol() {
    let hand = seed_variance(&[1, 2, 3], |s| Ok([("m".to_string(), s as f64)].into())).unwrap();
    let hand_ok = (hand["m"].mean - 2.0).abs() < 1e-12 && (hand["m"].std - 0.816496580927726).abs() < 1e-12;

    let cfg = small_config();
    let rep = run_seeds(&cfg, &[1, 2, 3]).unwrap();
    let mut ok = hand_ok && rep.runs.len() == 3;
    let mut shown = Vec::new();
    for key in ["text_probe_accuracy", "image_probe_accuracy", "recall@5"] {
        let Some(s) = rep.summary.get(key) else {
            ok = false;
            continue;
        };
        let xs: Vec<f64> = rep.runs.iter().map(|r| r[key]).collect();
        let (m, sd) = mean_sd(&xs);
        ok &= (s.mean - m).abs() < 1e-12 && (s.std - sd).abs() < 1e-12 && s.n == 3;
        shown.push(format!("{key} {:.3} ± {:.3}", s.mean, s.std));
    }
    ok &= rep.table().contains('±');
    report(9, ok, &format!("hand case 2 ± 0.8165 {hand_ok}; {}", shown.join(", ")));
    assert!(ok);
}
