use log::{debug, info, warn};
use rand::seq::SliceRandom;

use super::augment::augment_image;
use super::optim::opt_step;
use super::state::TrainState;
use super::{lr_at, Batching, Stage, StepRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::{
    ctr_tf_loss, ctr_tt_loss, cvl_loss, mlm_loss, ssv_loss, total_loss, LossBreakdown, LossTerms,
};
use crate::model::{
    mlm_head, project, stack_images, text_encode, to_f32_precision, vision_encode, Bound,
    ModelParams, Projector,
};
use crate::numeric::{Graph, Tensor};
use crate::seed;
use crate::synth::{ImageGrid, Language, Sample};
use crate::text::{mask_tokens, tokenize, MaskSplit, TokenSequence, Vocabulary};

type Grads = Vec<Option<Tensor>>;

/// A tokenized image/report pair.
#[derive(Clone, Debug, PartialEq)]
pub struct VlpExample {
    pub id: u64,
    pub language: Language,
    pub tokens: TokenSequence,
    pub image: ImageGrid,
}

impl VlpExample {
    pub fn from_sample(sample: &Sample, vocab: &Vocabulary, max_len: usize) -> Self {
        Self {
            id: sample.id,
            language: sample.language,
            tokens: tokenize(&sample.report, vocab, max_len),
            image: sample.image.clone(),
        }
    }
}

/// Batch index lists for one epoch. Only full batches are used, unless the
/// data cannot fill a single one, in which case everything forms one batch.
pub fn epoch_batches(
    languages: &[Language],
    batch_size: usize,
    batching: Batching,
    rng_seed: u64,
) -> Vec<Vec<usize>> {
    let n = languages.len();
    if n == 0 || batch_size == 0 {
        return Vec::new();
    }
    let mut rng = seed::rng(rng_seed);
    let chunk = |order: &[usize]| -> Vec<Vec<usize>> {
        order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
    };
    let batches = match batching {
        Batching::Mixed => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            chunk(&order)
        }
        Batching::Alternating => {
            let mut per_lang: Vec<Vec<Vec<usize>>> = Language::ALL
                .iter()
                .map(|&lang| {
                    let mut order: Vec<usize> =
                        (0..n).filter(|&i| languages[i] == lang).collect();
                    order.shuffle(&mut rng);
                    chunk(&order)
                })
                .collect();
            let longest = per_lang.iter().map(Vec::len).max().unwrap_or(0);
            let mut out = Vec::new();
            for i in 0..longest {
                for lang in per_lang.iter_mut() {
                    if i < lang.len() {
                        out.push(std::mem::take(&mut lang[i]));
                    }
                }
            }
            out
        }
    };
    if batches.is_empty() {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        vec![all]
    } else {
        batches
    }
}

/// Final state and the metrics stream of the steps run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
}

pub(super) fn check_frozen(params: &ModelParams, grads: &Grads) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if params.is_frozen_at(i) && g.as_ref().is_some_and(|g| g.data().iter().any(|&x| x != 0.0)) {
            return Err(Error::Contract(format!(
                "gradient reached frozen parameter {}",
                params.names()[i]
            )));
        }
    }
    Ok(())
}

fn add_scaled(acc: &mut Grads, grads: Grads, scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match a {
            Some(a) => a
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &g)| *a += scale * g),
            None => *a = Some(g.map(|x| scale * x)),
        }
    }
}

fn scale_breakdown(b: &mut LossBreakdown, s: f64) {
    for x in [&mut b.cvl, &mut b.ssv, &mut b.tf, &mut b.tt, &mut b.ctr, &mut b.mlm, &mut b.total] {
        *x *= s;
    }
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.cvl += b.cvl;
    acc.ssv += b.ssv;
    acc.tf += b.tf;
    acc.tt += b.tt;
    acc.ctr += b.ctr;
    acc.mlm += b.mlm;
    acc.total += b.total;
    (acc.sigma1, acc.sigma2, acc.lambda) = (b.sigma1, b.sigma2, b.lambda);
}

/// Shared step loop: batch order, schedule, accumulation, update, early
/// stopping. All randomness of a micro-batch comes from its `draw` seed.
fn drive<O, V>(
    mut state: TrainState,
    config: &TrainConfig,
    languages: &[Language],
    mut objective: O,
    mut validate: V,
) -> Result<TrainOutcome>
where
    O: FnMut(&ModelParams, &[usize], u64) -> Result<(LossBreakdown, Grads)>,
    V: FnMut(&ModelParams) -> Result<Option<f64>>,
{
    let order_seed = |epoch: usize| seed::derive(config.seed, "order", epoch as u64);
    let batch_count =
        epoch_batches(languages, config.batch_size, config.batching, order_seed(0)).len();
    let accum = config.grad_accum;
    let per_epoch = (batch_count / accum).max(1);
    let total = config.total_steps(batch_count);
    let eval_every = if config.eval_every == 0 {
        per_epoch
    } else {
        config.eval_every
    };
    info!(
        "{:?} stage: {} examples, {batch_count} batches per epoch, {total} steps",
        config.stage,
        languages.len()
    );

    let mut records = Vec::new();
    let mut cached: Option<(usize, Vec<Vec<usize>>)> = None;
    while state.step < total && !state.stopped {
        if config.halt_at == Some(state.step) {
            break;
        }
        let step = state.step;
        let epoch = step / per_epoch;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let b = epoch_batches(languages, config.batch_size, config.batching, order_seed(epoch));
            cached = Some((epoch, b));
        }
        let batches = &cached.as_ref().unwrap().1;
        let lr = lr_at(step, total, config);

        let mut breakdown = LossBreakdown::default();
        let mut grads: Grads = vec![None; state.params.len()];
        let scale = 1.0 / accum as f64;
        for micro in 0..accum {
            let slot = ((step % per_epoch) * accum + micro) % batches.len();
            let draw = seed::derive(config.seed, "draw", (step * accum + micro) as u64);
            let (b, g) = objective(&state.params, &batches[slot], draw)?;
            check_frozen(&state.params, &g)?;
            add_breakdown(&mut breakdown, &b);
            add_scaled(&mut grads, g, scale);
        }
        scale_breakdown(&mut breakdown, scale);

        let mut record = StepRecord::new(step, lr, &breakdown, &config.flags);
        let applied = if breakdown.is_finite() {
            opt_step(&mut state.params, &grads, &mut state.opt, lr, config.weight_decay)?
        } else {
            state.opt.skipped += 1;
            warn!("non-finite loss at step {step}; skipping update");
            false
        };
        record.skipped = !applied;
        if state.opt.skipped > config.max_skips {
            return Err(Error::Numeric(format!(
                "{} updates skipped for non-finite values (limit {})",
                state.opt.skipped, config.max_skips
            )));
        }
        state.step += 1;
        debug!("step {step}: lr {lr:.3e} total {:.6}", breakdown.total);

        if state.step.is_multiple_of(eval_every) || state.step == total {
            if let Some(val) = validate(&state.params)? {
                record.val_total = Some(val);
                let val = to_f32_precision(val);
                if val < state.best_val {
                    state.best_val = val;
                    state.bad_evals = 0;
                } else {
                    state.bad_evals += 1;
                    if config.patience > 0 && state.bad_evals >= config.patience {
                        info!("early stop after step {step}: no improvement in {} evaluations", state.bad_evals);
                        state.stopped = true;
                    }
                }
            }
        }
        records.push(record);
    }
    Ok(TrainOutcome { state, records })
}

/// Masked-token training of the report encoder on a mixed-language corpus.
pub fn train_mlm(
    corpus: &[TokenSequence],
    mut state: TrainState,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Mlm {
        return Err(Error::Config("train_mlm needs an mlm-stage config".into()));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("mlm corpus has no reports".into()));
    }
    state.params.set_frozen_layers(config.n_frozen)?;
    let vocab = state.params.config().vocab_size;
    // The batch order does not depend on language in this stage.
    let languages = vec![Language::En; corpus.len()];
    let objective = |params: &ModelParams, idx: &[usize], draw: u64| {
        let batch: Vec<TokenSequence> = idx.iter().map(|&i| corpus[i].clone()).collect();
        let masked = mask_tokens(
            &batch,
            config.mask_prob,
            seed::derive(draw, "mask", 0),
            vocab,
            MaskSplit::default(),
        )?;
        let g = Graph::new();
        let b = params.bind(&g);
        let out = text_encode(&g, &b, &masked.inputs, true, seed::derive(draw, "dropout", 0))?;
        let logits = mlm_head(&g, &b, out.per_token)?;
        let terms = LossTerms {
            mlm: Some(mlm_loss(&g, logits, &masked.labels)?),
            ..Default::default()
        };
        let total = total_loss(&g, &terms, &config.flags)?;
        g.backward(total)?;
        let breakdown = collect(&g, &terms, config);
        Ok((breakdown, b.grads(&g)))
    };
    drive(state, config, &languages, objective, |_| Ok(None))
}

fn collect(g: &Graph, terms: &LossTerms, config: &TrainConfig) -> LossBreakdown {
    LossBreakdown::collect(g, terms, &config.flags, config.sigma1, config.sigma2, config.lambda)
}

/// Enabled alignment objectives for one batch. Two augmented image views
/// and two dropout text views are drawn from `draw`; the first of each feeds
/// the image-report term, so its value does not depend on the other flags.
pub fn vlp_terms(
    g: &Graph,
    b: &Bound<'_>,
    batch: &[&VlpExample],
    config: &TrainConfig,
    draw: u64,
) -> Result<LossTerms> {
    let flags = &config.flags;
    let view = |tag: &str| -> Result<Tensor> {
        let imgs: Vec<ImageGrid> = batch
            .iter()
            .enumerate()
            .map(|(i, e)| augment_image(&e.image, &config.augment, seed::derive(draw, tag, i as u64)))
            .collect();
        stack_images(&imgs.iter().collect::<Vec<_>>())
    };
    let tokens: Vec<TokenSequence> = batch.iter().map(|e| e.tokens.clone()).collect();
    let mut terms = LossTerms::default();

    let v1 = if flags.cvl || flags.ssv {
        let h = vision_encode(g, b, &view("view1")?)?;
        Some(project(g, b, Projector::V, h)?)
    } else {
        None
    };
    let t1 = if flags.cvl || flags.ctr() {
        Some(text_encode(g, b, &tokens, true, seed::derive(draw, "text", 1))?)
    } else {
        None
    };
    if flags.cvl {
        let l = project(g, b, Projector::L, t1.unwrap().pooled)?;
        terms.cvl = Some(cvl_loss(g, v1.unwrap(), l, config.sigma1)?);
    }
    if flags.ssv {
        let h = vision_encode(g, b, &view("view2")?)?;
        let v2 = project(g, b, Projector::V, h)?;
        terms.ssv = Some(ssv_loss(g, v1.unwrap(), v2, config.sigma2)?);
    }
    if flags.ctr() {
        let t2 = text_encode(g, b, &tokens, true, seed::derive(draw, "text", 2))?;
        let za = project(g, b, Projector::D, t1.unwrap().pooled)?;
        let zb = project(g, b, Projector::D, t2.pooled)?;
        if flags.tf {
            terms.tf = Some(ctr_tf_loss(g, za, zb, config.lambda)?.0);
        }
        if flags.tt {
            terms.tt = Some(ctr_tt_loss(g, za, zb, config.lambda)?.0);
        }
    }
    Ok(terms)
}

/// Mean validation total over in-order batches, with fixed view seeds so
/// evaluations are comparable.
fn validation_total(params: &ModelParams, val: &[VlpExample], config: &TrainConfig) -> Result<Option<f64>> {
    let min = if config.flags.ctr() { 2 } else { 1 };
    let mut sum = 0.0;
    let mut count = 0usize;
    for (j, chunk) in val.chunks(config.batch_size).enumerate() {
        if chunk.len() < min {
            continue;
        }
        let g = Graph::new();
        let b = params.bind(&g);
        let batch: Vec<&VlpExample> = chunk.iter().collect();
        let terms = vlp_terms(&g, &b, &batch, config, seed::derive(config.seed, "val", j as u64))?;
        let total = total_loss(&g, &terms, &config.flags)?;
        sum += g.scalar(total) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Joint image/report training with the enabled alignment objectives and
/// early stopping on the validation total.
pub fn train_vlp(
    train: &[VlpExample],
    val: &[VlpExample],
    mut state: TrainState,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Vlp {
        return Err(Error::Config("train_vlp needs a vlp-stage config".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training pairs".into()));
    }
    if config.flags.ctr() && train.len() < 2 {
        return Err(Error::Config("decorrelation terms need at least 2 training pairs".into()));
    }
    state.params.set_frozen_layers(config.n_frozen)?;
    let languages: Vec<Language> = train.iter().map(|e| e.language).collect();
    let objective = |params: &ModelParams, idx: &[usize], draw: u64| {
        let g = Graph::new();
        let b = params.bind(&g);
        let batch: Vec<&VlpExample> = idx.iter().map(|&i| &train[i]).collect();
        let terms = vlp_terms(&g, &b, &batch, config, draw)?;
        let total = total_loss(&g, &terms, &config.flags)?;
        g.backward(total)?;
        Ok((collect(&g, &terms, config), b.grads(&g)))
    };
    drive(state, config, &languages, objective, |p| {
        validation_total(p, val, config)
    })
}
