//! End-to-end runs: data splits, vocabulary, both training stages,
//! evaluation, diagnostics, artifacts and manifests.

mod config;
mod gradcheck;
pub mod json;

pub use config::{schema_help, DataConfig, EvalConfig, KeySpec, RunConfig, SCHEMA, SEED_ENV};
pub use gradcheck::{grad_check_suite, GradCheckRow, GRAD_POINTS, GRAD_TOL};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{
    bias_report, embed_images, embed_texts, macro_auc_f1, retrieval_at_k, seed_variance,
    zero_shot_batch, BiasReport, CategoryMetrics, MeanStd, PromptSet, TextSpace,
};
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::Tensor;
use crate::seed;
use crate::synth::{filter_short_reports, make_dataset, Language, Lexicon, Sample};
use crate::text::{build_tfidf_vocab, merge_vocab, TokenSequence, Vocabulary};
use crate::train::{train_mlm, train_vlp, StepRecord, TrainState, VlpExample};

pub const TOOL_NAME: &str = "medunic";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pair-disjoint train/validation/test partition.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Assigns whole pairs (both languages together) to test, validation and
/// training, in that order, after a seeded shuffle of pair indices.
pub fn split_by_pair(samples: Vec<Sample>, test_frac: f64, val_frac: f64, rng_seed: u64) -> Result<Splits> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("nothing to split".into()));
    }
    let mut pairs: Vec<u64> = samples.iter().map(Sample::pair).collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs.shuffle(&mut seed::rng(rng_seed));
    let n = pairs.len();
    let n_test = (test_frac * n as f64).round() as usize;
    let n_val = (val_frac * n as f64).round() as usize;
    if n_test + n_val >= n {
        return Err(Error::Config(format!(
            "{n} pairs leave nothing to train on after {n_test} test and {n_val} validation pairs"
        )));
    }
    let which: BTreeMap<u64, usize> = pairs
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, if i < n_test { 0 } else if i < n_test + n_val { 1 } else { 2 }))
        .collect();
    let mut s = Splits::default();
    for x in samples {
        match which[&x.pair()] {
            0 => s.test.push(x),
            1 => s.val.push(x),
            _ => s.train.push(x),
        }
    }
    Ok(s)
}

/// Generates, filters and splits the corpus described by `cfg`.
pub fn generate(cfg: &RunConfig) -> Result<Vec<Sample>> {
    make_dataset(&cfg.synth(), &Lexicon::builtin())
}

pub fn prepare(cfg: &RunConfig, samples: Vec<Sample>) -> Result<Splits> {
    let kept = filter_short_reports(samples, cfg.data.min_tokens);
    split_by_pair(
        kept,
        cfg.data.test_frac,
        cfg.data.val_frac,
        seed::derive(cfg.seed, "split", 0),
    )
}

/// Base vocabulary from English training reports, extended with ranked
/// Spanish tokens.
pub fn build_vocab(train: &[Sample], sp_vocab: Option<usize>) -> Result<Vocabulary> {
    let of = |lang: Language| -> Vec<&str> {
        train
            .iter()
            .filter(|s| s.language == lang)
            .map(|s| s.report.as_str())
            .collect()
    };
    let (en, sp) = (of(Language::En), of(Language::Sp));
    if en.is_empty() {
        return Err(Error::EmptyDataset("no English training reports for the base vocabulary".into()));
    }
    let base = Vocabulary::from_corpus(&en);
    let ranked = match sp_vocab {
        Some(m) => build_tfidf_vocab(&sp, m),
        None => {
            let distinct: std::collections::BTreeSet<String> =
                sp.iter().flat_map(|r| crate::text::segment(r)).collect();
            build_tfidf_vocab(&sp, distinct.len())
        }
    };
    Ok(merge_vocab(&base, &ranked))
}

/// Freshly initialized English-sized model with the Spanish rows appended.
pub fn init_params(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelParams> {
    let mut p = ModelParams::init(cfg.model_for(vocab.en_size()), seed::derive(cfg.seed, "init", 0))?;
    p.extend_vocab(vocab.len() - vocab.en_size(), seed::derive(cfg.seed, "extend", 0))?;
    Ok(p)
}

pub fn examples(samples: &[Sample], vocab: &Vocabulary, max_len: usize) -> Vec<VlpExample> {
    samples
        .iter()
        .map(|s| VlpExample::from_sample(s, vocab, max_len))
        .collect()
}

/// Parameters with their vocabulary and the records that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub records: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    en_vocab: usize,
    n_frozen: usize,
}

const PARAMS_FILE: &str = "model.ckpt";
const META_FILE: &str = "model.json";
const VOCAB_FILE: &str = "vocab.txt";
const METRICS_FILE: &str = "metrics.jsonl";
const CONFIG_FILE: &str = "config.txt";

impl Checkpoint {
    /// Writes parameters, shape, vocabulary, metrics stream and the config
    /// that produced them.
    pub fn save(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.params.save(&dir.join(PARAMS_FILE))?;
        let meta = CheckpointMeta {
            model: self.params.config().clone(),
            en_vocab: self.vocab.en_size() - crate::text::NUM_SPECIALS as usize,
            n_frozen: self.params.n_frozen(),
        };
        json::write_pretty(&dir.join(META_FILE), &meta)?;
        self.vocab.write(&dir.join(VOCAB_FILE))?;
        fs::write(dir.join(METRICS_FILE), metrics_stream(&self.records)?)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(
            |e| Error::Checkpoint(format!("cannot read {}: {e}", meta_path.display())),
        )?)?;
        let vocab = Vocabulary::read(&dir.join(VOCAB_FILE), Some(meta.en_vocab))?;
        if vocab.len() != meta.model.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} tokens, model expects {}",
                vocab.len(),
                meta.model.vocab_size
            )));
        }
        let mut params = ModelParams::load(meta.model, &dir.join(PARAMS_FILE))?;
        params.set_frozen_layers(meta.n_frozen)?;
        Ok(Self {
            params,
            vocab,
            records: Vec::new(),
        })
    }

    /// The config saved next to a checkpoint.
    pub fn config(dir: &Path) -> Result<RunConfig> {
        RunConfig::load(&dir.join(CONFIG_FILE))
    }
}

/// One JSON line per record.
pub fn metrics_stream(records: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&json::to_line(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Masked-token pre-training on the mixed-language training reports.
pub fn run_mlm(cfg: &RunConfig, splits: &Splits, vocab: &Vocabulary) -> Result<Checkpoint> {
    let params = init_params(cfg, vocab)?;
    let corpus: Vec<TokenSequence> = examples(&splits.train, vocab, cfg.model.max_len)
        .into_iter()
        .map(|e| e.tokens)
        .collect();
    let train = cfg.mlm_train();
    let out = train_mlm(&corpus, TrainState::new(params, train.adam), &train)?;
    Ok(Checkpoint {
        params: out.state.params,
        vocab: vocab.clone(),
        records: out.records,
    })
}

/// Image/report alignment from `init` (or from scratch when the config
/// disables the masked-token initialization).
pub fn run_vlp(cfg: &RunConfig, init: Option<&Checkpoint>, splits: &Splits, vocab: &Vocabulary) -> Result<Checkpoint> {
    let params = match (cfg.mlm_init, init) {
        (true, Some(c)) => {
            if c.vocab.tokens() != vocab.tokens() {
                return Err(Error::Checkpoint("initial checkpoint uses a different vocabulary".into()));
            }
            c.params.clone()
        }
        (true, None) => {
            return Err(Error::Config("vlp.mlm_init is set but no initial checkpoint was given".into()))
        }
        (false, _) => init_params(cfg, vocab)?,
    };
    let max_len = params.config().max_len;
    let train = examples(&splits.train, vocab, max_len);
    let val = examples(&splits.val, vocab, max_len);
    let tc = cfg.vlp_train();
    let out = train_vlp(&train, &val, TrainState::new(params, tc.adam), &tc)?;
    Ok(Checkpoint {
        params: out.state.params,
        vocab: vocab.clone(),
        records: out.records,
    })
}

/// Applies one named ablation to the alignment stage.
pub fn apply_ablation(cfg: &mut RunConfig, name: &str) -> Result<()> {
    let f = &mut cfg.vlp.flags;
    match name {
        "cvl" => f.cvl = false,
        "ssv" => f.ssv = false,
        "ctr" => {
            f.tf = false;
            f.tt = false;
        }
        "tf" => f.tf = false,
        "tt" => f.tt = false,
        "mlm-init" => cfg.mlm_init = false,
        other => {
            return Err(Error::Config(format!(
                "unknown ablation {other:?}; expected ssv, cvl, ctr, tf, tt or mlm-init"
            )))
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShotMetrics {
    pub language: String,
    pub images: usize,
    pub per_finding: Vec<CategoryMetrics>,
    pub macro_auc: Option<f64>,
    pub macro_f1: Option<f64>,
}

/// Zero-shot AUC/F1 over all test images with prompts in `lang`. The AUC
/// ranking score is the positive-minus-negative similarity margin.
pub fn zero_shot_metrics(ckpt: &Checkpoint, test: &[Sample], lang: Language) -> Result<ZeroShotMetrics> {
    let prompts = PromptSet::from_lexicon(&Lexicon::builtin());
    let findings = test.first().map_or(0, |s| s.findings.len());
    let mut limited = PromptSet::new(findings);
    for k in 0..findings {
        for l in Language::ALL {
            let (p, n) = prompts.get(k, l)?;
            limited.set(k, l, p.to_string(), n.to_string());
        }
    }
    let images: Vec<_> = test.iter().map(|s| &s.image).collect();
    let zs = zero_shot_batch(&ckpt.params, &images, &limited, lang, &ckpt.vocab)?;
    let scores: Vec<Vec<f64>> = zs.iter().map(|z| z.margins()).collect();
    let truth: Vec<Vec<bool>> = test.iter().map(|s| s.findings.bits().to_vec()).collect();
    let m = macro_auc_f1(&scores, &truth)?;
    Ok(ZeroShotMetrics {
        language: lang.tag().to_string(),
        images: test.len(),
        per_finding: m.per_category,
        macro_auc: m.macro_auc,
        macro_f1: m.macro_f1,
    })
}

/// F1 of a classifier that calls each finding positive with probability
/// equal to its prevalence: the prevalence itself.
pub fn random_f1_baseline(test: &[Sample]) -> f64 {
    let findings = test.first().map_or(0, |s| s.findings.len());
    if findings == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for k in 0..findings {
        total += test.iter().filter(|s| s.findings.get(k)).count() as f64 / test.len() as f64;
    }
    total / findings as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalMetrics {
    pub pairs: usize,
    pub space: TextSpace,
    /// `"en_to_sp@k"` and `"sp_to_en@k"`.
    pub recall: BTreeMap<String, f64>,
}

/// Cross-lingual report retrieval over test pairs present in both languages.
pub fn retrieval_metrics(ckpt: &Checkpoint, test: &[Sample], space: TextSpace, ks: &[usize]) -> Result<RetrievalMetrics> {
    let max_len = ckpt.params.config().max_len;
    let mut by_pair: BTreeMap<u64, [Option<&Sample>; 2]> = BTreeMap::new();
    for s in test {
        by_pair.entry(s.pair()).or_default()[s.language.index()] = Some(s);
    }
    let complete: Vec<[&Sample; 2]> = by_pair
        .values()
        .filter_map(|p| Some([p[0]?, p[1]?]))
        .collect();
    if complete.is_empty() {
        return Err(Error::EmptyDataset("no test pair has both languages".into()));
    }
    let embed = |i: usize| -> Result<Tensor> {
        let seqs: Vec<TokenSequence> = complete
            .iter()
            .map(|p| VlpExample::from_sample(p[i], &ckpt.vocab, max_len).tokens)
            .collect();
        embed_texts(&ckpt.params, &seqs, space)
    };
    let (en, sp) = (embed(0)?, embed(1)?);
    let pairs: Vec<(usize, usize)> = (0..complete.len()).map(|i| (i, i)).collect();
    let mut recall = BTreeMap::new();
    for &k in ks {
        let k = k.min(complete.len());
        recall.insert(format!("en_to_sp@{k}"), retrieval_at_k(&en, &sp, &pairs, k)?);
        recall.insert(format!("sp_to_en@{k}"), retrieval_at_k(&sp, &en, &pairs, k)?);
    }
    Ok(RetrievalMetrics {
        pairs: complete.len(),
        space,
        recall,
    })
}

/// Bias diagnostics over the test split, with row identities for export.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnosis {
    pub ids: Vec<u64>,
    pub languages: Vec<Language>,
    pub report: BiasReport,
}

pub fn diagnose(cfg: &RunConfig, ckpt: &Checkpoint, test: &[Sample]) -> Result<Diagnosis> {
    let max_len = ckpt.params.config().max_len;
    let seqs: Vec<TokenSequence> = examples(test, &ckpt.vocab, max_len).into_iter().map(|e| e.tokens).collect();
    let images: Vec<_> = test.iter().map(|s| &s.image).collect();
    let text = embed_texts(&ckpt.params, &seqs, cfg.eval.text_space)?;
    let image = embed_images(&ckpt.params, &images, cfg.eval.image_space)?;
    let labels: Vec<bool> = test.iter().map(|s| s.language == Language::Sp).collect();
    Ok(Diagnosis {
        ids: test.iter().map(|s| s.id).collect(),
        languages: test.iter().map(|s| s.language).collect(),
        report: bias_report(&text, &image, &labels, &cfg.bias_options())?,
    })
}

impl Diagnosis {
    /// `bias_report.json`, PCA coordinates and similarity matrices for both
    /// modalities.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        json::write_pretty(&dir.join("bias_report.json"), &self.report)?;
        let mut written = vec!["bias_report.json".to_string()];
        for (prefix, m) in [("", &self.report.text), ("image_", &self.report.image)] {
            let mut csv = String::from("id,language,x,y\n");
            for (i, c) in m.pca_coords.iter().enumerate() {
                writeln!(
                    csv,
                    "{},{},{},{}",
                    self.ids[i],
                    self.languages[i].tag(),
                    json::fmt_float(c[0]),
                    json::fmt_float(c[1])
                )
                .unwrap();
            }
            let name = format!("{prefix}pca_coords.csv");
            fs::write(dir.join(&name), csv)?;
            written.push(name);

            let mut csv = String::from("id");
            for &r in &m.heatmap_rows {
                write!(csv, ",{}", self.ids[r]).unwrap();
            }
            csv.push('\n');
            for (a, &r) in m.heatmap_rows.iter().enumerate() {
                write!(csv, "{}", self.ids[r]).unwrap();
                for b in 0..m.heatmap_rows.len() {
                    write!(csv, ",{}", json::fmt_float(m.similarity_matrix.get2(a, b))).unwrap();
                }
                csv.push('\n');
            }
            let name = format!("{prefix}similarity_matrix.csv");
            fs::write(dir.join(&name), csv)?;
            written.push(name);
        }
        Ok(written)
    }
}

/// Headline numbers of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub zero_shot: Vec<ZeroShotMetrics>,
    pub random_f1: f64,
    pub retrieval: RetrievalMetrics,
    pub diagnosis: Diagnosis,
}

pub fn evaluate(cfg: &RunConfig, ckpt: &Checkpoint, test: &[Sample]) -> Result<Evaluation> {
    let ks = retrieval_ks(cfg);
    Ok(Evaluation {
        zero_shot: Language::ALL
            .iter()
            .map(|&l| zero_shot_metrics(ckpt, test, l))
            .collect::<Result<_>>()?,
        random_f1: random_f1_baseline(test),
        retrieval: retrieval_metrics(ckpt, test, cfg.eval.text_space, &ks)?,
        diagnosis: diagnose(cfg, ckpt, test)?,
    })
}

pub fn retrieval_ks(cfg: &RunConfig) -> Vec<usize> {
    let mut ks = vec![1, 5, 10, cfg.eval.retrieval_k];
    ks.sort_unstable();
    ks.dedup();
    ks
}

impl Evaluation {
    /// Flat metric map used by the multi-seed summary.
    pub fn metrics(&self, k: usize) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("text_probe_accuracy".into(), self.diagnosis.report.text.probe_accuracy);
        m.insert("image_probe_accuracy".into(), self.diagnosis.report.image.probe_accuracy);
        m.insert("text_centroid_gap".into(), self.diagnosis.report.text.centroid_gap);
        m.insert("text_silhouette".into(), self.diagnosis.report.text.silhouette);
        if let Some(&r) = self.retrieval.recall.get(&format!("en_to_sp@{k}")) {
            m.insert(format!("recall@{k}"), r);
        }
        for z in &self.zero_shot {
            if let Some(a) = z.macro_auc {
                m.insert(format!("zero_shot_auc_{}", z.language), a);
            }
            if let Some(f) = z.macro_f1 {
                m.insert(format!("zero_shot_f1_{}", z.language), f);
            }
        }
        m
    }
}

/// Data, both stages and evaluation for one root seed.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub mlm: Checkpoint,
    pub vlp: Checkpoint,
    pub evaluation: Evaluation,
}

pub fn run_all(cfg: &RunConfig) -> Result<RunResult> {
    let splits = prepare(cfg, generate(cfg)?)?;
    let vocab = build_vocab(&splits.train, cfg.data.sp_vocab)?;
    let mlm = run_mlm(cfg, &splits, &vocab)?;
    let vlp = run_vlp(cfg, Some(&mlm), &splits, &vocab)?;
    let evaluation = evaluate(cfg, &vlp, &splits.test)?;
    Ok(RunResult { mlm, vlp, evaluation })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedsReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<BTreeMap<String, f64>>,
    pub summary: BTreeMap<String, MeanStd>,
}

/// Full pipeline per seed; per-metric mean and population std.
pub fn run_seeds(cfg: &RunConfig, seeds: &[u64]) -> Result<SeedsReport> {
    let mut runs = Vec::new();
    let summary = seed_variance(seeds, |s| {
        let c = RunConfig { seed: s, ..cfg.clone() };
        let m = run_all(&c)?.evaluation.metrics(cfg.eval.retrieval_k);
        runs.push(m.clone());
        Ok(m)
    })?;
    Ok(SeedsReport {
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}

impl SeedsReport {
    /// `metric  mean ± std` lines.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for (name, m) in &self.summary {
            writeln!(out, "{name:<24} {} ± {}", json::fmt_float(m.mean), json::fmt_float(m.std)).unwrap();
        }
        out
    }
}

/// Git-style content hash: SHA-256 of `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    config::hex(&h.finalize())
}

/// Blob hash for files; for directories, the hash of a sorted
/// `tree` listing of entry names and hashes.
pub fn path_hash(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let mut listing = String::new();
        for n in names {
            writeln!(listing, "{} {}", n.to_string_lossy(), path_hash(&path.join(&n))?).unwrap();
        }
        let mut h = Sha256::new();
        h.update(format!("tree {}\0", listing.len()).as_bytes());
        h.update(listing.as_bytes());
        Ok(config::hex(&h.finalize()))
    } else {
        Ok(blob_hash(&fs::read(path)?))
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.into(), path_hash(path)?);
        Ok(())
    }

    /// Hashes the listed files under `dir` and writes `manifest.json` there.
    pub fn finish(mut self, dir: &Path, outputs: &[String]) -> Result<()> {
        for name in outputs {
            self.outputs.insert(name.clone(), path_hash(&dir.join(name))?);
        }
        json::write_pretty(&dir.join("manifest.json"), &self)
    }
}
