//! Zero-shot classification, cross-lingual retrieval and language-bias
//! diagnostics over frozen parameter snapshots.

mod bias;
mod metrics;

pub use bias::{
    bias_report, centroid_gap, cosine_similarity_matrix, language_probe, pca_2d, silhouette,
    BiasOptions, BiasReport, ModalityBias, ProbeOptions,
};
pub use metrics::{
    auc, macro_auc_f1, retrieval_at_k, seed_variance, AucF1, CategoryMetrics, MeanStd,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{project, stack_images, text_encode, vision_encode, ModelParams, Projector};
use crate::numeric::{Graph, Tensor};
use crate::synth::{ImageGrid, Language, Lexicon};
use crate::text::{tokenize, TokenSequence, Vocabulary};

/// Rows encoded per forward pass when embedding a dataset.
const EMBED_CHUNK: usize = 256;

/// Positive and negative prompt per finding and language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    /// `prompts[finding][language]` is `(positive, negative)`.
    prompts: Vec<[Option<(String, String)>; 2]>,
}

impl PromptSet {
    pub fn new(findings: usize) -> Self {
        Self {
            prompts: vec![[None, None]; findings],
        }
    }

    /// Disease name as the positive prompt; "No {name}" (En) and
    /// "No hay {name}" (Sp) as negatives.
    pub fn from_lexicon(lexicon: &Lexicon) -> Self {
        let mut set = Self::new(lexicon.findings());
        for k in 0..lexicon.findings() {
            for lang in Language::ALL {
                let name = lexicon.disease_name(lang, k);
                let neg = match lang {
                    Language::En => format!("No {name}"),
                    Language::Sp => format!("No hay {name}"),
                };
                set.set(k, lang, name.to_string(), neg);
            }
        }
        set
    }

    pub fn set(&mut self, finding: usize, lang: Language, positive: String, negative: String) {
        if finding >= self.prompts.len() {
            self.prompts.resize(finding + 1, [None, None]);
        }
        self.prompts[finding][lang.index()] = Some((positive, negative));
    }

    pub fn findings(&self) -> usize {
        self.prompts.len()
    }

    pub fn get(&self, finding: usize, lang: Language) -> Result<(&str, &str)> {
        self.prompts
            .get(finding)
            .and_then(|p| p[lang.index()].as_ref())
            .map(|(p, n)| (p.as_str(), n.as_str()))
            .ok_or_else(|| {
                Error::Config(format!("no {} prompt for finding {finding}", lang.tag()))
            })
    }
}

/// Which report representation to read out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextSpace {
    /// Encoder CLS vector.
    Pooled,
    /// Unit-norm image/report alignment space.
    Aligned,
    /// Decorrelation head output.
    Decorrelation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSpace {
    /// Vision encoder output.
    Raw,
    /// Unit-norm image/report alignment space.
    Aligned,
}

fn stack_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    let width = parts.first().map(Tensor::last_dim).unwrap_or(0);
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        rows += p.outer_rows();
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, width], data)
}

/// Deterministic (dropout-off) report embeddings, one row per sequence.
pub fn embed_texts(params: &ModelParams, seqs: &[TokenSequence], space: TextSpace) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset("no reports to embed".into()));
    }
    let mut parts = Vec::new();
    for chunk in seqs.chunks(EMBED_CHUNK) {
        let g = Graph::new();
        let b = params.bind(&g);
        let out = text_encode(&g, &b, chunk, false, 0)?;
        let v = match space {
            TextSpace::Pooled => out.pooled,
            TextSpace::Aligned => project(&g, &b, Projector::L, out.pooled)?,
            TextSpace::Decorrelation => project(&g, &b, Projector::D, out.pooled)?,
        };
        parts.push(g.value(v).clone());
    }
    stack_rows(parts)
}

pub fn embed_images(params: &ModelParams, images: &[&ImageGrid], space: ImageSpace) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no images to embed".into()));
    }
    let mut parts = Vec::new();
    for chunk in images.chunks(EMBED_CHUNK) {
        let g = Graph::new();
        let b = params.bind(&g);
        let h = vision_encode(&g, &b, &stack_images(chunk)?)?;
        let v = match space {
            ImageSpace::Raw => h,
            ImageSpace::Aligned => project(&g, &b, Projector::V, h)?,
        };
        parts.push(g.value(v).clone());
    }
    stack_rows(parts)
}

/// Positive iff the positive prompt is strictly more similar; ties go
/// negative.
pub fn decide(sim_pos: f64, sim_neg: f64) -> bool {
    sim_pos > sim_neg
}

/// Prompt embeddings in the alignment space for one language.
#[derive(Clone, Debug)]
pub struct PromptEmbeddings {
    pub language: Language,
    /// `F x D` positive and negative prompt rows.
    pub positive: Tensor,
    pub negative: Tensor,
}

impl PromptEmbeddings {
    pub fn encode(
        params: &ModelParams,
        prompts: &PromptSet,
        lang: Language,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let max_len = params.config().max_len;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for k in 0..prompts.findings() {
            let (p, n) = prompts.get(k, lang)?;
            pos.push(tokenize(p, vocab, max_len));
            neg.push(tokenize(n, vocab, max_len));
        }
        Ok(Self {
            language: lang,
            positive: embed_texts(params, &pos, TextSpace::Aligned)?,
            negative: embed_texts(params, &neg, TextSpace::Aligned)?,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-finding decisions and raw similarities for one image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ZeroShot {
    pub positive: Vec<bool>,
    pub sim_pos: Vec<f64>,
    pub sim_neg: Vec<f64>,
}

impl ZeroShot {
    /// `sim_pos - sim_neg`, the ranking score used for AUC.
    pub fn margins(&self) -> Vec<f64> {
        self.sim_pos.iter().zip(&self.sim_neg).map(|(p, n)| p - n).collect()
    }
}

/// Classifies one embedded image (a unit row of the alignment space).
pub fn classify_embedding(image: &[f64], prompts: &PromptEmbeddings) -> ZeroShot {
    let sim_pos: Vec<f64> = prompts.positive.rows().map(|r| dot(image, r)).collect();
    let sim_neg: Vec<f64> = prompts.negative.rows().map(|r| dot(image, r)).collect();
    let positive = sim_pos.iter().zip(&sim_neg).map(|(&p, &n)| decide(p, n)).collect();
    ZeroShot {
        positive,
        sim_pos,
        sim_neg,
    }
}

pub fn zero_shot_classify(
    params: &ModelParams,
    image: &ImageGrid,
    prompts: &PromptSet,
    lang: Language,
    vocab: &Vocabulary,
) -> Result<ZeroShot> {
    let emb = PromptEmbeddings::encode(params, prompts, lang, vocab)?;
    let v = embed_images(params, &[image], ImageSpace::Aligned)?;
    Ok(classify_embedding(v.row(0), &emb))
}

/// Zero-shot results for many images at once.
pub fn zero_shot_batch(
    params: &ModelParams,
    images: &[&ImageGrid],
    prompts: &PromptSet,
    lang: Language,
    vocab: &Vocabulary,
) -> Result<Vec<ZeroShot>> {
    let emb = PromptEmbeddings::encode(params, prompts, lang, vocab)?;
    let v = embed_images(params, images, ImageSpace::Aligned)?;
    Ok(v.rows().map(|r| classify_embedding(r, &emb)).collect())
}
