//! Synthetic bilingual image/report corpus with shared latent findings.
//!
//! Every latent finding vector is rendered once per requested language, so
//! the English and Spanish sample built from latent index `i` form a ground
//! truth cross-lingual pair. Sample ids encode that pairing:
//! `id = 2 * pair + language_index`.

mod image;
mod io;
mod lexicon;

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use image::{apply_site_style, patch_layout, render_image, ImageGrid, BACKGROUND};
pub use io::{read_dataset, read_image, write_dataset, write_image, DATASET_FILE};
pub use lexicon::Lexicon;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "en")]
    En,
    #[serde(rename = "sp")]
    Sp,
}

impl Language {
    pub const ALL: [Language; 2] = [Language::En, Language::Sp];

    pub fn index(self) -> usize {
        match self {
            Language::En => 0,
            Language::Sp => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Sp => "sp",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "en" => Ok(Language::En),
            "sp" | "es" => Ok(Language::Sp),
            other => Err(Error::Config(format!("unknown language tag {other:?}"))),
        }
    }
}

/// Fixed-length binary vector of disease findings.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatentFindings(Vec<bool>);

impl LatentFindings {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> bool {
        self.0[k]
    }

    pub fn set_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_bitstring(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Config(format!("invalid finding bit {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

/// Each bit is set independently with probability `prevalence`.
pub fn gen_findings(rng_seed: u64, f_count: usize, prevalence: f64) -> Result<LatentFindings> {
    if f_count == 0 {
        return Err(Error::Config("finding count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&prevalence) {
        return Err(Error::Config(format!("prevalence {prevalence} outside [0, 1]")));
    }
    let mut rng = seed::rng(rng_seed);
    Ok(LatentFindings(
        (0..f_count).map(|_| rng.random_bool(prevalence)).collect(),
    ))
}

/// Report rendering knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportStyle {
    /// Probability that an absent finding is mentioned in negated form.
    pub negation_rate: f64,
    /// Probability of a language-specific boilerplate sentence.
    pub filler_rate: f64,
}

impl Default for ReportStyle {
    fn default() -> Self {
        Self {
            negation_rate: 0.4,
            filler_rate: 0.5,
        }
    }
}

/// Writes a report that mentions every set finding positively and a random
/// subset of unset findings in negated form. Reports never come out empty:
/// with no positive and no sampled negation, one absent finding is negated.
pub fn render_report(
    lexicon: &Lexicon,
    style: ReportStyle,
    findings: &LatentFindings,
    language: Language,
    rng_seed: u64,
) -> Result<String> {
    if findings.len() > lexicon.findings() {
        return Err(Error::Config(format!(
            "lexicon covers {} findings, sample has {}",
            lexicon.findings(),
            findings.len()
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let mut phrases: Vec<&str> = Vec::new();
    let mut absent = Vec::new();
    for (k, &bit) in findings.bits().iter().enumerate() {
        if bit {
            phrases.push(lexicon.positive(language, k).choose(&mut rng).unwrap());
        } else {
            absent.push(k);
            if rng.random_bool(style.negation_rate) {
                phrases.push(lexicon.negative(language, k).choose(&mut rng).unwrap());
            }
        }
    }
    if phrases.is_empty() {
        if let Some(&k) = absent.choose(&mut rng) {
            phrases.push(lexicon.negative(language, k).choose(&mut rng).unwrap());
        }
    }
    phrases.shuffle(&mut rng);
    let mut sentences = Vec::new();
    let filler = lexicon.filler(language);
    if !filler.is_empty() && rng.random_bool(style.filler_rate) {
        sentences.push(filler.choose(&mut rng).unwrap().as_str());
    }
    sentences.extend(phrases);
    Ok(sentences.join(". ") + ".")
}

/// One image/report pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub language: Language,
    pub findings: LatentFindings,
    pub report: String,
    pub image: ImageGrid,
}

impl Sample {
    /// Index of the latent finding vector this sample was rendered from.
    pub fn pair(&self) -> u64 {
        self.id / 2
    }
}

pub fn sample_id(pair: u64, language: Language) -> u64 {
    2 * pair + language.index() as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_en: usize,
    pub n_sp: usize,
    pub seed: u64,
    pub findings: usize,
    pub prevalence: f64,
    pub noise_sigma: f64,
    pub image_size: usize,
    pub site_shift: f64,
    pub style: ReportStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_en: 2000,
            n_sp: 2000,
            seed: 0,
            findings: 8,
            prevalence: 0.3,
            noise_sigma: 0.05,
            image_size: 32,
            site_shift: 0.15,
            style: ReportStyle::default(),
        }
    }
}

/// Builds the corpus ordered by id. Latent vector `i` is rendered in English
/// when `i < n_en` and in Spanish when `i < n_sp`.
pub fn make_dataset(config: &SynthConfig, lexicon: &Lexicon) -> Result<Vec<Sample>> {
    if config.n_en + config.n_sp == 0 {
        return Err(Error::EmptyDataset("both language counts are zero".into()));
    }
    let n_latent = config.n_en.max(config.n_sp);
    let mut out = Vec::with_capacity(config.n_en + config.n_sp);
    for i in 0..n_latent as u64 {
        let findings = gen_findings(
            seed::derive(config.seed, "findings", i),
            config.findings,
            config.prevalence,
        )?;
        for lang in Language::ALL {
            let count = match lang {
                Language::En => config.n_en,
                Language::Sp => config.n_sp,
            };
            if i as usize >= count {
                continue;
            }
            let id = sample_id(i, lang);
            let mut image = render_image(
                &findings,
                config.noise_sigma,
                seed::derive(config.seed, "image", id),
                config.image_size,
            )?;
            apply_site_style(&mut image, lang, config.site_shift);
            let report = render_report(
                lexicon,
                config.style,
                &findings,
                lang,
                seed::derive(config.seed, "report", id),
            )?;
            out.push(Sample {
                id,
                language: lang,
                findings: findings.clone(),
                report,
                image,
            });
        }
    }
    Ok(out)
}

/// Drops samples whose report has fewer than `min_tokens` words.
pub fn filter_short_reports(samples: Vec<Sample>, min_tokens: usize) -> Vec<Sample> {
    samples
        .into_iter()
        .filter(|s| crate::text::segment(&s.report).len() >= min_tokens)
        .collect()
}

#[cfg(test)]
mod tests;
