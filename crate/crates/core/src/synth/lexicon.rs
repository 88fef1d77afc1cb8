use std::path::Path;

use super::Language;
use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../data/lexicon.tsv");

/// Per-language phrase inventory used to render reports and prompts.
#[derive(Clone, Debug)]
pub struct Lexicon {
    findings: usize,
    /// `[language][finding]` positive phrasings.
    positive: [Vec<Vec<String>>; 2],
    /// `[language][finding]` negated phrasings.
    negative: [Vec<Vec<String>>; 2],
    filler: [Vec<String>; 2],
}

impl Lexicon {
    /// The inventory shipped with the crate (8 findings, En + Sp).
    pub fn builtin() -> Self {
        Self::parse(BUILTIN, Path::new("<builtin lexicon>")).expect("builtin lexicon parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    /// Parses `language \t kind \t finding \t phrase` rows; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, detail: String| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {detail}", line + 1),
        };
        let mut rows = Vec::new();
        let mut findings = 0;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad(n, format!("expected 4 tab-separated fields, got {}", cols.len())));
            }
            let lang: Language = cols[0].parse().map_err(|e: Error| bad(n, e.to_string()))?;
            let finding = match cols[2] {
                "-" => None,
                s => Some(s.parse::<usize>().map_err(|_| bad(n, format!("finding index {s:?}")))?),
            };
            if let Some(f) = finding {
                findings = findings.max(f + 1);
            }
            rows.push((n, lang, cols[1].to_string(), finding, cols[3].trim().to_string()));
        }
        let empty = || vec![Vec::new(); findings];
        let mut lex = Lexicon {
            findings,
            positive: [empty(), empty()],
            negative: [empty(), empty()],
            filler: [Vec::new(), Vec::new()],
        };
        for (n, lang, kind, finding, phrase) in rows {
            let li = lang.index();
            match (kind.as_str(), finding) {
                ("pos", Some(f)) => lex.positive[li][f].push(phrase),
                ("neg", Some(f)) => lex.negative[li][f].push(phrase),
                ("filler", None) => lex.filler[li].push(phrase),
                _ => return Err(bad(n, format!("bad kind/finding combination {kind:?}"))),
            }
        }
        for lang in Language::ALL {
            for f in 0..findings {
                let li = lang.index();
                if lex.positive[li][f].is_empty() || lex.negative[li][f].is_empty() {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        detail: format!("finding {f} lacks positive or negated phrasing for {lang}"),
                    });
                }
            }
        }
        Ok(lex)
    }

    pub fn findings(&self) -> usize {
        self.findings
    }

    pub fn positive(&self, lang: Language, finding: usize) -> &[String] {
        &self.positive[lang.index()][finding]
    }

    pub fn negative(&self, lang: Language, finding: usize) -> &[String] {
        &self.negative[lang.index()][finding]
    }

    pub fn filler(&self, lang: Language) -> &[String] {
        &self.filler[lang.index()]
    }

    /// Canonical disease name: the first positive phrasing.
    pub fn disease_name(&self, lang: Language, finding: usize) -> &str {
        &self.positive[lang.index()][finding][0]
    }
}
