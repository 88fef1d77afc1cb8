use std::collections::{BTreeMap, HashMap};

use super::segment;

/// Ranks distinct tokens of `corpus` by their TF-IDF weight summed over
/// documents and returns the top `m`.
///
/// `tf` is the raw count, `idf(t) = ln((1 + n_docs) / (1 + df(t))) + 1`, and
/// each document's weight vector is L2-normalized before summation. Ties are
/// broken lexicographically.
pub fn build_tfidf_vocab<S: AsRef<str>>(corpus: &[S], m: usize) -> Vec<String> {
    let docs: Vec<Vec<String>> = corpus.iter().map(|d| segment(d.as_ref())).collect();
    let n_docs = docs.len() as f64;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for d in &docs {
        let mut uniq: Vec<&str> = d.iter().map(String::as_str).collect();
        uniq.sort_unstable();
        uniq.dedup();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let idf = |t: &str| ((1.0 + n_docs) / (1.0 + df[t] as f64)).ln() + 1.0;

    let mut score: BTreeMap<&str, f64> = BTreeMap::new();
    for d in &docs {
        let mut tf: BTreeMap<&str, f64> = BTreeMap::new();
        for t in d {
            *tf.entry(t.as_str()).or_default() += 1.0;
        }
        let weights: Vec<(&str, f64)> = tf.into_iter().map(|(t, c)| (t, c * idf(t))).collect();
        let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for (t, w) in weights {
            *score.entry(t).or_default() += w / norm;
        }
    }
    let mut ranked: Vec<(&str, f64)> = score.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if m > ranked.len() {
        log::warn!(
            "requested {m} tokens but the corpus only has {} distinct tokens",
            ranked.len()
        );
    }
    ranked.into_iter().take(m).map(|(t, _)| t.to_string()).collect()
}
