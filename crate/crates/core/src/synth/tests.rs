use std::collections::BTreeSet;

use super::*;
use crate::text::segment;

fn small_config(n_en: usize, n_sp: usize) -> SynthConfig {
    SynthConfig {
        n_en,
        n_sp,
        seed: 11,
        image_size: 16,
        ..SynthConfig::default()
    }
}

#[test]
fn findings_are_deterministic() {
    let a = gen_findings(7, 8, 0.3).unwrap();
    let b = gen_findings(7, 8, 0.3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
}

// Regression pin for the seeded generator stream.
#[test]
fn findings_golden() {
    assert_eq!(gen_findings(7, 8, 0.3).unwrap().to_bitstring(), "11000010");
}

#[test]
fn prevalence_extremes() {
    assert!(gen_findings(1, 8, 0.0).unwrap().bits().iter().all(|b| !b));
    assert!(gen_findings(1, 8, 1.0).unwrap().bits().iter().all(|&b| b));
}

#[test]
fn prevalence_is_respected_on_average() {
    let n = 4000;
    let set: usize = (0..n)
        .map(|s| gen_findings(s, 8, 0.3).unwrap().set_indices().count())
        .sum();
    let p = set as f64 / (8 * n) as f64;
    // 3 sigma for 32000 Bernoulli(0.3) draws is about 0.0077.
    assert!((p - 0.3).abs() < 0.0077, "{p}");
}

#[test]
fn bad_generator_arguments_are_rejected() {
    assert!(gen_findings(0, 0, 0.3).is_err());
    assert!(gen_findings(0, 8, 1.2).is_err());
}

#[test]
fn bitstring_round_trips() {
    let f = gen_findings(3, 8, 0.5).unwrap();
    assert_eq!(LatentFindings::parse_bitstring(&f.to_bitstring()).unwrap(), f);
    assert!(LatentFindings::parse_bitstring("01x").is_err());
}

#[test]
fn language_tags_parse() {
    assert_eq!("EN".parse::<Language>().unwrap(), Language::En);
    assert_eq!("es".parse::<Language>().unwrap(), Language::Sp);
    assert!("fr".parse::<Language>().is_err());
}

#[test]
fn reports_mention_every_present_finding() {
    let lex = Lexicon::builtin();
    for s in 0..200 {
        let f = gen_findings(s, 8, 0.3).unwrap();
        for lang in Language::ALL {
            let r = render_report(&lex, ReportStyle::default(), &f, lang, s).unwrap();
            assert!(!r.trim().is_empty());
            for k in f.set_indices() {
                assert!(
                    lex.positive(lang, k).iter().any(|p| r.contains(p.as_str())),
                    "{r:?} misses finding {k}"
                );
            }
        }
    }
}

#[test]
fn all_negative_findings_still_yield_a_report() {
    let lex = Lexicon::builtin();
    let none = LatentFindings::from_bits(vec![false; 8]);
    let style = ReportStyle {
        negation_rate: 0.0,
        filler_rate: 0.0,
    };
    for lang in Language::ALL {
        let r = render_report(&lex, style, &none, lang, 5).unwrap();
        let neg = if lang == Language::En { "no " } else { "no hay " };
        assert!(r.starts_with(neg), "{r}");
    }
}

#[test]
fn reports_are_deterministic() {
    let lex = Lexicon::builtin();
    let f = gen_findings(2, 8, 0.5).unwrap();
    let a = render_report(&lex, ReportStyle::default(), &f, Language::Sp, 9).unwrap();
    let b = render_report(&lex, ReportStyle::default(), &f, Language::Sp, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn report_wider_than_lexicon_is_rejected() {
    let lex = Lexicon::builtin();
    let f = LatentFindings::from_bits(vec![true; 9]);
    assert!(render_report(&lex, ReportStyle::default(), &f, Language::En, 0).is_err());
}

#[test]
fn languages_share_only_the_negation_cue() {
    let data = make_dataset(&small_config(300, 300), &Lexicon::builtin()).unwrap();
    let words = |lang| -> BTreeSet<String> {
        data.iter()
            .filter(|s| s.language == lang)
            .flat_map(|s| segment(&s.report))
            .collect()
    };
    let shared: Vec<String> = words(Language::En)
        .intersection(&words(Language::Sp))
        .cloned()
        .collect();
    assert_eq!(shared, vec!["no".to_string()]);
}

#[test]
fn dataset_counts_ids_and_pairing() {
    let data = make_dataset(&small_config(5, 3), &Lexicon::builtin()).unwrap();
    assert_eq!(data.len(), 8);
    let en = data.iter().filter(|s| s.language == Language::En).count();
    assert_eq!(en, 5);
    for s in &data {
        assert_eq!(s.id, sample_id(s.pair(), s.language));
    }
    for pair in 0..3 {
        let en = data.iter().find(|s| s.id == sample_id(pair, Language::En)).unwrap();
        let sp = data.iter().find(|s| s.id == sample_id(pair, Language::Sp)).unwrap();
        assert_eq!(en.findings, sp.findings);
        assert_ne!(en.report, sp.report);
    }
}

#[test]
fn dataset_is_deterministic_and_seed_sensitive() {
    let lex = Lexicon::builtin();
    let a = make_dataset(&small_config(20, 20), &lex).unwrap();
    let b = make_dataset(&small_config(20, 20), &lex).unwrap();
    assert_eq!(a, b);
    let c = make_dataset(
        &SynthConfig {
            seed: 12,
            ..small_config(20, 20)
        },
        &lex,
    )
    .unwrap();
    assert_ne!(a, c);
}

#[test]
fn one_language_only_is_allowed() {
    let data = make_dataset(&small_config(4, 0), &Lexicon::builtin()).unwrap();
    assert!(data.iter().all(|s| s.language == Language::En));
}

#[test]
fn empty_dataset_is_an_error() {
    let err = make_dataset(&small_config(0, 0), &Lexicon::builtin()).unwrap_err();
    assert!(matches!(err, Error::EmptyDataset(_)));
}

#[test]
fn short_reports_are_filtered() {
    let data = make_dataset(&small_config(30, 30), &Lexicon::builtin()).unwrap();
    let kept = filter_short_reports(data.clone(), 4);
    assert!(kept.iter().all(|s| segment(&s.report).len() >= 4));
    assert_eq!(filter_short_reports(data.clone(), 0).len(), data.len());
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_dataset(&small_config(6, 4), &Lexicon::builtin()).unwrap();
    write_dataset(dir.path(), &data).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), data.len());
    for (a, b) in data.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.language, b.language);
        assert_eq!(a.findings, b.findings);
        assert_eq!(a.report, b.report);
        let diff = a
            .image
            .pixels
            .iter()
            .zip(&b.image.pixels)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }
}

#[test]
fn missing_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_dataset(dir.path()).is_err());
}

#[test]
fn lexicon_rejects_missing_negation() {
    let text = "en\tpos\tcardiomegaly\tcardiomegaly\nsp\tpos\tcardiomegaly\tcardiomegalia\nsp\tneg\tcardiomegaly\tno hay cardiomegalia\n";
    assert!(Lexicon::parse(text, std::path::Path::new("x.tsv")).is_err());
}
