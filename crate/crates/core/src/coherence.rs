//! Sliding-window PMI / NPMI topic coherence.
//!
//! Every window of `window` consecutive tokens inside a sentence is one
//! observation; a word (or unordered pair) is counted at most once per
//! window. Sentences shorter than the window contribute one window holding
//! the whole sentence. Windows never span two sentences.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::abae::AspectTable;
use crate::corpus::SentenceDataset;
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceConfig {
    pub top_n: usize,
    pub epsilon: f64,
    pub gamma: f64,
    pub window: usize,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        Self {
            top_n: 8,
            epsilon: 1e-10,
            gamma: 1.0,
            window: 10,
        }
    }
}

impl CoherenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_n < 2 {
            return Err(Error::Usage("coherence needs at least 2 top words".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Usage("epsilon must lie in (0, 1)".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Usage("gamma must be positive".into()));
        }
        if self.window < 2 {
            return Err(Error::Usage("window must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CooccurrenceCounts {
    window: usize,
    total_windows: u64,
    index: HashMap<String, u32>,
    words: Vec<String>,
    word_counts: Vec<u64>,
    /// Keyed by `(lo << 32) | hi` with `lo < hi`.
    pair_counts: HashMap<u64, u64>,
}

fn pair_key(a: u32, b: u32) -> u64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    ((lo as u64) << 32) | hi as u64
}

#[derive(Default)]
struct Partial {
    windows: u64,
    words: HashMap<u32, u64>,
    pairs: HashMap<u64, u64>,
}

impl Partial {
    fn merge(mut self, other: Partial) -> Partial {
        self.windows += other.windows;
        for (k, v) in other.words {
            *self.words.entry(k).or_default() += v;
        }
        for (k, v) in other.pairs {
            *self.pairs.entry(k).or_default() += v;
        }
        self
    }
}

impl CooccurrenceCounts {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn total_windows(&self) -> u64 {
        self.total_windows
    }

    pub fn word_count(&self, word: &str) -> u64 {
        self.index
            .get(word)
            .map(|&i| self.word_counts[i as usize])
            .unwrap_or(0)
    }

    pub fn pair_count(&self, a: &str, b: &str) -> u64 {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&i), Some(&j)) if i != j => {
                self.pair_counts.get(&pair_key(i, j)).copied().unwrap_or(0)
            }
            (Some(_), Some(_)) => self.word_count(a),
            _ => 0,
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_count(word) > 0
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#window\t{}", self.window);
        let _ = writeln!(out, "#total_windows\t{}", self.total_windows);
        for (w, c) in self.words.iter().zip(&self.word_counts) {
            let _ = writeln!(out, "w\t{w}\t{c}");
        }
        let mut pairs: Vec<(&u64, &u64)> = self.pair_counts.iter().collect();
        pairs.sort();
        for (&key, c) in pairs {
            let (lo, hi) = ((key >> 32) as usize, (key & 0xffff_ffff) as usize);
            let _ = writeln!(out, "p\t{}\t{}\t{c}", self.words[lo], self.words[hi]);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        util::write_string(path, &self.to_tsv())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = util::read_to_string(path)?;
        let mut window = None;
        let mut total = None;
        let mut counts = Self {
            window: 0,
            total_windows: 0,
            index: HashMap::new(),
            words: Vec::new(),
            word_counts: Vec::new(),
            pair_counts: HashMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::parse(path, lineno, "bad count"))
            };
            match fields.as_slice() {
                ["#window", v] => window = Some(num(v)? as usize),
                ["#total_windows", v] => total = Some(num(v)?),
                ["w", word, c] => {
                    counts.index.insert(word.to_string(), counts.words.len() as u32);
                    counts.words.push(word.to_string());
                    counts.word_counts.push(num(c)?);
                }
                ["p", a, b, c] => {
                    let (Some(&i), Some(&j)) = (counts.index.get(*a), counts.index.get(*b)) else {
                        return Err(Error::parse(path, lineno, "pair refers to an unknown word"));
                    };
                    counts.pair_counts.insert(pair_key(i, j), num(c)?);
                }
                _ => return Err(Error::parse(path, lineno, "unrecognized record")),
            }
        }
        counts.window = window.ok_or_else(|| Error::parse(path, 0, "missing #window"))?;
        counts.total_windows =
            total.ok_or_else(|| Error::parse(path, 0, "missing #total_windows"))?;
        Ok(counts)
    }
}

/// Counts windows over the whole dataset.
pub fn count_windows(dataset: &SentenceDataset, window: usize) -> Result<CooccurrenceCounts> {
    count_windows_impl(dataset, window, None)
}

/// Like [`count_windows`], but only words in `keep` are counted. Total
/// window counts are unaffected, so probabilities agree with the full
/// count for every kept word and pair.
pub fn count_windows_for(
    dataset: &SentenceDataset,
    window: usize,
    keep: &HashSet<String>,
) -> Result<CooccurrenceCounts> {
    count_windows_impl(dataset, window, Some(keep))
}

fn count_windows_impl(
    dataset: &SentenceDataset,
    window: usize,
    keep: Option<&HashSet<String>>,
) -> Result<CooccurrenceCounts> {
    if window < 2 {
        return Err(Error::Usage("window must be at least 2".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Data("cannot count windows over an empty dataset".into()));
    }
    let mut index: HashMap<String, u32> = HashMap::new();
    let mut words: Vec<String> = Vec::new();
    let encoded: Vec<Vec<Option<u32>>> = dataset
        .sentences
        .iter()
        .map(|s| {
            s.tokens
                .iter()
                .map(|t| {
                    if keep.is_some_and(|k| !k.contains(t)) {
                        return None;
                    }
                    Some(*index.entry(t.clone()).or_insert_with(|| {
                        words.push(t.clone());
                        (words.len() - 1) as u32
                    }))
                })
                .collect()
        })
        .collect();

    let partial = encoded
        .par_iter()
        .fold(Partial::default, |mut acc, sentence| {
            let n_windows = sentence.len().saturating_sub(window) + 1;
            let mut distinct: Vec<u32> = Vec::with_capacity(window);
            for start in 0..n_windows {
                let end = (start + window).min(sentence.len());
                distinct.clear();
                distinct.extend(sentence[start..end].iter().flatten().copied());
                distinct.sort_unstable();
                distinct.dedup();
                acc.windows += 1;
                for (i, &a) in distinct.iter().enumerate() {
                    *acc.words.entry(a).or_default() += 1;
                    for &b in &distinct[i + 1..] {
                        *acc.pairs.entry(pair_key(a, b)).or_default() += 1;
                    }
                }
            }
            acc
        })
        .reduce(Partial::default, Partial::merge);

    let mut word_counts = vec![0u64; words.len()];
    for (w, c) in partial.words {
        word_counts[w as usize] = c;
    }
    Ok(CooccurrenceCounts {
        window,
        total_windows: partial.windows,
        index,
        words,
        word_counts,
        pair_counts: partial.pairs,
    })
}

fn probabilities(counts: &CooccurrenceCounts, a: &str, b: &str) -> (f64, f64, f64) {
    let t = counts.total_windows as f64;
    (
        counts.word_count(a) as f64 / t,
        counts.word_count(b) as f64 / t,
        counts.pair_count(a, b) as f64 / t,
    )
}

/// `log((P(a, b) + eps) / (P(a) P(b)))`. A zero marginal is replaced by
/// `eps` so the value stays finite.
pub fn pmi(counts: &CooccurrenceCounts, a: &str, b: &str, epsilon: f64) -> f64 {
    let (pa, pb, pab) = probabilities(counts, a, b);
    let floor = |p: f64| if p > 0.0 { p } else { epsilon };
    ((pab + epsilon) / (floor(pa) * floor(pb))).ln()
}

/// `(PMI / -log(P(a, b) + eps))^gamma`. A pair with `P(a, b) + eps >= 1`
/// co-occurs in every window and is assigned 1.
pub fn npmi(counts: &CooccurrenceCounts, a: &str, b: &str, epsilon: f64, gamma: f64) -> f64 {
    let (_, _, pab) = probabilities(counts, a, b);
    if pab + epsilon >= 1.0 {
        return 1.0;
    }
    let ratio = pmi(counts, a, b, epsilon) / -(pab + epsilon).ln();
    if gamma == 1.0 {
        ratio
    } else {
        ratio.signum() * ratio.abs().powf(gamma)
    }
}

fn check_distinct(words: &[String]) -> Result<()> {
    if words.len() < 2 {
        return Err(Error::Data("a topic needs at least 2 top words".into()));
    }
    let mut seen = HashSet::new();
    for w in words {
        if !seen.insert(w.as_str()) {
            return Err(Error::Data(format!("duplicate top word `{w}`")));
        }
    }
    Ok(())
}

fn mean_over_pairs(words: &[String], f: impl Fn(&str, &str) -> f64) -> f64 {
    let n = words.len();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += f(&words[i], &words[j]);
        }
    }
    2.0 * sum / (n * (n - 1)) as f64
}

pub fn coherence_pmi(
    counts: &CooccurrenceCounts,
    top_words: &[String],
    config: &CoherenceConfig,
) -> Result<f64> {
    check_distinct(top_words)?;
    Ok(mean_over_pairs(top_words, |a, b| pmi(counts, a, b, config.epsilon)))
}

pub fn coherence_npmi(
    counts: &CooccurrenceCounts,
    top_words: &[String],
    config: &CoherenceConfig,
) -> Result<f64> {
    check_distinct(top_words)?;
    Ok(mean_over_pairs(top_words, |a, b| {
        npmi(counts, a, b, config.epsilon, config.gamma)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspectCoherence {
    pub aspect_id: usize,
    pub c_pmi: f64,
    pub c_npmi: f64,
    /// Top words that never occur in the reference corpus.
    pub unseen: Vec<String>,
    /// Pairs present in every window (NPMI fixed at 1).
    pub saturated_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceReport {
    pub config: CoherenceConfig,
    pub aspects: Vec<AspectCoherence>,
    pub mean_pmi: f64,
    pub mean_npmi: f64,
}

impl CoherenceReport {
    /// `threshold,model,aspect_id,c_pmi,c_npmi` rows plus a `mean` row,
    /// without the header line.
    pub fn csv_rows(&self, threshold: f64, model: &str) -> String {
        let mut out = String::new();
        for a in &self.aspects {
            let _ = writeln!(
                out,
                "{},{model},{},{:.6},{:.6}",
                util::format_threshold(threshold),
                a.aspect_id, a.c_pmi, a.c_npmi
            );
        }
        let _ = writeln!(
            out,
            "{},{model},mean,{:.6},{:.6}",
            util::format_threshold(threshold),
            self.mean_pmi, self.mean_npmi
        );
        out
    }

    pub const CSV_HEADER: &'static str = "threshold,model,aspect_id,c_pmi,c_npmi\n";

    pub fn to_csv(&self, threshold: f64, model: &str) -> String {
        format!("{}{}", Self::CSV_HEADER, self.csv_rows(threshold, model))
    }
}

/// The top-`config.top_n` words of every aspect in `table`.
pub fn table_words(table: &AspectTable, config: &CoherenceConfig) -> Vec<Vec<String>> {
    table
        .aspects
        .iter()
        .map(|a| a.iter().take(config.top_n).map(|(w, _)| w.clone()).collect())
        .collect()
}

/// Scores every aspect of `table` against precomputed reference counts.
pub fn evaluate_with_counts(
    table: &AspectTable,
    counts: &CooccurrenceCounts,
    config: &CoherenceConfig,
) -> Result<CoherenceReport> {
    config.validate()?;
    let topics = table_words(table, config);
    if topics.iter().all(|t| t.is_empty()) {
        return Err(Error::Data("aspect table has no words".into()));
    }
    let mut aspects = Vec::with_capacity(topics.len());
    for (aspect_id, words) in topics.iter().enumerate() {
        let c_pmi = coherence_pmi(counts, words, config)?;
        let c_npmi = coherence_npmi(counts, words, config)?;
        let unseen = words.iter().filter(|w| !counts.contains(w)).cloned().collect();
        let t = counts.total_windows() as f64;
        let mut saturated_pairs = 0;
        for i in 0..words.len() {
            for j in i + 1..words.len() {
                if counts.pair_count(&words[i], &words[j]) as f64 / t + config.epsilon >= 1.0 {
                    saturated_pairs += 1;
                }
            }
        }
        aspects.push(AspectCoherence {
            aspect_id,
            c_pmi,
            c_npmi,
            unseen,
            saturated_pairs,
        });
    }
    let k = aspects.len() as f64;
    let mean_pmi = aspects.iter().map(|a| a.c_pmi).sum::<f64>() / k;
    let mean_npmi = aspects.iter().map(|a| a.c_npmi).sum::<f64>() / k;
    Ok(CoherenceReport {
        config: config.clone(),
        aspects,
        mean_pmi,
        mean_npmi,
    })
}

/// Counts the reference corpus (restricted to the table's words) and scores
/// the table.
pub fn evaluate(
    table: &AspectTable,
    reference: &SentenceDataset,
    config: &CoherenceConfig,
) -> Result<CoherenceReport> {
    config.validate()?;
    let keep: HashSet<String> = table_words(table, config).into_iter().flatten().collect();
    let counts = count_windows_for(reference, config.window, &keep)?;
    evaluate_with_counts(table, &counts, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;

    fn ds(sents: &[&[&str]]) -> SentenceDataset {
        SentenceDataset::new(
            "t",
            sents
                .iter()
                .enumerate()
                .map(|(i, toks)| Sentence {
                    sent_id: i.to_string(),
                    doc_id: i.to_string(),
                    domain: "g".into(),
                    tokens: toks.iter().map(|t| t.to_string()).collect(),
                })
                .collect(),
        )
    }

    fn words(ws: &[&str]) -> Vec<String> {
        ws.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn short_sentence_is_one_window() {
        let c = count_windows(&ds(&[&["a", "b"]]), 10).unwrap();
        assert_eq!(c.total_windows(), 1);
        assert_eq!(c.word_count("a"), 1);
        assert_eq!(c.word_count("b"), 1);
        assert_eq!(c.pair_count("a", "b"), 1);
    }

    #[test]
    fn repeated_word_counted_once_per_window() {
        let c = count_windows(&ds(&[&["a", "b", "a"]]), 2).unwrap();
        assert_eq!(c.total_windows(), 2);
        assert_eq!(c.pair_count("a", "b"), 2);
        assert_eq!(c.pair_count("b", "a"), 2);
        assert_eq!(c.word_count("a"), 2);
        assert_eq!(c.word_count("b"), 2);
    }

    #[test]
    fn windows_stop_at_sentence_boundaries() {
        let c = count_windows(&ds(&[&["a", "b"], &["c", "d"]]), 10).unwrap();
        assert_eq!(c.pair_count("a", "c"), 0);
        assert_eq!(c.total_windows(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(count_windows(&SentenceDataset::default(), 10).is_err());
        assert!(count_windows(&ds(&[&["a"]]), 1).is_err());
    }

    #[test]
    fn pmi_analytic_cases() {
        let eps = 1e-10;
        // every window holds both words
        let c = count_windows(&ds(&[&["a", "b"], &["b", "a"]]), 10).unwrap();
        assert!((pmi(&c, "a", "b", eps) - (1.0f64 + eps).ln()).abs() < 1e-15);
        assert_eq!(npmi(&c, "a", "b", eps, 1.0), 1.0);

        // never together, each in half of the windows
        let c = count_windows(&ds(&[&["a", "x"], &["b", "y"]]), 10).unwrap();
        let expected = (eps / 0.25).ln();
        assert!((pmi(&c, "a", "b", eps) - expected).abs() < 1e-12);
        assert!(pmi(&c, "a", "b", eps) < -20.0);
    }

    #[test]
    fn npmi_analytic_cases() {
        let eps = 1e-10;
        // perfectly associated, P(a) = P(b) = P(a, b) = 0.5
        let c = count_windows(&ds(&[&["a", "b"], &["x", "y"]]), 10).unwrap();
        assert!((npmi(&c, "a", "b", eps, 1.0) - 1.0).abs() < 1e-8);

        // independent: P(a) = P(b) = 0.5, P(a, b) = 0.25 -> PMI ~ 0
        let c = count_windows(&ds(&[&["a", "b"], &["a", "x"], &["b", "x"], &["x", "y"]]), 10).unwrap();
        assert!(pmi(&c, "a", "b", eps).abs() < 1e-8);
        assert!(npmi(&c, "a", "b", eps, 1.0).abs() < 1e-8);
    }

    #[test]
    fn coherence_collapses_for_two_words() {
        let c = count_windows(&ds(&[&["a", "b", "c"], &["a", "c"], &["b", "d"]]), 2).unwrap();
        let cfg = CoherenceConfig::default();
        let two = words(&["a", "c"]);
        assert_eq!(coherence_pmi(&c, &two, &cfg).unwrap(), pmi(&c, "a", "c", cfg.epsilon));
        assert_eq!(coherence_npmi(&c, &two, &cfg).unwrap(), npmi(&c, "a", "c", cfg.epsilon, 1.0));
        assert!(coherence_pmi(&c, &words(&["a", "a"]), &cfg).is_err());
        assert!(coherence_pmi(&c, &words(&["a"]), &cfg).is_err());
    }

    #[test]
    fn constant_pair_values_average_to_themselves() {
        // three words, every pair co-occurs in every window
        let c = count_windows(&ds(&[&["a", "b", "c"], &["c", "b", "a", "z"]]), 10).unwrap();
        let cfg = CoherenceConfig::default();
        let v = pmi(&c, "a", "b", cfg.epsilon);
        let got = coherence_pmi(&c, &words(&["a", "b", "c"]), &cfg).unwrap();
        assert!((got - v).abs() < 1e-12);
    }

    #[test]
    fn evaluate_means_and_repetition() {
        // a and b share every window they occur in; P(a) = P(a, b) = 1/4
        let reference = ds(&[&["a", "b"], &["x", "y"], &["y", "z"], &["x", "z"]]);
        let cfg = CoherenceConfig {
            top_n: 2,
            ..CoherenceConfig::default()
        };
        let one = AspectTable {
            aspects: vec![vec![("a".into(), 1.0), ("b".into(), 0.9)]],
        };
        let r1 = evaluate(&one, &reference, &cfg).unwrap();
        let expected = ((0.25 + cfg.epsilon) / (0.25 * 0.25)).ln();
        assert!((r1.mean_pmi - expected).abs() < 1e-12);
        assert!((r1.mean_pmi - 4.0f64.ln()).abs() < 1e-8);

        let two = AspectTable {
            aspects: vec![one.aspects[0].clone(), one.aspects[0].clone()],
        };
        let r2 = evaluate(&two, &reference, &cfg).unwrap();
        assert_eq!(r2.mean_pmi, r1.mean_pmi);
        assert_eq!(r2.mean_npmi, r1.mean_npmi);

        let empty = AspectTable { aspects: vec![vec![]] };
        assert!(evaluate(&empty, &reference, &cfg).is_err());
    }

    #[test]
    fn unseen_words_are_reported() {
        let reference = ds(&[&["a", "b"]]);
        let table = AspectTable {
            aspects: vec![vec![("a".into(), 1.0), ("q".into(), 0.5)]],
        };
        let r = evaluate(&table, &reference, &CoherenceConfig::default()).unwrap();
        assert_eq!(r.aspects[0].unseen, ["q"]);
        assert!(r.mean_pmi.is_finite());
    }

    #[test]
    fn counts_cache_roundtrip_and_restriction() {
        let reference = ds(&[&["a", "b", "c", "a", "d"], &["c", "d"]]);
        let full = count_windows(&reference, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("counts.tsv");
        full.write_tsv(&p).unwrap();
        assert_eq!(CooccurrenceCounts::read_tsv(&p).unwrap(), full);

        let keep: HashSet<String> = ["a", "c"].iter().map(|s| s.to_string()).collect();
        let part = count_windows_for(&reference, 3, &keep).unwrap();
        assert_eq!(part.total_windows(), full.total_windows());
        assert_eq!(part.pair_count("a", "c"), full.pair_count("a", "c"));
        assert_eq!(part.word_count("c"), full.word_count("c"));
        assert_eq!(part.word_count("b"), 0);
    }

    #[test]
    fn report_csv_layout() {
        let reference = ds(&[&["a", "b"], &["a", "c"]]);
        let table = AspectTable {
            aspects: vec![vec![("a".into(), 1.0), ("b".into(), 0.5)]],
        };
        let r = evaluate(&table, &reference, &CoherenceConfig::default()).unwrap();
        let csv = r.to_csv(0.2, "abae");
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "threshold,model,aspect_id,c_pmi,c_npmi");
        assert!(lines[1].starts_with("0.2,abae,0,"));
        assert!(lines[2].starts_with("0.2,abae,mean,"));
    }
}
