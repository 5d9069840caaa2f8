//! Collapsed Gibbs sampling LDA, used as the topic-model baseline.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::abae::AspectTable;
use crate::corpus::{SentenceDataset, Vocabulary};
use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq)]
pub struct LdaConfig {
    pub topics: usize,
    /// Document-topic prior; `None` means `50 / k`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        Self {
            topics: 15,
            alpha: None,
            beta: 0.01,
            iterations: 500,
            seed: 1,
        }
    }
}

impl LdaConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.topics as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub vocab: Arc<Vocabulary>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// `k x |V|` topic-word counts.
    pub topic_word: Array2<u64>,
    /// `D x k` document-topic counts over the documents that were kept.
    pub doc_topic: Array2<u64>,
    pub topic_totals: Vec<u64>,
    /// Topic of every token, per kept document.
    pub assignments: Vec<Vec<usize>>,
}

impl LdaModel {
    pub fn topics(&self) -> usize {
        self.topic_word.nrows()
    }

    pub fn total_tokens(&self) -> u64 {
        self.topic_totals.iter().sum()
    }

    /// Smoothed word distribution of `topic` over the whole vocabulary.
    pub fn topic_distribution(&self, topic: usize) -> Vec<f64> {
        let v = self.vocab.len() as f64;
        let denom = self.topic_totals[topic] as f64 + v * self.beta;
        self.topic_word
            .row(topic)
            .iter()
            .map(|&c| (c as f64 + self.beta) / denom)
            .collect()
    }

    /// The `n` most probable regular words of every topic, ties broken by
    /// vocabulary id. Scores are the smoothed probabilities.
    pub fn top_words(&self, n: usize) -> Result<AspectTable> {
        if n < 1 || n > self.vocab.regular_len() {
            return Err(Error::Usage(format!(
                "cannot take {n} top words from {} regular vocabulary words",
                self.vocab.regular_len()
            )));
        }
        let aspects = (0..self.topics())
            .map(|t| {
                let dist = self.topic_distribution(t);
                let mut ids: Vec<usize> = (0..self.vocab.len())
                    .filter(|&id| !Vocabulary::is_special(id))
                    .collect();
                ids.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
                ids.into_iter()
                    .take(n)
                    .map(|id| (self.vocab.token(id).to_string(), dist[id]))
                    .collect()
            })
            .collect();
        Ok(AspectTable { aspects })
    }

    /// Topic-word counts as `topic<TAB>word<TAB>count`, non-zero entries
    /// only, preceded by `#key<TAB>value` header lines.
    pub fn counts_tsv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#topics\t{}", self.topics());
        let _ = writeln!(out, "#alpha\t{}", self.alpha);
        let _ = writeln!(out, "#beta\t{}", self.beta);
        let _ = writeln!(out, "#seed\t{}", self.seed);
        let _ = writeln!(out, "#documents\t{}", self.doc_topic.nrows());
        let _ = writeln!(out, "#tokens\t{}", self.total_tokens());
        for (t, row) in self.topic_word.outer_iter().enumerate() {
            for (id, &c) in row.iter().enumerate() {
                if c > 0 {
                    let _ = writeln!(out, "{t}\t{}\t{c}", self.vocab.token(id));
                }
            }
        }
        out
    }

    pub fn write_counts(&self, path: &Path) -> Result<()> {
        util::write_string(path, &self.counts_tsv())
    }

    fn check_counts(&self) -> bool {
        let by_rows: u64 = self.topic_word.iter().sum();
        let by_docs: u64 = self.doc_topic.iter().sum();
        let tokens: u64 = self.assignments.iter().map(|d| d.len() as u64).sum();
        by_rows == tokens && by_docs == tokens && self.total_tokens() == tokens
    }
}

/// Runs `config.iterations` sweeps of collapsed Gibbs sampling. Special
/// token ids are dropped; documents left empty are skipped with a warning.
pub fn train_lda(documents: &[Vec<usize>], vocab: Arc<Vocabulary>, config: &LdaConfig) -> Result<LdaModel> {
    let k = config.topics;
    if k < 1 {
        return Err(Error::Usage("LDA needs at least one topic".into()));
    }
    let alpha = config.alpha();
    if !(alpha > 0.0) || !(config.beta > 0.0) {
        return Err(Error::Usage("alpha and beta must be positive".into()));
    }
    let v = vocab.len();
    let mut docs: Vec<Vec<usize>> = Vec::with_capacity(documents.len());
    let mut skipped = 0usize;
    for doc in documents {
        if let Some(bad) = doc.iter().find(|&&id| id >= v) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {v}")));
        }
        let kept: Vec<usize> = doc.iter().copied().filter(|&id| !Vocabulary::is_special(id)).collect();
        if kept.is_empty() {
            skipped += 1;
        } else {
            docs.push(kept);
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} documents with no in-vocabulary tokens");
    }
    if docs.is_empty() {
        return Err(Error::Data("no documents with in-vocabulary tokens".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut topic_word = Array2::<u64>::zeros((k, v));
    let mut doc_topic = Array2::<u64>::zeros((docs.len(), k));
    let mut totals = vec![0u64; k];
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(docs.len());
    for (d, doc) in docs.iter().enumerate() {
        let z: Vec<usize> = doc
            .iter()
            .map(|&w| {
                let t = rng.random_range(0..k);
                topic_word[[t, w]] += 1;
                doc_topic[[d, t]] += 1;
                totals[t] += 1;
                t
            })
            .collect();
        assignments.push(z);
    }

    let vbeta = v as f64 * config.beta;
    let mut weights = vec![0.0f64; k];
    for sweep in 0..config.iterations {
        for (d, doc) in docs.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let old = assignments[d][i];
                topic_word[[old, w]] -= 1;
                doc_topic[[d, old]] -= 1;
                totals[old] -= 1;
                let mut sum = 0.0;
                for t in 0..k {
                    sum += (doc_topic[[d, t]] as f64 + alpha) * (topic_word[[t, w]] as f64 + config.beta)
                        / (totals[t] as f64 + vbeta);
                    weights[t] = sum;
                }
                let u = rng.random::<f64>() * sum;
                let new = weights.iter().position(|&c| u < c).unwrap_or(k - 1);
                topic_word[[new, w]] += 1;
                doc_topic[[d, new]] += 1;
                totals[new] += 1;
                assignments[d][i] = new;
            }
        }
        if (sweep + 1) % 100 == 0 {
            info!("lda sweep {}/{}", sweep + 1, config.iterations);
        }
    }

    let model = LdaModel {
        vocab,
        alpha,
        beta: config.beta,
        seed: config.seed,
        topic_word,
        doc_topic,
        topic_totals: totals,
        assignments,
    };
    debug_assert!(model.check_counts());
    Ok(model)
}

/// Encodes every sentence of `dataset` as one LDA document.
pub fn encode_documents(dataset: &SentenceDataset, vocab: &Vocabulary) -> Vec<Vec<usize>> {
    dataset.sentences.iter().map(|s| vocab.encode(s)).collect()
}
