//! Bag-of-words logistic regression separating in-domain sentences from
//! out-of-domain ones, and threshold filtering on its scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, SentenceDataset, Vocabulary};
use crate::error::{Error, Result};
use crate::util::{self, sigmoid, softplus};

pub const DEFAULT_L2: f64 = 1.0;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
const LBFGS_MEMORY: usize = 10;

/// Sparse token counts, sorted by feature id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BowVector(pub Vec<(usize, u32)>);

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, feature: usize) -> u32 {
        self.0
            .binary_search_by_key(&feature, |&(f, _)| f)
            .map(|i| self.0[i].1)
            .unwrap_or(0)
    }

    fn dot(&self, weights: &[f64]) -> f64 {
        self.0.iter().map(|&(f, c)| weights[f] * c as f64).sum()
    }
}

/// Counts of every in-vocabulary token; unknown tokens are ignored.
pub fn featurize(sentence: &Sentence, features: &Vocabulary) -> BowVector {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for t in &sentence.tokens {
        if let Some(id) = features.id(t) {
            *counts.entry(id).or_default() += 1;
        }
    }
    BowVector(counts.into_iter().collect())
}

/// Probability threshold in `[0, 1)`. Zero keeps everything.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::Usage(format!("threshold {value} is outside [0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The sweep grid 0.0, 0.1, ..., 0.9.
    pub fn grid() -> Vec<Threshold> {
        (0..10).map(|i| Threshold(i as f64 / 10.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodModel {
    pub features: Vocabulary,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
    pub max_iter: usize,
    pub iterations: usize,
    pub id_count: usize,
    pub ood_count: usize,
}

/// Training-set quality of the in-domain class plus the optimizer trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    /// Objective value before the first step and after every iteration.
    pub loss_history: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentence {
    #[serde(flatten)]
    pub sentence: Sentence,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    pub dataset: SentenceDataset,
    pub retention: f64,
}

/// L2-regularized logistic loss over a fixed design, label 1 = in-domain.
/// The bias is not penalized.
pub(crate) struct LogisticObjective<'a> {
    pub rows: &'a [BowVector],
    pub labels: &'a [f64],
    pub l2: f64,
    pub dim: usize,
}

impl LogisticObjective<'_> {
    /// Objective and gradient at `params = [weights..., bias]`.
    pub fn eval(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let (w, b) = params.split_at(self.dim);
        let b = b[0];
        let mut grad = vec![0.0; self.dim + 1];
        let mut loss = 0.0;
        for (row, &y) in self.rows.iter().zip(self.labels) {
            let margin = row.dot(w) + b;
            // y in {0, 1}: loss = log(1 + e^m) - y m
            loss += softplus(margin) - y * margin;
            let residual = sigmoid(margin) - y;
            for &(f, c) in &row.0 {
                grad[f] += residual * c as f64;
            }
            grad[self.dim] += residual;
        }
        for (g, &wi) in grad.iter_mut().zip(w) {
            *g += self.l2 * wi;
        }
        loss += 0.5 * self.l2 * w.iter().map(|x| x * x).sum::<f64>();
        (loss, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Full-batch quasi-Newton (L-BFGS two-loop) descent with Armijo
/// backtracking. Deterministic; every accepted step strictly lowers the
/// objective.
fn minimize(
    objective: &LogisticObjective<'_>,
    max_iter: usize,
) -> Result<(Vec<f64>, usize, Vec<f64>, bool)> {
    let n = objective.dim + 1;
    let mut x = vec![0.0; n];
    let (mut f, mut g) = objective.eval(&x);
    if !f.is_finite() {
        return Err(Error::Numerical("non-finite logistic loss at start".into()));
    }
    let mut history = vec![f];
    let mut memory: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut iterations = 0;
    let mut converged = max_abs(&g) < GRADIENT_TOLERANCE;

    while !converged && iterations < max_iter {
        let mut dir = two_loop_direction(&g, &memory);
        let mut slope = dot(&dir, &g);
        if slope >= 0.0 {
            memory.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
        }
        let mut step = if memory.is_empty() {
            1.0 / max_abs(&g).max(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            let candidate: Vec<f64> = x.iter().zip(&dir).map(|(xi, d)| xi + step * d).collect();
            let (fc, gc) = objective.eval(&candidate);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope && fc < f {
                accepted = Some((candidate, fc, gc));
                break;
            }
            step *= 0.5;
        }
        let Some((nx, nf, ng)) = accepted else {
            // no decrease representable in floating point: at the optimum
            converged = true;
            break;
        };
        if !nf.is_finite() {
            return Err(Error::Numerical("non-finite logistic loss".into()));
        }
        let s: Vec<f64> = nx.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = ng.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if memory.len() == LBFGS_MEMORY {
                memory.remove(0);
            }
            memory.push((s, y, 1.0 / sy));
        }
        x = nx;
        f = nf;
        g = ng;
        iterations += 1;
        history.push(f);
        converged = max_abs(&g) < GRADIENT_TOLERANCE;
    }
    Ok((x, iterations, history, converged))
}

fn two_loop_direction(g: &[f64], memory: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.last() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Trains the in-domain classifier on all of `id` (label 1) and `ood`
/// (label 0). The feature vocabulary covers both sets with min count 1.
pub fn train_ood(
    id: &SentenceDataset,
    ood: &SentenceDataset,
    l2: f64,
    max_iter: usize,
) -> Result<(OodModel, TrainingReport)> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Data(
            "both the in-domain and the out-of-domain set need at least one sentence".into(),
        ));
    }
    if max_iter < 1 {
        return Err(Error::Usage("max_iter must be at least 1".into()));
    }
    if !(l2 >= 0.0 && l2.is_finite()) {
        return Err(Error::Usage(format!("invalid l2 strength {l2}")));
    }
    let all: Vec<Sentence> = id.sentences.iter().chain(&ood.sentences).cloned().collect();
    let features = Vocabulary::build(&all, 1)?;
    let rows: Vec<BowVector> = all.par_iter().map(|s| featurize(s, &features)).collect();
    let labels: Vec<f64> = (0..all.len())
        .map(|i| if i < id.len() { 1.0 } else { 0.0 })
        .collect();

    let objective = LogisticObjective {
        rows: &rows,
        labels: &labels,
        l2,
        dim: features.len(),
    };
    let (params, iterations, loss_history, converged) = minimize(&objective, max_iter)?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("non-finite classifier weights".into()));
    }
    let bias = params[features.len()];
    let mut weights = params;
    weights.truncate(features.len());
    let model = OodModel {
        features,
        weights,
        bias,
        l2,
        max_iter,
        iterations,
        id_count: id.len(),
        ood_count: ood.len(),
    };

    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (row, &y) in rows.iter().zip(&labels) {
        let predicted = model.score_bow(row) >= 0.5;
        let actual = y == 1.0;
        match (predicted, actual) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        if predicted == actual {
            correct += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let report = TrainingReport {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        accuracy: ratio(correct, rows.len()),
        loss_history,
        converged,
    };
    info!(
        "ood classifier: {} iterations, precision {:.3} recall {:.3} accuracy {:.3}",
        iterations, report.precision, report.recall, report.accuracy
    );
    Ok((model, report))
}

impl OodModel {
    /// Model with all-zero parameters over the given features.
    pub fn zeros(features: Vocabulary) -> Self {
        Self {
            weights: vec![0.0; features.len()],
            features,
            bias: 0.0,
            l2: DEFAULT_L2,
            max_iter: DEFAULT_MAX_ITER,
            iterations: 0,
            id_count: 0,
            ood_count: 0,
        }
    }

    fn score_bow(&self, bow: &BowVector) -> f64 {
        sigmoid(bow.dot(&self.weights) + self.bias)
    }

    /// In-domain probability `sigmoid(w . x + b)`.
    pub fn score(&self, sentence: &Sentence) -> f64 {
        self.score_bow(&featurize(sentence, &self.features))
    }

    pub fn score_dataset(&self, dataset: &SentenceDataset) -> Vec<ScoredSentence> {
        dataset
            .sentences
            .par_iter()
            .map(|s| ScoredSentence {
                sentence: s.clone(),
                score: self.score(s),
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#feature_vocab_hash\t{}", self.features.content_hash());
        let _ = writeln!(out, "#bias\t{}", self.bias);
        let _ = writeln!(out, "#l2\t{}", self.l2);
        let _ = writeln!(out, "#max_iter\t{}", self.max_iter);
        let _ = writeln!(out, "#iterations\t{}", self.iterations);
        let _ = writeln!(out, "#id_sentences\t{}", self.id_count);
        let _ = writeln!(out, "#ood_sentences\t{}", self.ood_count);
        let _ = writeln!(out, "#features\t{}", self.weights.len());
        for (i, w) in self.weights.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{w}");
        }
        out
    }

    /// Writes the model file and its feature vocabulary.
    pub fn write(&self, model_path: &Path, features_path: &Path) -> Result<()> {
        self.features.write_tsv(features_path)?;
        util::write_string(model_path, &self.to_text())
    }

    pub fn read(model_path: &Path, features_path: &Path) -> Result<Self> {
        let features = Vocabulary::read_tsv(features_path)?;
        let text = util::read_to_string(model_path)?;
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut weights = vec![f64::NAN; features.len()];
        let mut seen = 0;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(model_path, lineno, "expected two tab-separated fields"))?;
            if let Some(key) = key.strip_prefix('#') {
                header.insert(key.to_string(), value.to_string());
                continue;
            }
            let id: usize = key
                .parse()
                .map_err(|_| Error::parse(model_path, lineno, "bad feature id"))?;
            let w: f64 = value
                .parse()
                .map_err(|_| Error::parse(model_path, lineno, "bad weight"))?;
            if id >= weights.len() {
                return Err(Error::parse(model_path, lineno, "feature id out of range"));
            }
            if !w.is_finite() {
                return Err(Error::parse(model_path, lineno, "non-finite weight"));
            }
            weights[id] = w;
            seen += 1;
        }
        let get = |key: &str| {
            header
                .get(key)
                .ok_or_else(|| Error::parse(model_path, 0, format!("missing header `{key}`")))
        };
        if get("feature_vocab_hash")? != &features.content_hash() {
            return Err(Error::Data(format!(
                "{} was trained on a different feature vocabulary than {}",
                model_path.display(),
                features_path.display()
            )));
        }
        if seen != features.len() {
            return Err(Error::parse(model_path, 0, "weight count does not match features"));
        }
        let num = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::parse(model_path, 0, format!("bad header `{key}`")))
        };
        Ok(Self {
            features,
            weights,
            bias: num("bias")?,
            l2: num("l2")?,
            max_iter: num("max_iter")? as usize,
            iterations: num("iterations")? as usize,
            id_count: num("id_sentences")? as usize,
            ood_count: num("ood_sentences")? as usize,
        })
    }
}

/// Keeps the sentences whose score is at least `threshold`, in order.
pub fn filter_scored(scored: &[ScoredSentence], threshold: Threshold, source: &str) -> Filtered {
    let kept: Vec<Sentence> = scored
        .iter()
        .filter(|s| s.score >= threshold.value())
        .map(|s| s.sentence.clone())
        .collect();
    let retention = if scored.is_empty() {
        1.0
    } else {
        kept.len() as f64 / scored.len() as f64
    };
    if kept.is_empty() && !scored.is_empty() {
        warn!("threshold {} removed every sentence", threshold.value());
    }
    Filtered {
        dataset: SentenceDataset::new(format!("{source} (theta={})", threshold.value()), kept),
        retention,
    }
}

pub fn filter_dataset(dataset: &SentenceDataset, model: &OodModel, threshold: Threshold) -> Filtered {
    filter_scored(&model.score_dataset(dataset), threshold, &dataset.source)
}

/// Scored sentences as JSON lines with a 6-decimal `score` field.
pub fn scored_to_jsonl(scored: &[ScoredSentence]) -> String {
    let mut out = String::new();
    for s in scored {
        let mut line = serde_json::to_string(&s.sentence).expect("sentence serializes");
        line.pop();
        let _ = writeln!(out, "{line},\"score\":{:.6}}}", s.score);
    }
    out
}

pub fn read_scored(path: &Path) -> Result<Vec<ScoredSentence>> {
    let text = util::read_to_string(path)?;
    text.split_terminator('\n')
        .enumerate()
        .map(|(i, line)| {
            let s: ScoredSentence =
                serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if !(0.0..=1.0).contains(&s.score) {
                return Err(Error::parse(path, i + 1, "score outside [0, 1]"));
            }
            Ok(s)
        })
        .collect()
}
