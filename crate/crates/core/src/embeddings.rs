//! Skip-gram negative-sampling word vectors and k-means over them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use log::info;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{SentenceDataset, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::util::{self, sigmoid};

#[derive(Debug, Clone, PartialEq)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub min_count: u64,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Rows are rescaled to this norm whenever an update exceeds it.
    pub max_norm: f64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        Self {
            dim: 200,
            window: 10,
            negatives: 5,
            min_count: 2,
            epochs: 5,
            lr_start: 0.025,
            lr_end: 1e-4,
            seed: 1,
            max_norm: 100.0,
        }
    }
}

impl SgnsConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.negatives == 0 || self.epochs == 0 {
            return Err(Error::Usage(
                "embedding dim, window, negatives and epochs must be positive".into(),
            ));
        }
        if self.min_count == 0 || !(self.lr_start > 0.0) || !(self.lr_end > 0.0) || !(self.max_norm > 0.0)
        {
            return Err(Error::Usage("min_count, learning rates and max_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One `dim`-vector per vocabulary entry; the `<pad>` row is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vocab: Arc<Vocabulary>,
    pub vectors: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// `k x dim` cluster centers.
    pub centers: Array2<f64>,
    /// Cluster of each clustered point, in input order.
    pub assignment: Vec<usize>,
    /// Sum of squared distances after each assignment step; the last entry
    /// belongs to the final assignment.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl Centroids {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().unwrap_or(&0.0)
    }
}

impl EmbeddingMatrix {
    pub fn new(vocab: Arc<Vocabulary>, vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() != vocab.len() {
            return Err(Error::Data(format!(
                "embedding rows ({}) do not match vocabulary size ({})",
                vectors.nrows(),
                vocab.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding entry".into()));
        }
        Ok(Self { vocab, vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, id: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(id)
    }

    /// Word2vec text format: `|V| d` header, then `token v1 .. vd` with six
    /// decimals.
    pub fn to_word2vec(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.vectors.nrows(), self.dim());
        for (id, row) in self.vectors.outer_iter().enumerate() {
            out.push_str(self.vocab.token(id));
            for v in row {
                let _ = write!(out, " {v:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_word2vec(&self, path: &Path) -> Result<()> {
        util::write_string(path, &self.to_word2vec())
    }

    /// Loads a word2vec text file and aligns its rows with `vocab`. Every
    /// vocabulary token must be present.
    pub fn read_word2vec(path: &Path, vocab: Arc<Vocabulary>) -> Result<Self> {
        let text = util::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(path, 1, "empty file"))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::parse(path, 1, "bad header")))
            .collect::<Result<_>>()?;
        let [rows, dim] = dims[..] else {
            return Err(Error::parse(path, 1, "header must be `rows dim`"));
        };
        let mut found: HashMap<&str, Vec<f64>> = HashMap::with_capacity(rows);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let mut parts = line.split(' ');
            let token = parts.next().unwrap_or_default();
            let values: Vec<f64> = parts
                .map(|s| s.parse().map_err(|_| Error::parse(path, lineno, "bad float")))
                .collect::<Result<_>>()?;
            if values.len() != dim {
                return Err(Error::parse(path, lineno, format!("expected {dim} values")));
            }
            found.insert(token, values);
        }
        if found.len() != rows {
            return Err(Error::parse(path, rows + 1, "row count does not match header"));
        }
        let mut vectors = Array2::zeros((vocab.len(), dim));
        for (id, token) in vocab.tokens().iter().enumerate() {
            let values = found.get(token.as_str()).ok_or_else(|| {
                Error::Data(format!("{}: no vector for `{token}`", path.display()))
            })?;
            vectors.row_mut(id).assign(&ArrayView1::from(values.as_slice()));
        }
        Self::new(vocab, vectors)
    }

    /// Clusters the rows of `word_ids` (special tokens dropped) with k-means.
    /// Returns the centroids and the word ids that were clustered.
    pub fn cluster_words(
        &self,
        word_ids: &[usize],
        k: usize,
        seed: u64,
        max_iter: usize,
        tol: f64,
    ) -> Result<(Centroids, Vec<usize>)> {
        let ids: Vec<usize> = word_ids
            .iter()
            .copied()
            .filter(|&id| !Vocabulary::is_special(id))
            .collect();
        let points = self.vectors.select(Axis(0), &ids);
        let centroids = kmeans(points.view(), k, seed, max_iter, tol)?;
        Ok((centroids, ids))
    }

    /// K-means over every non-special word.
    pub fn cluster_all(&self, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<Centroids> {
        let ids: Vec<usize> = (0..self.vocab.len()).collect();
        self.cluster_words(&ids, k, seed, max_iter, tol).map(|(c, _)| c)
    }
}

/// Draws ids proportional to `freq^0.75` from a cumulative table.
struct NoiseSampler {
    cumulative: Vec<f64>,
    ids: Vec<usize>,
}

impl NoiseSampler {
    fn new(vocab: &Vocabulary) -> Self {
        let mut cumulative = Vec::new();
        let mut ids = Vec::new();
        let mut total = 0.0;
        for id in 0..vocab.len() {
            let f = vocab.frequency(id);
            if id == PAD_ID || f == 0 {
                continue;
            }
            total += (f as f64).powf(0.75);
            cumulative.push(total);
            ids.push(id);
        }
        Self { cumulative, ids }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty noise table");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.ids[i.min(self.ids.len() - 1)]
    }
}

fn clip_row(row: &mut [f64], max_norm: f64) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        row.iter_mut().for_each(|v| *v *= s);
    }
}

/// Trains skip-gram vectors with negative sampling. Single-threaded and
/// seeded, so repeated runs are identical. Returns the input vectors and
/// the mean pair loss of every epoch.
pub fn train_sgns(
    dataset: &SentenceDataset,
    vocab: Arc<Vocabulary>,
    config: &SgnsConfig,
) -> Result<(EmbeddingMatrix, Vec<f64>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train embeddings on an empty dataset".into()));
    }
    if vocab.regular_len() < 2 {
        return Err(Error::Data(format!(
            "vocabulary has {} regular tokens; at least 2 are needed",
            vocab.regular_len()
        )));
    }
    let corpus: Vec<Vec<usize>> = dataset.sentences.iter().map(|s| vocab.encode(s)).collect();
    let total_tokens: usize = corpus.iter().map(Vec::len).sum();
    let dim = config.dim;
    let v = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = NoiseSampler::new(&vocab);

    let mut input = vec![0.0; v * dim];
    for id in 1..v {
        for x in &mut input[id * dim..(id + 1) * dim] {
            *x = (rng.random::<f64>() - 0.5) / dim as f64;
        }
    }
    let mut output = vec![0.0; v * dim];
    let mut grad = vec![0.0; dim];

    let total_steps = (config.epochs * total_tokens).max(1) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for sentence in &corpus {
            for (pos, &center) in sentence.iter().enumerate() {
                let lr = config.lr_start
                    - (config.lr_start - config.lr_end) * (step as f64 / total_steps);
                step += 1;
                if center == PAD_ID {
                    continue;
                }
                let lo = pos.saturating_sub(config.window);
                let hi = (pos + config.window + 1).min(sentence.len());
                for (cpos, &context) in sentence.iter().enumerate().take(hi).skip(lo) {
                    if cpos == pos || context == PAD_ID {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let cin = center * dim;
                    for n in 0..=config.negatives {
                        let (target, label) = if n == 0 {
                            (context, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let tout = target * dim;
                        let score: f64 = (0..dim).map(|i| input[cin + i] * output[tout + i]).sum();
                        let p = sigmoid(score);
                        loss_sum -= if label == 1.0 { p.max(1e-300).ln() } else { (1.0 - p).max(1e-300).ln() };
                        let g = (label - p) * lr;
                        for i in 0..dim {
                            grad[i] += g * output[tout + i];
                            output[tout + i] += g * input[cin + i];
                        }
                        clip_row(&mut output[tout..tout + dim], config.max_norm);
                    }
                    for i in 0..dim {
                        input[cin + i] += grad[i];
                    }
                    clip_row(&mut input[cin..cin + dim], config.max_norm);
                    pairs += 1;
                }
            }
        }
        let mean = if pairs == 0 { 0.0 } else { loss_sum / pairs as f64 };
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("SGNS loss diverged in epoch {}", epoch + 1)));
        }
        info!("sgns epoch {}: mean pair loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }
    let vectors = Array2::from_shape_vec((v, dim), input).expect("shape matches buffer");
    Ok((EmbeddingMatrix::new(vocab, vectors)?, epoch_losses))
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.outer_iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = points
        .outer_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > u {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave u just past the last positive weight
            pick.unwrap_or_else(|| dist.iter().rposition(|&d| d > 0.0).expect("positive weight"))
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.outer_iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

/// Lloyd's algorithm with k-means++ seeding. Stops when no center moves by
/// `tol` or more, or after `max_iter` updates. A cluster that ends up empty
/// is re-seeded at the point farthest from its current center.
pub fn kmeans(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<Centroids> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::Usage(format!("k-means needs 1 <= k <= {n} points, got k = {k}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite point passed to k-means".into()));
    }
    let dim = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut history = Vec::new();
    let mut iterations = 0;

    let assign = |centers: &Array2<f64>| -> Vec<(usize, f64)> {
        (0..points.nrows())
            .into_par_iter()
            .map(|i| nearest(points.row(i), centers))
            .collect()
    };

    let mut assigned = assign(&centers);
    for _ in 0..max_iter {
        history.push(assigned.iter().map(|a| a.1).sum());
        iterations += 1;

        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in points.outer_iter().zip(&assigned) {
            sums.row_mut(c).scaled_add(1.0, &p);
            counts[c] += 1;
        }
        let mut new_centers = centers.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                new_centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| assigned[a].1.total_cmp(&assigned[b].1).then(b.cmp(&a)))
                    .expect("k <= n leaves a free point");
                taken.push(far);
                new_centers.row_mut(c).assign(&points.row(far));
            }
        }
        let shift = new_centers
            .outer_iter()
            .zip(centers.outer_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        assigned = assign(&centers);
        if shift < tol {
            break;
        }
    }
    history.push(assigned.iter().map(|a| a.1).sum());
    Ok(Centroids {
        centers,
        assignment: assigned.into_iter().map(|a| a.0).collect(),
        inertia_history: history,
        iterations,
    })
}

/// Mean of the rows; handy as a k = 1 reference.
pub fn mean_row(points: ArrayView2<f64>) -> Array1<f64> {
    points.mean_axis(Axis(0)).expect("non-empty points")
}
