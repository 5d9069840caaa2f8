//! Attention-based aspect extraction autoencoder.
//!
//! For a sentence with word vectors `w_1..w_n`:
//!
//! ```text
//! y = mean(w_i)
//! a = softmax_i(w_i . (A y))
//! z = sum_i a_i w_i
//! p = softmax(W z + b)
//! r = T^T p
//! ```
//!
//! Training minimizes a max-margin cosine reconstruction loss against the
//! mean embeddings of randomly drawn sentences, plus an orthogonality
//! penalty on the row-normalized aspect matrix. Gradients are derived by
//! hand and checked against finite differences in the tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{SentenceDataset, Vocabulary};
use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::util::{self, softmax_in_place};

/// Sentences are cut to this many tokens before training.
pub const MAX_SENTENCE_LEN: usize = 256;
const MARGIN: f64 = 1.0;
const GRADIENT_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub aspects: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub ortho_lambda: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub fine_tune_embeddings: bool,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            aspects: 15,
            negatives: 20,
            epochs: 10,
            batch_size: 256,
            ortho_lambda: 0.1,
            learning_rate: 1e-3,
            seed: 1,
            fine_tune_embeddings: false,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.aspects < 2 {
            return Err(Error::Usage("at least 2 aspects are required".into()));
        }
        if self.negatives < 1 || self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Usage("negatives, epochs and batch size must be positive".into()));
        }
        if !(self.ortho_lambda >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Usage("ortho lambda must be >= 0 and learning rate > 0".into()));
        }
        Ok(())
    }

    fn echo(&self) -> String {
        format!(
            "aspects={} negatives={} epochs={} batch_size={} ortho_lambda={} learning_rate={} seed={} fine_tune_embeddings={}",
            self.aspects,
            self.negatives,
            self.epochs,
            self.batch_size,
            self.ortho_lambda,
            self.learning_rate,
            self.seed,
            self.fine_tune_embeddings
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbaeModel {
    pub embeddings: EmbeddingMatrix,
    /// `A`, `d x d`.
    pub attention: Array2<f64>,
    /// `W`, `k x d`.
    pub aspect_logits: Array2<f64>,
    /// `b`, length `k`.
    pub aspect_bias: Array1<f64>,
    /// `T`, `k x d`; row `i` is the embedding of aspect `i`.
    pub aspects: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub ids: Vec<usize>,
    pub mean: Array1<f64>,
    /// `A y`, the attention key after the bilinear map.
    pub key: Array1<f64>,
    pub attention: Array1<f64>,
    pub sentence: Array1<f64>,
    pub aspect_probs: Array1<f64>,
    pub reconstruction: Array1<f64>,
}

/// Gradients of a scalar objective with respect to every trainable tensor.
/// Embedding gradients are kept sparse by row id.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub attention: Array2<f64>,
    pub aspect_logits: Array2<f64>,
    pub aspect_bias: Array1<f64>,
    pub aspects: Array2<f64>,
    pub embeddings: BTreeMap<usize, Array1<f64>>,
}

impl Gradients {
    fn zeros(dim: usize, k: usize) -> Self {
        Self {
            attention: Array2::zeros((dim, dim)),
            aspect_logits: Array2::zeros((k, dim)),
            aspect_bias: Array1::zeros(k),
            aspects: Array2::zeros((k, dim)),
            embeddings: BTreeMap::new(),
        }
    }

    fn add_embedding(&mut self, id: usize, scale: f64, g: &Array1<f64>) {
        self.embeddings
            .entry(id)
            .or_insert_with(|| Array1::zeros(g.len()))
            .scaled_add(scale, g);
    }

    fn add(&mut self, other: &Gradients) {
        self.attention += &other.attention;
        self.aspect_logits += &other.aspect_logits;
        self.aspect_bias += &other.aspect_bias;
        self.aspects += &other.aspects;
        for (&id, g) in &other.embeddings {
            self.add_embedding(id, 1.0, g);
        }
    }
}

/// Loss value split into its parts, with the gradient of `total`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub hinge: f64,
    pub ortho: f64,
    pub total: f64,
    pub grads: Gradients,
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    &a2 * &b2
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Backpropagates `g` through `x -> x / |x|`.
fn normalize_backward(unit: &Array1<f64>, len: f64, g: &Array1<f64>) -> Array1<f64> {
    (g - &(unit * unit.dot(g))) / len
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// `||T_n T_n^T - I||_F^2` for row-normalized `T`, with its gradient in `T`.
pub fn ortho_penalty(aspects: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let k = aspects.nrows();
    let norms: Vec<f64> = aspects.outer_iter().map(norm).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Numerical(format!("aspect row {i} has zero or non-finite norm")));
    }
    let mut unit = aspects.clone();
    for (mut row, &n) in unit.outer_iter_mut().zip(&norms) {
        row /= n;
    }
    let gram = unit.dot(&unit.t());
    let resid = &gram - &Array2::<f64>::eye(k);
    let value = resid.iter().map(|v| v * v).sum();
    let g_unit = resid.dot(&unit) * 4.0;
    let mut grad = Array2::zeros(aspects.raw_dim());
    for i in 0..k {
        let u = unit.row(i).to_owned();
        let g = g_unit.row(i).to_owned();
        grad.row_mut(i).assign(&normalize_backward(&u, norms[i], &g));
    }
    Ok((value, grad))
}

impl AbaeModel {
    /// Glorot-initialized `A` and `W`, zero `b`, and `T` drawn from the
    /// embedding rows of random regular words. `train` replaces `T` with
    /// k-means centroids.
    pub fn initialize(embeddings: EmbeddingMatrix, aspects: usize, seed: u64) -> Result<Self> {
        if aspects < 2 {
            return Err(Error::Usage("at least 2 aspects are required".into()));
        }
        let dim = embeddings.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attention = glorot(dim, dim, &mut rng);
        let aspect_logits = glorot(aspects, dim, &mut rng);
        let t = glorot(aspects, dim, &mut rng);
        Ok(Self {
            embeddings,
            attention,
            aspect_logits,
            aspect_bias: Array1::zeros(aspects),
            aspects: t,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn num_aspects(&self) -> usize {
        self.aspects.nrows()
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.embeddings.vocab
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Data("cannot encode an empty sentence".into()));
        }
        let v = self.embeddings.vocab.len();
        if let Some(bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {v}")));
        }
        Ok(())
    }

    pub fn forward(&self, ids: &[usize]) -> Result<ForwardTrace> {
        self.check_ids(ids)?;
        let n = ids.len();
        let words = self.embeddings.vectors.select(Axis(0), ids);
        let mean = words.sum_axis(Axis(0)) / n as f64;
        let key = self.attention.dot(&mean);
        let mut attention = words.dot(&key);
        softmax_in_place(attention.as_slice_mut().expect("contiguous"));
        let sentence = words.t().dot(&attention);
        let mut aspect_probs = self.aspect_logits.dot(&sentence) + &self.aspect_bias;
        softmax_in_place(aspect_probs.as_slice_mut().expect("contiguous"));
        let reconstruction = self.aspects.t().dot(&aspect_probs);
        let trace = ForwardTrace {
            ids: ids.to_vec(),
            mean,
            key,
            attention,
            sentence,
            aspect_probs,
            reconstruction,
        };
        let finite = [
            &trace.attention,
            &trace.sentence,
            &trace.aspect_probs,
            &trace.reconstruction,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Numerical("non-finite value in forward pass".into()));
        }
        Ok(trace)
    }

    fn mean_embedding(&self, ids: &[usize]) -> Array1<f64> {
        self.embeddings.vectors.select(Axis(0), ids).sum_axis(Axis(0)) / ids.len() as f64
    }

    /// Adds `scale` times the gradient of the hinge loss for one sentence to
    /// `grads` and returns the (unscaled) hinge value.
    fn accumulate_hinge(
        &self,
        ids: &[usize],
        negatives: &[Vec<usize>],
        with_embeddings: bool,
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        if negatives.is_empty() {
            return Err(Error::Usage("at least one negative sentence is required".into()));
        }
        let trace = self.forward(ids)?;
        let r_len = norm(trace.reconstruction.view());
        let z_len = norm(trace.sentence.view());
        if r_len == 0.0 {
            return Err(Error::Numerical("reconstruction has zero norm".into()));
        }
        if z_len == 0.0 {
            return Err(Error::Numerical("sentence embedding has zero norm".into()));
        }
        let r_unit = &trace.reconstruction / r_len;
        let z_unit = &trace.sentence / z_len;
        let rz = r_unit.dot(&z_unit);

        let dim = self.dim();
        let mut g_r_unit = Array1::<f64>::zeros(dim);
        let mut g_z_unit = Array1::<f64>::zeros(dim);
        let mut loss = 0.0;
        let mut neg_terms = Vec::with_capacity(negatives.len());
        for (j, neg) in negatives.iter().enumerate() {
            self.check_ids(neg)?;
            let m = self.mean_embedding(neg);
            let m_len = norm(m.view());
            if m_len == 0.0 {
                return Err(Error::Numerical(format!("negative sentence {j} has zero norm")));
            }
            let n_unit = &m / m_len;
            let h = MARGIN - rz + r_unit.dot(&n_unit);
            if h > 0.0 {
                loss += h;
                g_r_unit += &(&n_unit - &z_unit);
                g_z_unit -= &r_unit;
                neg_terms.push((j, n_unit, m_len));
            }
        }
        if neg_terms.is_empty() {
            return Ok(loss);
        }

        let g_r = normalize_backward(&r_unit, r_len, &g_r_unit);
        let mut g_z = normalize_backward(&z_unit, z_len, &g_z_unit);

        // r = T^T p
        grads
            .aspects
            .scaled_add(scale, &outer(trace.aspect_probs.view(), g_r.view()));
        let g_p = self.aspects.dot(&g_r);
        let p = &trace.aspect_probs;
        let g_q = p * &(&g_p - p.dot(&g_p));
        grads
            .aspect_logits
            .scaled_add(scale, &outer(g_q.view(), trace.sentence.view()));
        grads.aspect_bias.scaled_add(scale, &g_q);
        g_z += &self.aspect_logits.t().dot(&g_q);

        // z = sum a_i w_i, a = softmax(w_i . key), key = A y
        let words = self.embeddings.vectors.select(Axis(0), ids);
        let a = &trace.attention;
        let g_a = words.dot(&g_z);
        let g_e = a * &(&g_a - a.dot(&g_a));
        let g_key = words.t().dot(&g_e);
        grads
            .attention
            .scaled_add(scale, &outer(g_key.view(), trace.mean.view()));

        if with_embeddings {
            let g_mean = self.attention.t().dot(&g_key);
            let n = ids.len() as f64;
            for (i, &id) in ids.iter().enumerate() {
                let g_w = &g_z * a[i] + &trace.key * g_e[i] + &g_mean / n;
                grads.add_embedding(id, scale, &g_w);
            }
            for (j, n_unit, m_len) in neg_terms {
                let g_m = normalize_backward(&n_unit, m_len, &r_unit);
                let len = negatives[j].len() as f64;
                for &id in &negatives[j] {
                    grads.add_embedding(id, scale / len, &g_m);
                }
            }
        }
        Ok(loss)
    }

    /// Max-margin reconstruction loss of one sentence against `negatives`
    /// plus `lambda` times the orthogonality penalty, with gradients for
    /// `A`, `W`, `b`, `T` and, when `with_embeddings` is set, the embedding
    /// rows involved.
    pub fn loss(
        &self,
        ids: &[usize],
        negatives: &[Vec<usize>],
        lambda: f64,
        with_embeddings: bool,
    ) -> Result<LossOutput> {
        let mut grads = Gradients::zeros(self.dim(), self.num_aspects());
        let hinge = self.accumulate_hinge(ids, negatives, with_embeddings, 1.0, &mut grads)?;
        let (ortho, g_t) = ortho_penalty(&self.aspects)?;
        grads.aspects.scaled_add(lambda, &g_t);
        Ok(LossOutput {
            hinge,
            ortho,
            total: hinge + lambda * ortho,
            grads,
        })
    }

    /// Most probable aspect (lowest id on ties) and the full distribution.
    pub fn assign_aspect(&self, ids: &[usize]) -> Result<(usize, Array1<f64>)> {
        let trace = self.forward(ids)?;
        let p = trace.aspect_probs;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Ok((best, p))
    }

    /// The `n` regular words closest in cosine to each aspect row, ties
    /// broken by vocabulary id.
    pub fn extract_aspects(&self, n: usize) -> Result<AspectTable> {
        let vocab = &self.embeddings.vocab;
        if n < 1 || n > vocab.regular_len() {
            return Err(Error::Usage(format!(
                "cannot take {n} top words from {} regular vocabulary words",
                vocab.regular_len()
            )));
        }
        let candidates: Vec<(usize, f64)> = (0..vocab.len())
            .filter(|&id| !Vocabulary::is_special(id))
            .map(|id| (id, norm(self.embeddings.row(id))))
            .collect();
        let aspects = self
            .aspects
            .outer_iter()
            .map(|t| {
                let t_len = norm(t);
                let mut scored: Vec<(usize, f64)> = candidates
                    .iter()
                    .map(|&(id, len)| {
                        let cos = if len == 0.0 || t_len == 0.0 {
                            0.0
                        } else {
                            t.dot(&self.embeddings.row(id)) / (len * t_len)
                        };
                        (id, cos)
                    })
                    .collect();
                scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                scored
                    .into_iter()
                    .take(n)
                    .map(|(id, s)| (vocab.token(id).to_string(), s))
                    .collect()
            })
            .collect();
        Ok(AspectTable { aspects })
    }

    /// Encodes a dataset for training: vocabulary ids, truncated to
    /// [`MAX_SENTENCE_LEN`].
    pub fn encode_dataset(&self, dataset: &SentenceDataset) -> Vec<Vec<usize>> {
        dataset
            .sentences
            .iter()
            .map(|s| {
                let mut ids = self.embeddings.vocab.encode(s);
                ids.truncate(MAX_SENTENCE_LEN);
                ids
            })
            .filter(|ids| !ids.is_empty())
            .collect()
    }

    pub fn write_checkpoint(
        &self,
        path: &Path,
        vocab_ref: &str,
        embeddings_ref: &str,
        config: &TrainConfig,
    ) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "#abae-checkpoint\t1");
        let _ = writeln!(out, "vocab_size\t{}", self.embeddings.vocab.len());
        let _ = writeln!(out, "dim\t{}", self.dim());
        let _ = writeln!(out, "aspects\t{}", self.num_aspects());
        let _ = writeln!(out, "vocab\t{vocab_ref}");
        let _ = writeln!(out, "embeddings\t{embeddings_ref}");
        let _ = writeln!(out, "config\t{}", config.echo());
        let mut block = |name: &str, rows: Vec<ArrayView1<f64>>| {
            let _ = writeln!(out, "{name}\t{}", rows.len());
            for row in rows {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        };
        block("A", self.attention.outer_iter().collect());
        block("W", self.aspect_logits.outer_iter().collect());
        block("b", vec![self.aspect_bias.view()]);
        block("T", self.aspects.outer_iter().collect());
        if config.fine_tune_embeddings {
            block("E", self.embeddings.vectors.outer_iter().collect());
        }
        util::write_string(path, &out)
    }

    /// Loads a checkpoint; relative vocabulary and embedding references are
    /// resolved against the checkpoint's directory.
    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let text = util::read_to_string(path)?;
        let mut lines = text.lines().enumerate().peekable();
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut blocks: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        while let Some((i, line)) = lines.next() {
            let lineno = i + 1;
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, lineno, "expected key<TAB>value"))?;
            if matches!(key, "A" | "W" | "b" | "T" | "E") {
                let rows: usize = value
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, "bad row count"))?;
                let mut block = Vec::with_capacity(rows);
                for _ in 0..rows {
                    let (j, row) = lines
                        .next()
                        .ok_or_else(|| Error::parse(path, lineno, "truncated block"))?;
                    let values = row
                        .split(' ')
                        .map(|s| s.parse().map_err(|_| Error::parse(path, j + 1, "bad float")))
                        .collect::<Result<Vec<f64>>>()?;
                    block.push(values);
                }
                blocks.insert(key.to_string(), block);
            } else {
                header.insert(key.to_string(), value.to_string());
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| Error::parse(path, 0, format!("missing `{k}`")))
        };
        let dim: usize = get("dim")?.parse().map_err(|_| Error::parse(path, 0, "bad dim"))?;
        let k: usize = get("aspects")?
            .parse()
            .map_err(|_| Error::parse(path, 0, "bad aspects"))?;
        let resolve = |r: &str| -> PathBuf {
            let p = PathBuf::from(r);
            if p.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p
            }
        };
        let vocab = Arc::new(Vocabulary::read_tsv(&resolve(get("vocab")?))?);
        let mut embeddings = EmbeddingMatrix::read_word2vec(&resolve(get("embeddings")?), vocab.clone())?;
        let matrix = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let block = blocks
                .get(name)
                .ok_or_else(|| Error::parse(path, 0, format!("missing block {name}")))?;
            if block.len() != rows || block.iter().any(|r| r.len() != cols) {
                return Err(Error::parse(path, 0, format!("block {name} has the wrong shape")));
            }
            Ok(Array2::from_shape_vec((rows, cols), block.concat()).expect("checked shape"))
        };
        if blocks.contains_key("E") {
            embeddings = EmbeddingMatrix::new(vocab.clone(), matrix("E", vocab.len(), dim)?)?;
        }
        if embeddings.dim() != dim {
            return Err(Error::Data("checkpoint and embedding dimensions differ".into()));
        }
        let model = Self {
            embeddings,
            attention: matrix("A", dim, dim)?,
            aspect_logits: matrix("W", k, dim)?,
            aspect_bias: matrix("b", 1, k)?.row(0).to_owned(),
            aspects: matrix("T", k, dim)?,
        };
        Ok(model)
    }
}

struct Adam {
    lr: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            lr,
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates `param` from `grad`, restricted to `rows` when given.
    fn update(&mut self, slot: usize, param: &mut Array2<f64>, grad: &Array2<f64>) {
        let bc1 = 1.0 - Self::BETA1.powi(self.step);
        let bc2 = 1.0 - Self::BETA2.powi(self.step);
        let lr = self.lr;
        ndarray::Zip::from(param)
            .and(grad)
            .and(&mut self.m[slot])
            .and(&mut self.v[slot])
            .for_each(|p, &g, m, v| {
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + Self::EPS);
            });
    }
}

/// Trains `model` on `dataset`. `T` is first set to k-means centroids of the
/// embeddings of the words occurring in the dataset. Returns the trained
/// model and the mean batch objective of every epoch.
pub fn train(
    mut model: AbaeModel,
    dataset: &SentenceDataset,
    config: &TrainConfig,
) -> Result<(AbaeModel, Vec<f64>)> {
    config.validate()?;
    if config.aspects != model.num_aspects() {
        return Err(Error::Usage(format!(
            "model has {} aspects but the config asks for {}",
            model.num_aspects(),
            config.aspects
        )));
    }
    let corpus = model.encode_dataset(dataset);
    if corpus.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if corpus.len() < config.batch_size {
        warn!(
            "dataset has {} sentences, fewer than the batch size {}; training with one batch",
            corpus.len(),
            config.batch_size
        );
    }

    let mut present = vec![false; model.embeddings.vocab.len()];
    corpus.iter().flatten().for_each(|&id| present[id] = true);
    let mut words: Vec<usize> = (0..present.len())
        .filter(|&id| present[id] && !Vocabulary::is_special(id))
        .collect();
    if words.len() < config.aspects {
        warn!(
            "only {} distinct words in the dataset for {} aspects; clustering the whole vocabulary",
            words.len(),
            config.aspects
        );
        words = (0..present.len()).filter(|&id| !Vocabulary::is_special(id)).collect();
    }
    let (centroids, _) = model.embeddings.cluster_words(
        &words,
        config.aspects,
        config.seed,
        config.kmeans_max_iter,
        config.kmeans_tol,
    )?;
    model.aspects = centroids.centers;

    let dim = model.dim();
    let k = model.num_aspects();
    let mut shapes = vec![(dim, dim), (k, dim), (1, k), (k, dim)];
    if config.fine_tune_embeddings {
        shapes.push(model.embeddings.vectors.dim());
    }
    let mut adam = Adam::new(config.learning_rate, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_abae);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let negatives: Vec<Vec<usize>> = batch
                .iter()
                .map(|_| {
                    (0..config.negatives)
                        .map(|_| rng.random_range(0..corpus.len()))
                        .collect()
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let model_ref = &model;
            let partials: Vec<Result<(f64, Gradients)>> = batch
                .par_chunks(GRADIENT_CHUNK)
                .zip(negatives.par_chunks(GRADIENT_CHUNK))
                .map(|(idx, negs)| {
                    let mut grads = Gradients::zeros(dim, k);
                    let mut loss = 0.0;
                    for (&i, neg) in idx.iter().zip(negs) {
                        let neg_ids: Vec<Vec<usize>> =
                            neg.iter().map(|&j| corpus[j].clone()).collect();
                        loss += model_ref
                            .accumulate_hinge(
                                &corpus[i],
                                &neg_ids,
                                config.fine_tune_embeddings,
                                scale,
                                &mut grads,
                            )
                            .map_err(|e| {
                                Error::Numerical(format!(
                                    "sentence {}: {e}",
                                    dataset.sentences.get(i).map_or("?", |s| s.sent_id.as_str())
                                ))
                            })?;
                    }
                    Ok((loss, grads))
                })
                .collect();
            let mut grads = Gradients::zeros(dim, k);
            let mut hinge = 0.0;
            for part in partials {
                let (l, g) = part?;
                hinge += l;
                grads.add(&g);
            }
            hinge *= scale;
            let (ortho, g_t) = ortho_penalty(&model.aspects)?;
            grads.aspects.scaled_add(config.ortho_lambda, &g_t);
            let objective = hinge + config.ortho_lambda * ortho;
            if !objective.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss in epoch {}", epoch + 1)));
            }
            epoch_loss += objective;
            batches += 1;

            adam.begin_step();
            adam.update(0, &mut model.attention, &grads.attention);
            adam.update(1, &mut model.aspect_logits, &grads.aspect_logits);
            let mut bias = model.aspect_bias.clone().insert_axis(Axis(0));
            adam.update(2, &mut bias, &grads.aspect_bias.clone().insert_axis(Axis(0)));
            model.aspect_bias = bias.row(0).to_owned();
            adam.update(3, &mut model.aspects, &grads.aspects);
            if config.fine_tune_embeddings {
                let mut dense = Array2::zeros(model.embeddings.vectors.raw_dim());
                for (&id, g) in &grads.embeddings {
                    if id != crate::corpus::PAD_ID {
                        dense.row_mut(id).assign(g);
                    }
                }
                adam.update(4, &mut model.embeddings.vectors, &dense);
            }
        }
        let mean = epoch_loss / batches as f64;
        info!("abae epoch {}: mean loss {mean:.5}", epoch + 1);
        history.push(mean);
    }
    let finite = model.attention.iter().all(|v| v.is_finite())
        && model.aspect_logits.iter().all(|v| v.is_finite())
        && model.aspects.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numerical("training produced non-finite parameters".into()));
    }
    Ok((model, history))
}

/// Top words per aspect. Row `i` holds `(word, score)` pairs, best first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AspectTable {
    pub aspects: Vec<Vec<(String, f64)>>,
}

impl AspectTable {
    /// `aspect_id<TAB>rank<TAB>word<TAB>score` with 1-based ranks.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (a, words) in self.aspects.iter().enumerate() {
            for (rank, (w, s)) in words.iter().enumerate() {
                let _ = writeln!(out, "{a}\t{}\t{w}\t{s:.6}", rank + 1);
            }
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        util::write_string(path, &self.to_tsv())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = util::read_to_string(path)?;
        let mut aspects: Vec<Vec<(String, f64)>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::parse(path, lineno, "expected aspect_id, rank, word, score"));
            }
            let a: usize = f[0].parse().map_err(|_| Error::parse(path, lineno, "bad aspect id"))?;
            let rank: usize = f[1].parse().map_err(|_| Error::parse(path, lineno, "bad rank"))?;
            let score: f64 = f[3].parse().map_err(|_| Error::parse(path, lineno, "bad score"))?;
            if a >= aspects.len() {
                aspects.resize(a + 1, Vec::new());
            }
            if rank != aspects[a].len() + 1 {
                return Err(Error::parse(path, lineno, "ranks must be consecutive from 1"));
            }
            aspects[a].push((f[2].to_string(), score));
        }
        Ok(Self { aspects })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;
    use ndarray::array;

    fn vocab_of(words: &[&str]) -> Arc<Vocabulary> {
        let s = Sentence {
            sent_id: "s".into(),
            doc_id: "d".into(),
            domain: "g".into(),
            tokens: words.iter().map(|w| w.to_string()).collect(),
        };
        Arc::new(Vocabulary::build(&[s], 1).unwrap())
    }

    fn random_model(dim: usize, k: usize, words: usize, seed: u64) -> AbaeModel {
        let names: Vec<String> = (0..words).map(|i| format!("w{i:02}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let vocab = vocab_of(&refs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Array2::from_shape_fn((vocab.len(), dim), |_| rng.random_range(-1.0..1.0));
        vectors.row_mut(0).fill(0.0);
        let emb = EmbeddingMatrix::new(vocab, vectors).unwrap();
        let mut m = AbaeModel::initialize(emb, k, seed).unwrap();
        m.aspect_bias = Array1::from_shape_fn(k, |_| rng.random_range(-0.5..0.5));
        m
    }

    #[test]
    fn single_word_attends_fully() {
        let m = random_model(4, 3, 5, 1);
        let t = m.forward(&[4]).unwrap();
        assert_eq!(t.attention.len(), 1);
        assert!((t.attention[0] - 1.0).abs() < 1e-15);
        for (a, b) in t.sentence.iter().zip(m.embeddings.row(4).iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_logits_split_attention_evenly() {
        let vocab = vocab_of(&["u", "v"]);
        let mut vectors = Array2::zeros((vocab.len(), 2));
        vectors.row_mut(3).assign(&array![1.0, 0.0]);
        vectors.row_mut(4).assign(&array![0.0, 1.0]);
        let emb = EmbeddingMatrix::new(vocab, vectors).unwrap();
        let mut m = AbaeModel::initialize(emb, 2, 0).unwrap();
        m.attention = Array2::eye(2);
        let t = m.forward(&[3, 4]).unwrap();
        assert!((t.attention[0] - 0.5).abs() < 1e-15);
        assert!((t.attention[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_empty_and_unknown_ids() {
        let m = random_model(4, 3, 5, 1);
        assert!(m.forward(&[]).is_err());
        assert!(m.forward(&[99]).is_err());
    }

    #[test]
    fn identical_negative_sits_on_the_margin() {
        let m = random_model(6, 3, 8, 2);
        let s = vec![3usize];
        // a single-word sentence: the negative mean equals z exactly
        let out = m.loss(&s, &[s.clone(), s.clone()], 0.0, false).unwrap();
        assert!((out.hinge - 2.0).abs() < 1e-12, "hinge {}", out.hinge);
    }

    #[test]
    fn orthonormal_aspects_have_zero_penalty() {
        let t = array![[2.0, 0.0, 0.0], [0.0, -0.5, 0.0]];
        let (p, g) = ortho_penalty(&t).unwrap();
        assert!(p.abs() < 1e-15);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
        let t = array![[1.0, 1.0], [1.0, 0.0]];
        assert!(ortho_penalty(&t).unwrap().0 > 0.0);
        assert!(ortho_penalty(&array![[0.0, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn aspect_matching_embedding_ranks_its_word_first() {
        let m0 = random_model(5, 3, 10, 3);
        let mut m = m0.clone();
        let id = m.vocab().id("w07").unwrap();
        let row = m.embeddings.row(id).to_owned();
        m.aspects.row_mut(1).assign(&row);
        let table = m.extract_aspects(4).unwrap();
        assert_eq!(table.aspects[1][0].0, "w07");
        assert!((table.aspects[1][0].1 - 1.0).abs() < 1e-12);
        assert!(table.aspects.iter().all(|a| a.len() == 4));
        assert!(table.aspects.iter().flatten().all(|(w, _)| !w.starts_with('<')));
        assert!(m.extract_aspects(11).is_err());
        assert!(m.extract_aspects(0).is_err());
    }

    #[test]
    fn hand_placed_cosines_rank_as_computed() {
        let vocab = vocab_of(&["east", "north", "northeast", "west"]);
        let mut vectors = Array2::zeros((vocab.len(), 2));
        let place = |v: &mut Array2<f64>, w: &str, x: f64, y: f64| {
            v.row_mut(vocab.id(w).unwrap()).assign(&array![x, y]);
        };
        place(&mut vectors, "east", 1.0, 0.0);
        place(&mut vectors, "north", 0.0, 2.0);
        place(&mut vectors, "northeast", 3.0, 3.0);
        place(&mut vectors, "west", -1.0, 0.1);
        let emb = EmbeddingMatrix::new(vocab.clone(), vectors).unwrap();
        let mut m = AbaeModel::initialize(emb, 2, 0).unwrap();
        m.aspects = array![[2.0, 1.0], [0.0, -1.0]];
        let table = m.extract_aspects(4).unwrap();
        // cosines with (2,1)/sqrt5: east .894, northeast .949, north .447, west -.845
        let words: Vec<&str> = table.aspects[0].iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(words, ["northeast", "east", "north", "west"]);
        assert!((table.aspects[0][0].1 - 3.0 / (5.0f64.sqrt() * 2.0f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn symmetric_aspect_layer_ties_to_aspect_zero() {
        let mut m = random_model(4, 2, 5, 4);
        m.aspect_logits.fill(0.3);
        m.aspect_bias.fill(0.1);
        let (best, p) = m.assign_aspect(&[3, 4, 5]).unwrap();
        assert_eq!(best, 0);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn one_word_sentence_picks_its_aspect() {
        let mut m = random_model(4, 3, 6, 5);
        let id = 5;
        let w = m.embeddings.row(id).to_owned();
        m.aspects.row_mut(2).assign(&w);
        // W maps z onto its similarity with each aspect row
        m.aspect_logits = m.aspects.clone() * 10.0;
        m.aspect_bias.fill(0.0);
        let logits = m.aspect_logits.dot(&w);
        let expected = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let (best, p) = m.assign_aspect(&[id]).unwrap();
        assert_eq!(best, expected);
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permuting_words_permutes_attention_only() {
        let m = random_model(6, 3, 8, 6);
        let t1 = m.forward(&[3, 5, 7, 9]).unwrap();
        let t2 = m.forward(&[9, 3, 7, 5]).unwrap();
        let perm = [3usize, 0, 2, 1];
        for (i, &j) in perm.iter().enumerate() {
            assert!((t2.attention[i] - t1.attention[j]).abs() < 1e-14);
        }
        for (a, b) in t1.reconstruction.iter().zip(t2.reconstruction.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in t1.aspect_probs.iter().zip(t2.aspect_probs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aspect_table_tsv_roundtrip() {
        let table = AspectTable {
            aspects: vec![
                vec![("voltage".into(), 0.9), ("power".into(), 0.8)],
                vec![("god".into(), 0.7), ("church".into(), 0.5)],
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tsv");
        table.write_tsv(&p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("0\t1\tvoltage\t0.900000\n"));
        assert_eq!(AspectTable::read_tsv(&p).unwrap(), table);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = random_model(4, 3, 6, 7);
        let dir = tempfile::tempdir().unwrap();
        m.vocab().write_tsv(&dir.path().join("vocab.tsv")).unwrap();
        m.embeddings.write_word2vec(&dir.path().join("emb.txt")).unwrap();
        let p = dir.path().join("model.ckpt");
        let config = TrainConfig {
            fine_tune_embeddings: true,
            ..TrainConfig::default()
        };
        m.write_checkpoint(&p, "vocab.tsv", "emb.txt", &config).unwrap();
        let back = AbaeModel::read_checkpoint(&p).unwrap();
        assert_eq!(back, m);
    }
}
