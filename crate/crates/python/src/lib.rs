//! Python bindings for the `oodaspect` crate, importable as `oodaspect`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use oodaspect::abae::{self, AbaeModel, TrainConfig};
use oodaspect::coherence::{self, CoherenceConfig};
use oodaspect::corpus::{self, Sentence, SentenceDataset, Vocabulary};
use oodaspect::embeddings::{self, EmbeddingMatrix as CoreEmbeddings, SgnsConfig};
use oodaspect::error::Error;
use oodaspect::lda::{self, LdaConfig};
use oodaspect::oodfilter::{self, Threshold};
use oodaspect::pipeline::{self, PipelineConfig};
use oodaspect::synthetic::{self, SyntheticConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Stage { ref cause, .. } if matches!(**cause, Error::Numerical(_)) => {
            PyArithmeticError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for oodaspect::error::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Sentence-level dataset. Each sentence is a list of normalized tokens.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: SentenceDataset,
}

#[pymethods]
impl PyDataset {
    /// One document per sentence, with ids `source/i`.
    #[new]
    fn new(source: String, sentences: Vec<Vec<String>>) -> Self {
        let rows = sentences
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Sentence {
                sent_id: format!("{source}/{i}#0"),
                doc_id: format!("{source}/{i}"),
                domain: source.clone(),
                tokens,
            })
            .collect();
        Self {
            inner: SentenceDataset::new(source, rows),
        }
    }

    #[staticmethod]
    fn read_jsonl(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SentenceDataset::read_jsonl(&path).py_err()?,
        })
    }

    fn write_jsonl(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_jsonl(&path).py_err()
    }

    #[getter]
    fn source(&self) -> String {
        self.inner.source.clone()
    }

    fn tokens(&self) -> Vec<Vec<String>> {
        self.inner.sentences.iter().map(|s| s.tokens.clone()).collect()
    }

    /// `(sent_id, doc_id, domain, tokens)` tuples.
    fn records(&self) -> Vec<(String, String, String, Vec<String>)> {
        self.inner
            .sentences
            .iter()
            .map(|s| (s.sent_id.clone(), s.doc_id.clone(), s.domain.clone(), s.tokens.clone()))
            .collect()
    }

    /// Sentences of each document joined into one pseudo-sentence.
    fn full_texts(&self) -> Self {
        Self {
            inner: self.inner.full_texts(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(source={:?}, sentences={})", self.inner.source, self.inner.len())
    }
}

/// Logistic in-domain vs out-of-domain sentence classifier.
#[pyclass(name = "OodModel")]
struct PyOodModel {
    inner: oodfilter::OodModel,
}

#[pymethods]
impl PyOodModel {
    /// Returns the model and a dict with precision, recall, accuracy,
    /// converged and loss_history.
    #[staticmethod]
    #[pyo3(signature = (id, ood, l2 = oodfilter::DEFAULT_L2, max_iter = oodfilter::DEFAULT_MAX_ITER))]
    fn train<'py>(
        py: Python<'py>,
        id: &PyDataset,
        ood: &PyDataset,
        l2: f64,
        max_iter: usize,
    ) -> PyResult<(Self, Bound<'py, PyDict>)> {
        let (model, report) = py.detach(|| oodfilter::train_ood(&id.inner, &ood.inner, l2, max_iter)).py_err()?;
        let d = PyDict::new(py);
        d.set_item("precision", report.precision)?;
        d.set_item("recall", report.recall)?;
        d.set_item("accuracy", report.accuracy)?;
        d.set_item("converged", report.converged)?;
        d.set_item("loss_history", report.loss_history)?;
        Ok((Self { inner: model }, d))
    }

    #[staticmethod]
    fn read(model_path: PathBuf, features_path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: oodfilter::OodModel::read(&model_path, &features_path).py_err()?,
        })
    }

    fn write(&self, model_path: PathBuf, features_path: PathBuf) -> PyResult<()> {
        self.inner.write(&model_path, &features_path).py_err()
    }

    /// In-domain probability of one tokenized sentence.
    fn score(&self, tokens: Vec<String>) -> f64 {
        self.inner.score(&Sentence {
            sent_id: String::new(),
            doc_id: String::new(),
            domain: String::new(),
            tokens,
        })
    }

    fn score_dataset(&self, dataset: &PyDataset) -> Vec<f64> {
        self.inner.score_dataset(&dataset.inner).into_iter().map(|s| s.score).collect()
    }

    /// Keeps sentences scoring at or above `threshold`; returns the filtered
    /// dataset and the retained fraction.
    fn filter(&self, dataset: &PyDataset, threshold: f64) -> PyResult<(PyDataset, f64)> {
        let f = oodfilter::filter_dataset(&dataset.inner, &self.inner, Threshold::new(threshold).py_err()?);
        Ok((PyDataset { inner: f.dataset }, f.retention))
    }

    #[getter]
    fn bias(&self) -> f64 {
        self.inner.bias
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    /// Feature weights keyed by token.
    fn weights(&self) -> HashMap<String, f64> {
        self.inner
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (self.inner.features.token(i).to_string(), w))
            .collect()
    }
}

/// Skip-gram word vectors together with their vocabulary.
#[pyclass(name = "Embeddings", from_py_object)]
#[derive(Clone)]
struct PyEmbeddings {
    inner: CoreEmbeddings,
}

#[pymethods]
impl PyEmbeddings {
    #[staticmethod]
    #[pyo3(signature = (dataset, dim = 200, window = 10, negatives = 5, epochs = 5, min_count = 2, seed = 1))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        dataset: &PyDataset,
        dim: usize,
        window: usize,
        negatives: usize,
        epochs: usize,
        min_count: u64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = SgnsConfig {
            dim,
            window,
            negatives,
            epochs,
            min_count,
            seed,
            ..SgnsConfig::default()
        };
        let inner = py
            .detach(|| {
                let vocab = Arc::new(Vocabulary::build(&dataset.inner.sentences, min_count)?);
                embeddings::train_sgns(&dataset.inner, vocab, &config).map(|(e, _)| e)
            })
            .py_err()?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn words(&self) -> Vec<String> {
        self.inner.vocab.tokens().to_vec()
    }

    fn vector(&self, word: &str) -> Option<Vec<f64>> {
        self.inner.vocab.id(word).map(|id| self.inner.row(id).to_vec())
    }

    fn write_word2vec(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_word2vec(&path).py_err()
    }

    fn __len__(&self) -> usize {
        self.inner.vocab.len()
    }
}

/// Attention-based aspect autoencoder.
#[pyclass(name = "AbaeModel")]
struct PyAbaeModel {
    inner: AbaeModel,
    losses: Vec<f64>,
}

#[pymethods]
impl PyAbaeModel {
    #[staticmethod]
    #[pyo3(signature = (dataset, embeddings, aspects = 15, epochs = 10, negatives = 20, batch_size = 256, ortho_lambda = 0.1, learning_rate = 1e-3, seed = 1))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        dataset: &PyDataset,
        embeddings: &PyEmbeddings,
        aspects: usize,
        epochs: usize,
        negatives: usize,
        batch_size: usize,
        ortho_lambda: f64,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = TrainConfig {
            aspects,
            epochs,
            negatives,
            batch_size,
            ortho_lambda,
            learning_rate,
            seed,
            ..TrainConfig::default()
        };
        let (inner, losses) = py
            .detach(|| {
                let init = AbaeModel::initialize(embeddings.inner.clone(), aspects, seed)?;
                abae::train(init, &dataset.inner, &config)
            })
            .py_err()?;
        Ok(Self { inner, losses })
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.losses.clone()
    }

    #[getter]
    fn num_aspects(&self) -> usize {
        self.inner.num_aspects()
    }

    /// Top `n` words per aspect by cosine to the aspect vector.
    #[pyo3(signature = (n = 100))]
    fn aspects(&self, n: usize) -> PyResult<PyAspectTable> {
        Ok(PyAspectTable {
            inner: self.inner.extract_aspects(n).py_err()?,
        })
    }

    /// Most probable aspect for a tokenized sentence.
    fn assign(&self, tokens: Vec<String>) -> PyResult<usize> {
        let ids: Vec<usize> = tokens.iter().map(|t| self.inner.vocab().id_or_unk(t)).collect();
        Ok(self.inner.assign_aspect(&ids).py_err()?.0)
    }

    /// Aspect probabilities for a tokenized sentence.
    fn aspect_probs(&self, tokens: Vec<String>) -> PyResult<Vec<f64>> {
        let ids: Vec<usize> = tokens.iter().map(|t| self.inner.vocab().id_or_unk(t)).collect();
        Ok(self.inner.forward(&ids).py_err()?.aspect_probs.to_vec())
    }
}

/// Ranked `(word, score)` lists, one per aspect.
#[pyclass(name = "AspectTable", from_py_object)]
#[derive(Clone)]
struct PyAspectTable {
    inner: abae::AspectTable,
}

#[pymethods]
impl PyAspectTable {
    #[new]
    fn new(aspects: Vec<Vec<(String, f64)>>) -> Self {
        Self {
            inner: abae::AspectTable { aspects },
        }
    }

    #[staticmethod]
    fn read_tsv(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: abae::AspectTable::read_tsv(&path).py_err()?,
        })
    }

    fn write_tsv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_tsv(&path).py_err()
    }

    #[getter]
    fn aspects(&self) -> Vec<Vec<(String, f64)>> {
        self.inner.aspects.clone()
    }

    /// Words only, best first.
    fn words(&self) -> Vec<Vec<String>> {
        self.inner
            .aspects
            .iter()
            .map(|a| a.iter().map(|(w, _)| w.clone()).collect())
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.aspects.len()
    }
}

/// Trains collapsed-Gibbs LDA and returns the top `n` words per topic.
#[pyfunction]
#[pyo3(signature = (dataset, topics = 15, iterations = 500, alpha = None, beta = 0.01, min_count = 2, seed = 1, n = 100))]
#[allow(clippy::too_many_arguments)]
fn train_lda(
    py: Python<'_>,
    dataset: &PyDataset,
    topics: usize,
    iterations: usize,
    alpha: Option<f64>,
    beta: f64,
    min_count: u64,
    seed: u64,
    n: usize,
) -> PyResult<PyAspectTable> {
    let config = LdaConfig {
        topics,
        iterations,
        alpha,
        beta,
        seed,
    };
    let table = py
        .detach(|| {
            let vocab = Arc::new(Vocabulary::build(&dataset.inner.sentences, min_count)?);
            let docs = lda::encode_documents(&dataset.inner, &vocab);
            lda::train_lda(&docs, vocab, &config)?.top_words(n)
        })
        .py_err()?;
    Ok(PyAspectTable { inner: table })
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize_normalize(text)
}

#[pyfunction]
fn split_sentences(body: &str) -> Vec<String> {
    corpus::split_sentences(body)
}

/// Removes headers, quoted lines and signatures from a raw post.
#[pyfunction]
fn strip_message(text: &str) -> String {
    corpus::strip_message(text)
}

#[pyfunction]
fn ingest_newsgroups(root: PathBuf, groups: Vec<String>) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: corpus::ingest_groups(&root, &groups).py_err()?,
    })
}

/// Returns `(in_domain, out_of_domain)` synthetic datasets.
#[pyfunction]
#[pyo3(signature = (seed = 1, topics = 3, topic_sentences = 1400, id_filler_sentences = 600, ood_sentences = 6000))]
fn synthetic_corpus(
    seed: u64,
    topics: usize,
    topic_sentences: usize,
    id_filler_sentences: usize,
    ood_sentences: usize,
) -> PyResult<(PyDataset, PyDataset)> {
    let corpus = synthetic::generate(&SyntheticConfig {
        seed,
        topics,
        topic_sentences,
        id_filler_sentences,
        ood_sentences,
        ..SyntheticConfig::default()
    })
    .py_err()?;
    Ok((PyDataset { inner: corpus.id }, PyDataset { inner: corpus.ood }))
}

/// Scores an aspect table against a reference dataset. Returns a dict with
/// per-aspect `c_pmi` and `c_npmi` lists and their means.
#[pyfunction]
#[pyo3(name = "coherence", signature = (table, reference, top_n = 8, window = 10, epsilon = 1e-10, gamma = 1.0))]
fn evaluate_coherence<'py>(
    py: Python<'py>,
    table: &PyAspectTable,
    reference: &PyDataset,
    top_n: usize,
    window: usize,
    epsilon: f64,
    gamma: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = CoherenceConfig {
        top_n,
        window,
        epsilon,
        gamma,
    };
    let report = py.detach(|| coherence::evaluate(&table.inner, &reference.inner, &config)).py_err()?;
    let d = PyDict::new(py);
    d.set_item("c_pmi", report.aspects.iter().map(|a| a.c_pmi).collect::<Vec<_>>())?;
    d.set_item("c_npmi", report.aspects.iter().map(|a| a.c_npmi).collect::<Vec<_>>())?;
    d.set_item("mean_pmi", report.mean_pmi)?;
    d.set_item("mean_npmi", report.mean_npmi)?;
    Ok(d)
}

/// NPMI of one word pair over sliding windows of `reference`.
#[pyfunction]
#[pyo3(signature = (reference, a, b, window = 10, epsilon = 1e-10, gamma = 1.0))]
fn npmi(reference: &PyDataset, a: &str, b: &str, window: usize, epsilon: f64, gamma: f64) -> PyResult<f64> {
    let counts = coherence::count_windows(&reference.inner, window).py_err()?;
    Ok(coherence::npmi(&counts, a, b, epsilon, gamma))
}

/// Runs the threshold sweep. `settings` takes the same `key=value` pairs as
/// a configuration file. Returns thresholds, retention and one entry per
/// model with its `c_pmi`, `c_npmi` and `retention` series.
#[pyfunction]
#[pyo3(signature = (out, settings = None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    out: PathBuf,
    settings: Option<HashMap<String, String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut config = PipelineConfig::default();
    let mut settings: Vec<_> = settings.unwrap_or_default().into_iter().collect();
    // `source` resets source-specific keys, so apply it first.
    settings.sort_by_key(|(k, _)| k != "source");
    for (k, v) in &settings {
        config.set(k, v).py_err()?;
    }
    config.out = out;
    let sweep = py.detach(|| pipeline::run_pipeline(&config)).py_err()?;
    let d = PyDict::new(py);
    d.set_item("thresholds", sweep.thresholds)?;
    d.set_item("retention", sweep.retention)?;
    let models = PyDict::new(py);
    for s in sweep.series {
        let m = PyDict::new(py);
        m.set_item("c_pmi", s.c_pmi)?;
        m.set_item("c_npmi", s.c_npmi)?;
        m.set_item("retention", s.retention)?;
        models.set_item(s.model, m)?;
    }
    d.set_item("models", models)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "oodaspect")]
fn oodaspect_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyOodModel>()?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyAbaeModel>()?;
    m.add_class::<PyAspectTable>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(split_sentences, m)?)?;
    m.add_function(wrap_pyfunction!(strip_message, m)?)?;
    m.add_function(wrap_pyfunction!(ingest_newsgroups, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train_lda, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_coherence, m)?)?;
    m.add_function(wrap_pyfunction!(npmi, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
