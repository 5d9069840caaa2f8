//! End-to-end threshold sweep: ingest, classify, filter, train, evaluate.
//!
//! Every file the pipeline reads or writes is recorded with its SHA-256 in
//! `manifest.tsv` under the output directory. Paths inside the output
//! directory are stored relative to it, so two runs into different
//! directories produce identical manifests.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use log::info;
use rayon::prelude::*;

use crate::abae::{self, AbaeModel, AspectTable, TrainConfig};
use crate::coherence::{self, CoherenceConfig, CoherenceReport, CooccurrenceCounts};
use crate::corpus::{self, SentenceDataset, Vocabulary};
use crate::embeddings::{train_sgns, EmbeddingMatrix, SgnsConfig};
use crate::error::{Error, Result};
use crate::lda::{self, LdaConfig};
use crate::oodfilter::{self, OodModel, Threshold};
use crate::synthetic::{self, SyntheticConfig};
use crate::util;

/// Environment variable naming the directory for cached co-occurrence counts.
pub const CACHE_ENV: &str = "OODASPECT_CACHE";

pub const MODEL_ABAE: &str = "abae";
pub const MODEL_ABAE_FULLTEXT: &str = "abae-fulltext";
pub const MODEL_LDA_SENTENCES: &str = "lda-sentences";
pub const MODEL_LDA_FULLTEXT: &str = "lda-fulltext";

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// A 20 Newsgroups-style tree: one directory per group. `ood_groups`
    /// defaults to every other group.
    Newsgroups {
        root: PathBuf,
        target: String,
        ood_groups: Option<Vec<String>>,
    },
    /// Pre-ingested JSONL datasets.
    Datasets { id: PathBuf, ood: PathBuf },
    Synthetic(SyntheticConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub source: Source,
    pub thresholds: Vec<f64>,
    pub seed: u64,
    pub out: PathBuf,
    pub cache: Option<PathBuf>,
    /// Vocabulary min count for embeddings, ABAE and LDA.
    pub min_count: u64,
    pub ood_l2: f64,
    pub ood_max_iter: usize,
    pub sgns: SgnsConfig,
    pub abae: TrainConfig,
    pub lda: LdaConfig,
    pub coherence: CoherenceConfig,
    pub baselines: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic(SyntheticConfig::default()),
            thresholds: Threshold::grid().into_iter().map(Threshold::value).collect(),
            seed: 1,
            out: PathBuf::from("out"),
            cache: None,
            min_count: 2,
            ood_l2: oodfilter::DEFAULT_L2,
            ood_max_iter: oodfilter::DEFAULT_MAX_ITER,
            sgns: SgnsConfig::default(),
            abae: TrainConfig::default(),
            lda: LdaConfig::default(),
            coherence: CoherenceConfig::default(),
            baselines: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Usage(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Usage(format!("bad boolean `{value}` for `{key}`"))),
    }
}

/// Parses `0.0,0.2,0.5` or the word `grid`.
pub fn parse_thresholds(value: &str) -> Result<Vec<f64>> {
    if value.trim() == "grid" {
        return Ok(Threshold::grid().into_iter().map(Threshold::value).collect());
    }
    let values = value
        .split(',')
        .map(|v| parse::<f64>("thresholds", v).and_then(Threshold::new).map(Threshold::value))
        .collect::<Result<Vec<f64>>>()?;
    Ok(values)
}

impl PipelineConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "source" => {
                self.source = match v {
                    "synthetic" => Source::Synthetic(SyntheticConfig::default()),
                    "newsgroups" => Source::Newsgroups {
                        root: PathBuf::new(),
                        target: String::new(),
                        ood_groups: None,
                    },
                    "datasets" => Source::Datasets {
                        id: PathBuf::new(),
                        ood: PathBuf::new(),
                    },
                    _ => {
                        return Err(Error::Usage(format!(
                            "unknown source `{v}` (expected synthetic, newsgroups or datasets)"
                        )))
                    }
                }
            }
            k @ ("data_root" | "target" | "ood_groups") => {
                if !matches!(self.source, Source::Newsgroups { .. }) {
                    self.set("source", "newsgroups")?;
                }
                let Source::Newsgroups {
                    root,
                    target,
                    ood_groups,
                } = &mut self.source
                else {
                    unreachable!()
                };
                match k {
                    "data_root" => *root = PathBuf::from(v),
                    "target" => *target = v.to_string(),
                    _ => *ood_groups = Some(v.split(',').map(|g| g.trim().to_string()).collect()),
                }
            }
            k @ ("id_dataset" | "ood_dataset") => {
                if !matches!(self.source, Source::Datasets { .. }) {
                    self.set("source", "datasets")?;
                }
                let Source::Datasets { id, ood } = &mut self.source else {
                    unreachable!()
                };
                if k == "id_dataset" {
                    *id = PathBuf::from(v);
                } else {
                    *ood = PathBuf::from(v);
                }
            }
            k if k.starts_with("synthetic.") => {
                if !matches!(self.source, Source::Synthetic(_)) {
                    self.set("source", "synthetic")?;
                }
                let Source::Synthetic(s) = &mut self.source else {
                    unreachable!()
                };
                match &k["synthetic.".len()..] {
                    "topics" => s.topics = parse(k, v)?,
                    "words_per_topic" => s.words_per_topic = parse(k, v)?,
                    "filler_words" => s.filler_words = parse(k, v)?,
                    "topic_sentences" => s.topic_sentences = parse(k, v)?,
                    "id_filler_sentences" => s.id_filler_sentences = parse(k, v)?,
                    "ood_sentences" => s.ood_sentences = parse(k, v)?,
                    "min_len" => s.min_len = parse(k, v)?,
                    "max_len" => s.max_len = parse(k, v)?,
                    "filler_share" => s.filler_share = parse(k, v)?,
                    "sentences_per_doc" => s.sentences_per_doc = parse(k, v)?,
                    _ => return Err(Error::Usage(format!("unknown config key `{k}`"))),
                }
            }
            "thresholds" => self.thresholds = parse_thresholds(v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "cache" => self.cache = Some(PathBuf::from(v)),
            "min_count" => self.min_count = parse(key, v)?,
            "baselines" => self.baselines = parse_bool(key, v)?,
            "aspects" => {
                self.abae.aspects = parse(key, v)?;
                self.lda.topics = self.abae.aspects;
            }
            "ood.l2" => self.ood_l2 = parse(key, v)?,
            "ood.max_iter" => self.ood_max_iter = parse(key, v)?,
            "sgns.dim" => self.sgns.dim = parse(key, v)?,
            "sgns.window" => self.sgns.window = parse(key, v)?,
            "sgns.negatives" => self.sgns.negatives = parse(key, v)?,
            "sgns.epochs" => self.sgns.epochs = parse(key, v)?,
            "sgns.lr_start" => self.sgns.lr_start = parse(key, v)?,
            "sgns.lr_end" => self.sgns.lr_end = parse(key, v)?,
            "abae.negatives" => self.abae.negatives = parse(key, v)?,
            "abae.epochs" => self.abae.epochs = parse(key, v)?,
            "abae.batch_size" => self.abae.batch_size = parse(key, v)?,
            "abae.ortho_lambda" => self.abae.ortho_lambda = parse(key, v)?,
            "abae.learning_rate" => self.abae.learning_rate = parse(key, v)?,
            "abae.fine_tune" => self.abae.fine_tune_embeddings = parse_bool(key, v)?,
            "lda.alpha" => self.lda.alpha = Some(parse(key, v)?),
            "lda.beta" => self.lda.beta = parse(key, v)?,
            "lda.iterations" => self.lda.iterations = parse(key, v)?,
            "coherence.top_n" => self.coherence.top_n = parse(key, v)?,
            "coherence.window" => self.coherence.window = parse(key, v)?,
            "coherence.epsilon" => self.coherence.epsilon = parse(key, v)?,
            "coherence.gamma" => self.coherence.gamma = parse(key, v)?,
            other => return Err(Error::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected key = value"))?;
            self.set(k, v).map_err(|e| match e {
                Error::Usage(m) => Error::parse(path, i + 1, m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = Self::default();
        config.apply_text(&util::read_to_string(path)?, path)?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Usage("threshold grid is empty".into()));
        }
        for t in &self.thresholds {
            Threshold::new(*t)?;
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Usage("thresholds must be strictly increasing".into()));
        }
        if self.abae.aspects != self.lda.topics {
            return Err(Error::Usage("ABAE and LDA must use the same number of aspects".into()));
        }
        self.coherence.validate()?;
        match &self.source {
            Source::Newsgroups { root, target, .. } => {
                if target.is_empty() {
                    return Err(Error::Usage("newsgroups source needs a target group".into()));
                }
                if !root.is_dir() {
                    return Err(Error::Usage(format!("data root {} is not a directory", root.display())));
                }
            }
            Source::Datasets { id, ood } => {
                for p in [id, ood] {
                    if !p.is_file() {
                        return Err(Error::Usage(format!("dataset {} does not exist", p.display())));
                    }
                }
            }
            Source::Synthetic(_) => {}
        }
        Ok(())
    }

    /// Module configs with the global seed applied.
    fn seeded(&self) -> (SgnsConfig, TrainConfig, LdaConfig) {
        let sgns = SgnsConfig {
            seed: self.seed,
            min_count: self.min_count,
            ..self.sgns.clone()
        };
        let abae = TrainConfig {
            seed: self.seed,
            ..self.abae.clone()
        };
        let lda = LdaConfig {
            seed: self.seed,
            ..self.lda.clone()
        };
        (sgns, abae, lda)
    }
}

/// Threshold as written in file names and CSV cells: shortest round-trip
/// form with at least one decimal.
pub fn format_threshold(t: f64) -> String {
    util::format_threshold(t)
}

// ---------------------------------------------------------------------------
// manifest

/// Thread-safe record of every artifact read or written, keyed by path.
#[derive(Debug)]
pub struct Manifest {
    root: PathBuf,
    entries: Mutex<BTreeMap<String, String>>,
    last_good: Mutex<String>,
}

impl Manifest {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            entries: Mutex::new(BTreeMap::new()),
            last_good: Mutex::new(String::from("(none)")),
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn insert(&self, path: &Path, bytes: &[u8]) {
        let key = self.key(path);
        self.entries
            .lock()
            .expect("manifest lock")
            .insert(key, util::sha256_hex(bytes));
    }

    /// Writes `contents` under the output root and records it.
    pub fn write(&self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        util::write_string(&path, contents)?;
        self.insert(&path, contents.as_bytes());
        *self.last_good.lock().expect("manifest lock") = path.display().to_string();
        Ok(path)
    }

    /// Records a file some other routine already wrote or will read.
    pub fn record(&self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.insert(path, &bytes);
        Ok(())
    }

    pub fn record_written(&self, path: &Path) -> Result<()> {
        self.record(path)?;
        *self.last_good.lock().expect("manifest lock") = path.display().to_string();
        Ok(())
    }

    /// Records every regular file below `dir`, in sorted order.
    pub fn record_tree(&self, dir: &Path) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                self.record_tree(&p)?;
            } else if p.is_file() {
                self.record(&p)?;
            }
        }
        Ok(())
    }

    pub fn last_good(&self) -> String {
        self.last_good.lock().expect("manifest lock").clone()
    }

    /// `path<TAB>sha256` lines sorted by path.
    pub fn to_tsv(&self) -> String {
        let entries = self.entries.lock().expect("manifest lock");
        let mut out = String::new();
        for (p, h) in entries.iter() {
            let _ = writeln!(out, "{p}\t{h}");
        }
        out
    }

    pub fn finish(&self) -> Result<PathBuf> {
        let path = self.root.join("manifest.tsv");
        util::write_string(&path, &self.to_tsv())?;
        Ok(path)
    }
}

// ---------------------------------------------------------------------------
// sweep result and reports

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSeries {
    pub model: String,
    pub c_pmi: Vec<f64>,
    pub c_npmi: Vec<f64>,
    /// Fraction of in-domain sentences the model was trained on.
    pub retention: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub thresholds: Vec<f64>,
    pub retention: Vec<f64>,
    pub series: Vec<SweepSeries>,
}

pub const SWEEP_CSV_HEADER: &str = "threshold,model,metric,value,retention\n";
pub const REPORT_FORMATS: [&str; 2] = ["csv", "svg"];

impl SweepResult {
    pub fn series(&self, model: &str) -> Option<&SweepSeries> {
        self.series.iter().find(|s| s.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        for (i, &t) in self.thresholds.iter().enumerate() {
            for s in &self.series {
                for (metric, values) in [("c_pmi", &s.c_pmi), ("c_npmi", &s.c_npmi)] {
                    let _ = writeln!(
                        out,
                        "{},{},{metric},{:.6},{:.6}",
                        format_threshold(t),
                        s.model,
                        values[i],
                        s.retention[i]
                    );
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if format!("{h}\n") == SWEEP_CSV_HEADER => {}
            _ => return Err(Error::parse(path, 1, "missing sweep CSV header")),
        }
        let mut thresholds: Vec<f64> = Vec::new();
        let mut series: Vec<SweepSeries> = Vec::new();
        for (i, line) in lines {
            let lineno = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::parse(path, lineno, "expected 5 columns"));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::parse(path, lineno, format!("bad number `{s}`")))
            };
            let t = num(f[0])?;
            let value = num(f[3])?;
            let retention = num(f[4])?;
            if thresholds.last() != Some(&t) {
                if thresholds.last().is_some_and(|&last| t <= last) {
                    return Err(Error::parse(path, lineno, "thresholds must increase"));
                }
                thresholds.push(t);
            }
            let point = thresholds.len() - 1;
            let pos = match series.iter().position(|s| s.model == f[1]) {
                Some(p) => p,
                None => {
                    series.push(SweepSeries {
                        model: f[1].to_string(),
                        c_pmi: Vec::new(),
                        c_npmi: Vec::new(),
                        retention: Vec::new(),
                    });
                    series.len() - 1
                }
            };
            let s = &mut series[pos];
            let values = match f[2] {
                "c_pmi" => &mut s.c_pmi,
                "c_npmi" => &mut s.c_npmi,
                m => return Err(Error::parse(path, lineno, format!("unknown metric `{m}`"))),
            };
            if values.len() != point {
                return Err(Error::parse(path, lineno, "rows out of order"));
            }
            values.push(value);
            if s.retention.len() == point {
                s.retention.push(retention);
            }
        }
        let n = thresholds.len();
        if n == 0 {
            return Err(Error::parse(path, 1, "sweep CSV has no rows"));
        }
        if series.iter().any(|s| s.c_pmi.len() != n || s.c_npmi.len() != n) {
            return Err(Error::parse(path, 0, "every model needs both metrics at every threshold"));
        }
        let retention = series
            .iter()
            .find(|s| s.model == MODEL_ABAE)
            .map_or_else(|| vec![1.0; n], |s| s.retention.clone());
        Ok(Self {
            thresholds,
            retention,
            series,
        })
    }

    /// Line chart of both metrics against the threshold, one polyline per
    /// (model, metric) series.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const PAD: f64 = 50.0;
        const COLORS: [&str; 8] = [
            "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        ];
        let all: Vec<f64> = self
            .series
            .iter()
            .flat_map(|s| s.c_pmi.iter().chain(&s.c_npmi))
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        let (mut lo, mut hi) = all
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let (t0, t1) = (
            self.thresholds.first().copied().unwrap_or(0.0),
            self.thresholds.last().copied().unwrap_or(1.0),
        );
        let tspan = if t1 > t0 { t1 - t0 } else { 1.0 };
        let x = |t: f64| PAD + (t - t0) / tspan * (W - 2.0 * PAD);
        let y = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);

        let mut out = String::new();
        let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
            H - PAD,
            W - PAD
        );
        let _ = writeln!(
            out,
            r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#,
            H - PAD
        );
        for &t in &self.thresholds {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"#,
                x(t),
                H - PAD + 15.0,
                format_threshold(t)
            );
        }
        for v in [lo, hi] {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{v:.3}</text>"#,
                PAD - 4.0,
                y(v)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">threshold</text>"#,
            W / 2.0,
            H - 10.0
        );
        let mut n = 0;
        for s in &self.series {
            for (metric, values, dash) in [("c_pmi", &s.c_pmi, ""), ("c_npmi", &s.c_npmi, " stroke-dasharray=\"4 2\"")] {
                let color = COLORS[n % COLORS.len()];
                let points: Vec<String> = self
                    .thresholds
                    .iter()
                    .zip(values.iter())
                    .filter(|(_, v)| v.is_finite())
                    .map(|(&t, &v)| format!("{:.2},{:.2}", x(t), y(v)))
                    .collect();
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{color}"{dash} points="{}"><title>{} {metric}</title></polyline>"#,
                    points.join(" "),
                    s.model
                );
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" font-size="10" fill="{color}">{} {metric}</text>"#,
                    W - PAD - 110.0,
                    PAD + 12.0 * n as f64,
                    s.model
                );
                n += 1;
            }
        }
        out.push_str("</svg>\n");
        out
    }

    pub fn render(&self, format: &str) -> Result<String> {
        match format {
            "csv" => Ok(self.to_csv()),
            "svg" => Ok(self.to_svg()),
            other => Err(Error::Usage(format!(
                "unknown report format `{other}` (supported: {})",
                REPORT_FORMATS.join(", ")
            ))),
        }
    }
}

/// Writes `sweep` to `path` in `format` (`csv` or `svg`).
pub fn report(sweep: &SweepResult, format: &str, path: &Path) -> Result<()> {
    if sweep.thresholds.is_empty() {
        return Err(Error::Data("sweep has no thresholds".into()));
    }
    util::write_string(path, &sweep.render(format)?)
}

// ---------------------------------------------------------------------------
// pipeline

fn stage<T>(name: &str, manifest: &Manifest, result: Result<T>) -> Result<T> {
    result.map_err(|cause| Error::Stage {
        stage: name.to_string(),
        last_good: manifest.last_good(),
        cause: Box::new(cause),
    })
}

/// Loads or generates the raw ID and OOD datasets, recording inputs.
fn load_sources(config: &PipelineConfig, manifest: &Manifest) -> Result<(SentenceDataset, SentenceDataset)> {
    match &config.source {
        Source::Synthetic(s) => {
            let corpus = synthetic::generate(&SyntheticConfig {
                seed: config.seed,
                ..s.clone()
            })?;
            Ok((corpus.id, corpus.ood))
        }
        Source::Datasets { id, ood } => {
            manifest.record(id)?;
            manifest.record(ood)?;
            Ok((SentenceDataset::read_jsonl(id)?, SentenceDataset::read_jsonl(ood)?))
        }
        Source::Newsgroups {
            root,
            target,
            ood_groups,
        } => {
            let groups = match ood_groups {
                Some(g) => g.clone(),
                None => corpus::list_newsgroups(root)?
                    .into_iter()
                    .filter(|g| g != target)
                    .collect(),
            };
            if groups.is_empty() {
                return Err(Error::Data("no out-of-domain groups".into()));
            }
            manifest.record_tree(&root.join(target))?;
            for g in &groups {
                manifest.record_tree(&root.join(g))?;
            }
            let id = corpus::ingest_groups(root, std::slice::from_ref(target))?;
            let ood = corpus::ingest_groups(root, &groups)?;
            Ok((id, ood))
        }
    }
}

/// Reference co-occurrence counts for `words`, reusing a cache file keyed
/// by the reference corpus, window and word set when a cache directory is
/// configured.
fn reference_counts(
    reference: &SentenceDataset,
    reference_jsonl: &str,
    words: &HashSet<String>,
    window: usize,
    cache: Option<&Path>,
) -> Result<CooccurrenceCounts> {
    let mut sorted: Vec<&String> = words.iter().collect();
    sorted.sort();
    let mut key_src = format!("{}\n{window}\n", util::sha256_hex(reference_jsonl.as_bytes()));
    for w in &sorted {
        key_src.push_str(w);
        key_src.push('\n');
    }
    let key = &util::sha256_hex(key_src.as_bytes())[..16];
    if let Some(dir) = cache {
        let path = dir.join(format!("counts-{key}.tsv"));
        if path.is_file() {
            if let Ok(counts) = CooccurrenceCounts::read_tsv(&path) {
                info!("using cached counts {}", path.display());
                return Ok(counts);
            }
        }
        let counts = coherence::count_windows_for(reference, window, words)?;
        counts.write_tsv(&path)?;
        return Ok(counts);
    }
    coherence::count_windows_for(reference, window, words)
}

/// A model trained during the sweep, before evaluation.
struct Trained {
    model: &'static str,
    point: Option<usize>,
    table: AspectTable,
    dir: String,
}

fn train_abae_point(
    embeddings: &EmbeddingMatrix,
    dataset: &SentenceDataset,
    config: &TrainConfig,
    top_n: usize,
    manifest: &Manifest,
    dir: &str,
) -> Result<AspectTable> {
    let init = AbaeModel::initialize(embeddings.clone(), config.aspects, config.seed)?;
    let (model, losses) = abae::train(init, dataset, config)?;
    let table = model.extract_aspects(top_n)?;
    let ckpt = manifest.root.join(dir).join("model.ckpt");
    let depth = dir.split('/').count();
    let up = "../".repeat(depth);
    model.write_checkpoint(&ckpt, &format!("{up}vocab.tsv"), &format!("{up}embeddings.txt"), config)?;
    manifest.record_written(&ckpt)?;
    let mut loss_text = String::from("epoch\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(loss_text, "{}\t{l:.6}", i + 1);
    }
    manifest.write(&format!("{dir}/losses.tsv"), &loss_text)?;
    manifest.write(&format!("{dir}/aspects.tsv"), &table.to_tsv())?;
    Ok(table)
}

/// Runs the full sweep and writes every artifact under `config.out`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<SweepResult> {
    config.validate()?;
    let out = &config.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = Manifest::new(out);
    let (sgns_config, abae_config, lda_config) = config.seeded();

    // 1. ingest
    let (id, ood) = stage("ingest", &manifest, load_sources(config, &manifest))?;
    if id.is_empty() || ood.is_empty() {
        return Err(Error::Stage {
            stage: "ingest".into(),
            last_good: manifest.last_good(),
            cause: Box::new(Error::Data("in-domain or out-of-domain set is empty".into())),
        });
    }
    let id_jsonl = id.to_jsonl();
    manifest.write("data/id.jsonl", &id_jsonl)?;
    manifest.write("data/ood.jsonl", &ood.to_jsonl())?;
    info!("ingested {} in-domain and {} out-of-domain sentences", id.len(), ood.len());

    // 2. classifier
    let (ood_model, ood_report) = stage(
        "train-ood",
        &manifest,
        oodfilter::train_ood(&id, &ood, config.ood_l2, config.ood_max_iter),
    )?;
    manifest.write("ood/features.tsv", &ood_model.features.to_tsv())?;
    manifest.write("ood/model.tsv", &ood_model.to_text())?;
    manifest.write(
        "ood/report.tsv",
        &format!(
            "precision\t{:.6}\nrecall\t{:.6}\naccuracy\t{:.6}\niterations\t{}\nconverged\t{}\n",
            ood_report.precision,
            ood_report.recall,
            ood_report.accuracy,
            ood_model.iterations,
            ood_report.converged
        ),
    )?;
    info!(
        "classifier precision {:.3} recall {:.3} accuracy {:.3}",
        ood_report.precision, ood_report.recall, ood_report.accuracy
    );
    let scored = ood_model.score_dataset(&id);
    manifest.write("data/id.scored.jsonl", &oodfilter::scored_to_jsonl(&scored))?;

    // 3. embeddings on the unfiltered in-domain set
    let vocab = Arc::new(stage("vocabulary", &manifest, Vocabulary::build(&id.sentences, config.min_count))?);
    manifest.write("vocab.tsv", &vocab.to_tsv())?;
    let (embeddings, _) = stage("train-embeddings", &manifest, train_sgns(&id, vocab.clone(), &sgns_config))?;
    manifest.write("embeddings.txt", &embeddings.to_word2vec())?;
    // Train on exactly what was written so checkpoints reload bit-identically.
    let embeddings = EmbeddingMatrix::read_word2vec(&out.join("embeddings.txt"), vocab.clone())?;

    // 4. filtering and training, one job per threshold plus the baselines
    let filtered: Vec<oodfilter::Filtered> = config
        .thresholds
        .iter()
        .map(|&t| oodfilter::filter_scored(&scored, Threshold::new(t).expect("validated"), &id.source))
        .collect();
    for (t, f) in config.thresholds.iter().zip(&filtered) {
        manifest.write(&format!("thresholds/{}/filtered.jsonl", format_threshold(*t)), &f.dataset.to_jsonl())?;
    }
    let retention: Vec<f64> = filtered.iter().map(|f| f.retention).collect();

    let top_n = config.coherence.top_n;
    let mut jobs: Vec<(&'static str, Option<usize>)> = (0..filtered.len()).map(|i| (MODEL_ABAE, Some(i))).collect();
    if config.baselines {
        jobs.extend([
            (MODEL_ABAE_FULLTEXT, None),
            (MODEL_LDA_SENTENCES, None),
            (MODEL_LDA_FULLTEXT, None),
        ]);
    }
    let full_texts = id.full_texts();
    let trained: Vec<Result<Trained>> = jobs
        .par_iter()
        .map(|&(model, point)| -> Result<Trained> {
            let dir = match point {
                Some(i) => format!("thresholds/{}", format_threshold(config.thresholds[i])),
                None => format!("baselines/{model}"),
            };
            let table = match model {
                MODEL_ABAE => {
                    let data = &filtered[point.expect("threshold job")].dataset;
                    if data.is_empty() {
                        return Err(Error::Data(format!("no sentences survive filtering in {dir}")));
                    }
                    train_abae_point(&embeddings, data, &abae_config, top_n, &manifest, &dir)
                }
                MODEL_ABAE_FULLTEXT => {
                    train_abae_point(&embeddings, &full_texts, &abae_config, top_n, &manifest, &dir)
                }
                _ => {
                    let data = if model == MODEL_LDA_SENTENCES { &id } else { &full_texts };
                    let docs = lda::encode_documents(data, &vocab);
                    let m = lda::train_lda(&docs, vocab.clone(), &lda_config)?;
                    manifest.write(&format!("{dir}/counts.tsv"), &m.counts_tsv())?;
                    let table = m.top_words(top_n)?;
                    manifest.write(&format!("{dir}/aspects.tsv"), &table.to_tsv())?;
                    Ok(table)
                }
            };
            let table = stage(&format!("train {dir}"), &manifest, table)?;
            Ok(Trained {
                model,
                point,
                table,
                dir,
            })
        })
        .collect();
    let trained = trained.into_iter().collect::<Result<Vec<Trained>>>()?;

    // 5. coherence against the unfiltered in-domain set
    let words: HashSet<String> = trained
        .iter()
        .flat_map(|t| coherence::table_words(&t.table, &config.coherence))
        .flatten()
        .collect();
    let cache = config
        .cache
        .clone()
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from));
    let counts = stage(
        "eval-coherence",
        &manifest,
        reference_counts(&id, &id_jsonl, &words, config.coherence.window, cache.as_deref()),
    )?;
    manifest.write("coherence/reference_counts.tsv", &counts.to_tsv())?;

    let mut all_rows = String::from(CoherenceReport::CSV_HEADER);
    let mut reports: BTreeMap<(&str, Option<usize>), CoherenceReport> = BTreeMap::new();
    for t in &trained {
        let report = stage(
            "eval-coherence",
            &manifest,
            coherence::evaluate_with_counts(&t.table, &counts, &config.coherence),
        )?;
        let threshold = t.point.map_or(0.0, |i| config.thresholds[i]);
        let rows = report.csv_rows(threshold, t.model);
        manifest.write(&format!("{}/coherence.csv", t.dir), &format!("{}{rows}", CoherenceReport::CSV_HEADER))?;
        all_rows.push_str(&rows);
        reports.insert((t.model, t.point), report);
    }
    manifest.write("coherence.csv", &all_rows)?;

    // 6. sweep report
    let n = config.thresholds.len();
    let mut series = vec![SweepSeries {
        model: MODEL_ABAE.into(),
        c_pmi: (0..n).map(|i| reports[&(MODEL_ABAE, Some(i))].mean_pmi).collect(),
        c_npmi: (0..n).map(|i| reports[&(MODEL_ABAE, Some(i))].mean_npmi).collect(),
        retention: retention.clone(),
    }];
    if config.baselines {
        for model in [MODEL_ABAE_FULLTEXT, MODEL_LDA_SENTENCES, MODEL_LDA_FULLTEXT] {
            let r = &reports[&(model, None)];
            series.push(SweepSeries {
                model: model.into(),
                c_pmi: vec![r.mean_pmi; n],
                c_npmi: vec![r.mean_npmi; n],
                retention: vec![1.0; n],
            });
        }
    }
    let sweep = SweepResult {
        thresholds: config.thresholds.clone(),
        retention,
        series,
    };
    manifest.write("sweep.csv", &sweep.to_csv())?;
    manifest.write("sweep.svg", &sweep.to_svg())?;
    manifest.finish()?;
    Ok(sweep)
}

/// Reads a trained classifier from `dir/model.tsv` and `dir/features.tsv`.
pub fn read_ood_model(dir: &Path) -> Result<OodModel> {
    OodModel::read(&dir.join("model.tsv"), &dir.join("features.tsv"))
}
