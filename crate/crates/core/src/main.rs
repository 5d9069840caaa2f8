use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;

use oodaspect::abae::{self, AbaeModel, AspectTable, TrainConfig};
use oodaspect::coherence::{self, CoherenceConfig};
use oodaspect::corpus::{self, SentenceDataset, Vocabulary};
use oodaspect::embeddings::{train_sgns, EmbeddingMatrix, SgnsConfig};
use oodaspect::lda::{self, LdaConfig};
use oodaspect::oodfilter::{self, Threshold};
use oodaspect::pipeline::{self, PipelineConfig, SweepResult};
use oodaspect::synthetic::{self, SyntheticConfig};
use oodaspect::{Error, Result};

#[derive(Parser)]
#[command(name = "oodaspect", version, about = "Out-of-domain filtering for neural aspect extraction")]
struct Cli {
    /// Seed for every stochastic stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key = value` configuration file; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse newsgroup directories into a sentence dataset (JSONL).
    Ingest(IngestArgs),
    /// Generate the synthetic two-domain corpus.
    Synth,
    /// Train the in-domain vs out-of-domain classifier.
    TrainOod(TrainOodArgs),
    /// Score a dataset and keep sentences at or above a threshold.
    Filter(FilterArgs),
    /// Train skip-gram embeddings and write the vocabulary.
    TrainEmbeddings(EmbeddingArgs),
    /// Train the aspect autoencoder and extract aspect words.
    TrainAbae(AbaeArgs),
    /// Train the LDA baseline.
    TrainLda(LdaArgs),
    /// Score an aspect table against a reference dataset.
    EvalCoherence(CoherenceArgs),
    /// Run the whole threshold sweep.
    Sweep(SweepArgs),
    /// Render a sweep CSV as CSV or SVG.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Root directory with one subdirectory per newsgroup.
    #[arg(long)]
    data_root: PathBuf,
    /// Comma-separated groups; `--rest-of` selects every other group.
    #[arg(long, value_delimiter = ',')]
    groups: Vec<String>,
    /// Ingest every group except this one.
    #[arg(long, conflicts_with = "groups")]
    rest_of: Option<String>,
    /// Output JSONL (default: <out>/data/<first group>.jsonl).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOodArgs {
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    #[arg(long, default_value_t = oodfilter::DEFAULT_L2)]
    l2: f64,
    #[arg(long, default_value_t = oodfilter::DEFAULT_MAX_ITER)]
    max_iter: usize,
}

#[derive(Args)]
struct FilterArgs {
    /// Directory holding `model.tsv` and `features.tsv`.
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    threshold: f64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EmbeddingArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 200)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 2)]
    min_count: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
}

#[derive(Args)]
struct AbaeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 15)]
    aspects: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    negatives: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    ortho_lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long)]
    fine_tune: bool,
    /// Train on whole posts instead of sentences.
    #[arg(long)]
    full_text: bool,
    #[arg(long, default_value_t = 8)]
    top_n: usize,
}

#[derive(Args)]
struct LdaArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 15)]
    topics: usize,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    beta: f64,
    #[arg(long, default_value_t = 500)]
    iterations: usize,
    #[arg(long)]
    full_text: bool,
    #[arg(long, default_value_t = 8)]
    top_n: usize,
}

#[derive(Args)]
struct CoherenceArgs {
    #[arg(long)]
    aspects: PathBuf,
    /// Reference dataset (the unfiltered in-domain set).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, default_value_t = 8)]
    top_n: usize,
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long, default_value_t = 1e-10)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Threshold and model labels for the CSV rows.
    #[arg(long, default_value_t = 0.0)]
    threshold: f64,
    #[arg(long, default_value = "abae")]
    model: String,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// synthetic, newsgroups or datasets.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    id_dataset: Option<PathBuf>,
    #[arg(long)]
    ood_dataset: Option<PathBuf>,
    /// Comma-separated thresholds or `grid`.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    aspects: Option<usize>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long, default_value = "svg")]
    format: String,
    #[arg(long)]
    output: PathBuf,
}

struct Globals {
    seed: u64,
    out: PathBuf,
}

fn read_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::from_file(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_vocab_and_dataset(dataset: &Path, vocab: &Path, full_text: bool) -> Result<(SentenceDataset, Arc<Vocabulary>)> {
    let data = SentenceDataset::read_jsonl(dataset)?;
    let data = if full_text { data.full_texts() } else { data };
    Ok((data, Arc::new(Vocabulary::read_tsv(vocab)?)))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    let base = read_config(&cli)?;
    let g = Globals {
        seed: cli.seed.unwrap_or(base.seed),
        out: cli.out.clone().unwrap_or_else(|| base.out.clone()),
    };
    match cli.command {
        Command::Ingest(a) => {
            let groups = match (&a.rest_of, a.groups.is_empty()) {
                (Some(target), _) => corpus::list_newsgroups(&a.data_root)?
                    .into_iter()
                    .filter(|x| x != target)
                    .collect(),
                (None, false) => a.groups.clone(),
                (None, true) => return Err(Error::Usage("give --groups or --rest-of".into())),
            };
            let dataset = corpus::ingest_groups(&a.data_root, &groups)?;
            let name = a.rest_of.as_ref().map_or_else(|| groups[0].clone(), |t| format!("not-{t}"));
            let path = a.output.unwrap_or_else(|| g.out.join("data").join(format!("{name}.jsonl")));
            dataset.write_jsonl(&path)?;
            println!("{} sentences -> {}", dataset.len(), path.display());
        }
        Command::Synth => {
            let mut s = match base.source {
                pipeline::Source::Synthetic(s) => s,
                _ => SyntheticConfig::default(),
            };
            s.seed = g.seed;
            let c = synthetic::generate(&s)?;
            c.id.write_jsonl(&g.out.join("data/id.jsonl"))?;
            c.ood.write_jsonl(&g.out.join("data/ood.jsonl"))?;
            println!("{} in-domain, {} out-of-domain sentences -> {}", c.id.len(), c.ood.len(), g.out.join("data").display());
        }
        Command::TrainOod(a) => {
            let id = SentenceDataset::read_jsonl(&a.id)?;
            let ood = SentenceDataset::read_jsonl(&a.ood)?;
            let (model, report) = oodfilter::train_ood(&id, &ood, a.l2, a.max_iter)?;
            let dir = g.out.join("ood");
            model.write(&dir.join("model.tsv"), &dir.join("features.tsv"))?;
            println!(
                "precision {:.4} recall {:.4} accuracy {:.4} iterations {} converged {}",
                report.precision, report.recall, report.accuracy, model.iterations, report.converged
            );
        }
        Command::Filter(a) => {
            let model = pipeline::read_ood_model(&a.model_dir)?;
            let data = SentenceDataset::read_jsonl(&a.dataset)?;
            let threshold = Threshold::new(a.threshold)?;
            let scored = model.score_dataset(&data);
            let filtered = oodfilter::filter_scored(&scored, threshold, &data.source);
            let dir = g.out.join("thresholds").join(pipeline::format_threshold(a.threshold));
            write_text(&dir.join("scored.jsonl"), &oodfilter::scored_to_jsonl(&scored))?;
            let path = a.output.unwrap_or_else(|| dir.join("filtered.jsonl"));
            filtered.dataset.write_jsonl(&path)?;
            println!("retention {:.4} ({} sentences) -> {}", filtered.retention, filtered.dataset.len(), path.display());
        }
        Command::TrainEmbeddings(a) => {
            let data = SentenceDataset::read_jsonl(&a.dataset)?;
            let vocab = Arc::new(Vocabulary::build(&data.sentences, a.min_count)?);
            let config = SgnsConfig {
                dim: a.dim,
                window: a.window,
                negatives: a.negatives,
                min_count: a.min_count,
                epochs: a.epochs,
                seed: g.seed,
                ..SgnsConfig::default()
            };
            let (emb, losses) = train_sgns(&data, vocab.clone(), &config)?;
            vocab.write_tsv(&g.out.join("vocab.tsv"))?;
            emb.write_word2vec(&g.out.join("embeddings.txt"))?;
            println!("{} words, final loss {:.4}", vocab.len(), losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainAbae(a) => {
            let (data, vocab) = load_vocab_and_dataset(&a.dataset, &a.vocab, a.full_text)?;
            let emb = EmbeddingMatrix::read_word2vec(&a.embeddings, vocab)?;
            let config = TrainConfig {
                aspects: a.aspects,
                negatives: a.negatives,
                epochs: a.epochs,
                batch_size: a.batch_size,
                ortho_lambda: a.ortho_lambda,
                learning_rate: a.learning_rate,
                seed: g.seed,
                fine_tune_embeddings: a.fine_tune,
                ..TrainConfig::default()
            };
            let init = AbaeModel::initialize(emb, a.aspects, g.seed)?;
            let (model, losses) = abae::train(init, &data, &config)?;
            let dir = g.out.join("abae");
            let vocab_ref = std::path::absolute(&a.vocab).map_err(|e| Error::io(&a.vocab, e))?;
            let emb_ref = std::path::absolute(&a.embeddings).map_err(|e| Error::io(&a.embeddings, e))?;
            model.write_checkpoint(
                &dir.join("model.ckpt"),
                &vocab_ref.to_string_lossy(),
                &emb_ref.to_string_lossy(),
                &config,
            )?;
            let table = model.extract_aspects(a.top_n)?;
            table.write_tsv(&dir.join("aspects.tsv"))?;
            println!("final loss {:.4}; aspects -> {}", losses.last().copied().unwrap_or(f64::NAN), dir.join("aspects.tsv").display());
        }
        Command::TrainLda(a) => {
            let (data, vocab) = load_vocab_and_dataset(&a.dataset, &a.vocab, a.full_text)?;
            let config = LdaConfig {
                topics: a.topics,
                alpha: a.alpha,
                beta: a.beta,
                iterations: a.iterations,
                seed: g.seed,
            };
            let docs = lda::encode_documents(&data, &vocab);
            let model = lda::train_lda(&docs, vocab, &config)?;
            let dir = g.out.join("lda");
            model.write_counts(&dir.join("counts.tsv"))?;
            model.top_words(a.top_n)?.write_tsv(&dir.join("aspects.tsv"))?;
            println!("topics -> {}", dir.join("aspects.tsv").display());
        }
        Command::EvalCoherence(a) => {
            let table = AspectTable::read_tsv(&a.aspects)?;
            let reference = SentenceDataset::read_jsonl(&a.reference)?;
            let config = CoherenceConfig {
                top_n: a.top_n,
                window: a.window,
                epsilon: a.epsilon,
                gamma: a.gamma,
            };
            let report = coherence::evaluate(&table, &reference, &config)?;
            let csv = report.to_csv(a.threshold, &a.model);
            match a.output {
                Some(p) => write_text(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Sweep(a) => {
            let mut config = base;
            config.seed = g.seed;
            config.out = g.out.clone();
            if let Some(s) = &a.source {
                config.set("source", s)?;
            }
            let pairs: [(&str, Option<String>); 5] = [
                ("data_root", a.data_root.as_ref().map(|p| p.display().to_string())),
                ("target", a.target.clone()),
                ("id_dataset", a.id_dataset.as_ref().map(|p| p.display().to_string())),
                ("ood_dataset", a.ood_dataset.as_ref().map(|p| p.display().to_string())),
                ("thresholds", a.thresholds.clone()),
            ];
            for (k, v) in pairs {
                if let Some(v) = v {
                    config.set(k, &v)?;
                }
            }
            if let Some(k) = a.aspects {
                config.set("aspects", &k.to_string())?;
            }
            for o in &a.overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| Error::Usage(format!("--set expects key=value, got `{o}`")))?;
                config.set(k, v)?;
            }
            let sweep = pipeline::run_pipeline(&config)?;
            print!("{}", sweep.to_csv());
            info!("artifacts in {}", config.out.display());
        }
        Command::Report(a) => {
            let text = std::fs::read_to_string(&a.sweep).map_err(|e| Error::io(&a.sweep, e))?;
            let sweep = SweepResult::from_csv(&text, &a.sweep)?;
            pipeline::report(&sweep, &a.format, &a.output)?;
            println!("{} -> {}", a.format, a.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
