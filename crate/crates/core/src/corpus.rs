//! Newsgroup ingestion, sentence splitting, token normalization and the
//! sentence dataset / vocabulary file formats.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const NUM: &str = "<num>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const NUM_ID: usize = 2;
pub const SPECIALS: [&str; 3] = [PAD, UNK, NUM];

/// A post with its header block and quoted text removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub doc_id: String,
    pub newsgroup: String,
    pub body: String,
    /// Set when nothing but header and quotations was present.
    pub empty_after_stripping: bool,
}

/// Result of ingesting one newsgroup directory.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub documents: Vec<RawDocument>,
    /// Files that could not be read, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sent_id: String,
    pub doc_id: String,
    pub domain: String,
    pub tokens: Vec<String>,
}

/// Ordered sentences plus a free-form description of where they came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SentenceDataset {
    pub source: String,
    pub sentences: Vec<Sentence>,
}

/// Token/id bijection with corpus frequencies. `<pad>`, `<unk>` and `<num>`
/// always occupy ids 0, 1 and 2.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    freqs: Vec<u64>,
    min_count: u64,
}

// ---------------------------------------------------------------------------
// ingestion

/// Removes the header block (everything up to the first blank line), quoted
/// lines and "... writes:" attribution lines.
pub fn strip_message(text: &str) -> String {
    let text = text.replace("\r\n", "\n");
    let body = match text.find("\n\n") {
        Some(pos) => &text[pos + 2..],
        None => match text.strip_prefix('\n') {
            Some(rest) => rest,
            None => text.as_str(),
        },
    };
    let kept: Vec<&str> = body
        .lines()
        .filter(|line| !is_quoted(line) && !is_attribution(line))
        .collect();
    kept.join("\n").trim_end().to_string()
}

fn is_quoted(line: &str) -> bool {
    let t = line.trim_start();
    t.starts_with('>') || t.starts_with("|>")
}

fn is_attribution(line: &str) -> bool {
    let t = line.trim_end();
    t.ends_with("writes:") || t.ends_with("wrote:")
}

/// Reads every regular file of a one-file-per-message directory, in file-name
/// order. Unreadable files are recorded in the report and skipped.
pub fn load_newsgroup_dir(path: &Path, newsgroup: &str) -> Result<IngestReport> {
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let p = entry.path();
        if p.is_file() {
            files.push(p);
        }
    }
    if files.is_empty() {
        return Err(Error::Data(format!(
            "newsgroup directory {} contains no message files",
            path.display()
        )));
    }
    files.sort();

    let loaded: Vec<std::result::Result<RawDocument, (PathBuf, String)>> = files
        .par_iter()
        .map(|file| {
            let bytes = fs::read(file).map_err(|e| (file.clone(), e.to_string()))?;
            let text = String::from_utf8_lossy(&bytes);
            let body = strip_message(&text);
            let name = file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(RawDocument {
                doc_id: format!("{newsgroup}/{name}"),
                newsgroup: newsgroup.to_string(),
                empty_after_stripping: body.trim().is_empty(),
                body,
            })
        })
        .collect();

    let mut report = IngestReport::default();
    for item in loaded {
        match item {
            Ok(doc) => report.documents.push(doc),
            Err((file, reason)) => {
                warn!("skipping {}: {reason}", file.display());
                report.failures.push((file, reason));
            }
        }
    }
    Ok(report)
}

/// Lists the newsgroup subdirectories of a `<root>/<newsgroup>/<message>` tree,
/// sorted by name.
pub fn list_newsgroups(root: &Path) -> Result<Vec<String>> {
    let mut groups = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            groups.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    groups.sort();
    Ok(groups)
}

/// Ingests the named newsgroups of a tree into one untruncated dataset
/// (no vocabulary applied yet).
pub fn ingest_groups(root: &Path, groups: &[String]) -> Result<SentenceDataset> {
    let mut sentences = Vec::new();
    for group in groups {
        let report = load_newsgroup_dir(&root.join(group), group)?;
        for doc in &report.documents {
            sentences.extend(document_sentences(doc));
        }
    }
    Ok(SentenceDataset {
        source: format!("{}:{}", root.display(), groups.join(",")),
        sentences,
    })
}

/// Splits and tokenizes one document; spans with no tokens are dropped.
pub fn document_sentences(doc: &RawDocument) -> Vec<Sentence> {
    split_sentences(&doc.body)
        .iter()
        .map(|span| tokenize_normalize(span))
        .filter(|tokens| !tokens.is_empty())
        .enumerate()
        .map(|(i, tokens)| Sentence {
            sent_id: format!("{}#{i}", doc.doc_id),
            doc_id: doc.doc_id.clone(),
            domain: doc.newsgroup.clone(),
            tokens,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// sentence splitting

const ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "sr", "jr", "st", "vs", "e.g", "i.e", "cf", "fig", "no",
    "approx", "inc", "ltd", "co", "corp", "mt", "dept", "est", "resp", "jan", "feb", "mar",
    "apr", "jun", "jul", "aug", "sep", "sept", "oct", "nov", "dec",
];

fn is_abbreviation(word: &str) -> bool {
    let stem = word
        .trim_start_matches(['(', '"', '\''])
        .trim_end_matches('.')
        .to_lowercase();
    if ABBREVIATIONS.contains(&stem.as_str()) {
        return true;
    }
    // initials and dotted acronyms: "j.", "u.s."
    !stem.is_empty()
        && stem
            .split('.')
            .all(|part| part.chars().count() == 1 && part.chars().all(char::is_alphabetic))
}

fn ends_sentence(word: &str) -> Option<char> {
    let core = word.trim_end_matches(['"', '\'', ')', ']']);
    core.chars().last().filter(|c| matches!(c, '.' | '!' | '?'))
}

fn starts_with_capital(word: &str) -> bool {
    word.trim_start_matches(['"', '\'', '(', '['])
        .chars()
        .next()
        .is_some_and(char::is_uppercase)
}

/// Rule-based sentence splitter. Blank lines are hard boundaries; inside a
/// paragraph a span ends at `.`, `!` or `?` followed by a capitalized word or
/// the end of the paragraph, unless the period belongs to a known
/// abbreviation or an initial.
pub fn split_sentences(body: &str) -> Vec<String> {
    let mut spans = Vec::new();
    for paragraph in body.split("\n\n") {
        let words: Vec<&str> = paragraph.split_whitespace().collect();
        let mut current: Vec<&str> = Vec::new();
        for (i, word) in words.iter().enumerate() {
            current.push(word);
            let Some(mark) = ends_sentence(word) else {
                continue;
            };
            let next = words.get(i + 1);
            let boundary = match next {
                None => true,
                Some(next) => starts_with_capital(next),
            };
            if boundary && !(mark == '.' && next.is_some() && is_abbreviation(word)) {
                spans.push(current.join(" "));
                current.clear();
            }
        }
        if !current.is_empty() {
            spans.push(current.join(" "));
        }
    }
    spans
}

// ---------------------------------------------------------------------------
// tokenization

fn is_numeric_chunk(core: &str) -> bool {
    core.chars().any(|c| c.is_ascii_digit())
        && core.chars().next().is_some_and(|c| c.is_ascii_digit())
        && core.chars().last().is_some_and(|c| c.is_ascii_digit())
        && core
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | ',' | '-'))
}

/// Lowercases, strips punctuation except intra-word apostrophes and folds
/// digit runs to `<num>`. Alphabetic runs and digit runs become separate
/// tokens; the special tokens pass through unchanged, which makes the
/// function idempotent on its own output.
pub fn tokenize_normalize(span: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in span.split_whitespace() {
        if SPECIALS.contains(&chunk) {
            out.push(chunk.to_string());
            continue;
        }
        let lower = chunk.to_lowercase().replace('\u{2019}', "'");
        let core = lower.trim_matches(|c: char| !c.is_alphanumeric());
        if is_numeric_chunk(core) {
            out.push(NUM.to_string());
            continue;
        }
        split_runs(&lower, &mut out);
    }
    out
}

fn split_runs(chunk: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = chunk.chars().collect();
    let mut word = String::new();
    let mut digits = false;
    let flush = |word: &mut String, digits: &mut bool, out: &mut Vec<String>| {
        if !word.is_empty() {
            if *digits {
                out.push(NUM.to_string());
            } else {
                out.push(std::mem::take(word));
            }
        }
        word.clear();
        *digits = false;
    };
    for (i, &c) in chars.iter().enumerate() {
        if c.is_numeric() {
            if !digits {
                flush(&mut word, &mut digits, out);
                digits = true;
            }
            word.push(c);
        } else if c.is_alphabetic() {
            if digits {
                flush(&mut word, &mut digits, out);
            }
            word.push(c);
        } else if c == '\''
            && !digits
            && !word.is_empty()
            && chars.get(i + 1).is_some_and(|n| n.is_alphabetic())
        {
            word.push(c);
        } else {
            flush(&mut word, &mut digits, out);
        }
    }
    flush(&mut word, &mut digits, out);
}

// ---------------------------------------------------------------------------
// vocabulary

/// Equality covers tokens and frequencies; `min_count` is not serialized.
impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens && self.freqs == other.freqs
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    /// Counts tokens and keeps those seen at least `min_count` times. Regular
    /// tokens get ids 3.. in descending frequency, ties by token.
    pub fn build(sentences: &[Sentence], min_count: u64) -> Result<Self> {
        if min_count < 1 {
            return Err(Error::Usage("min_count must be at least 1".into()));
        }
        if sentences.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from zero sentences".into()));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for s in sentences {
            for t in &s.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut special_freq = [0u64; 3];
        let mut regular: Vec<(&str, u64)> = Vec::new();
        for (tok, c) in counts {
            if let Some(i) = SPECIALS.iter().position(|s| *s == tok) {
                special_freq[i] += c;
            } else if c >= min_count {
                regular.push((tok, c));
            } else {
                special_freq[UNK_ID] += c;
            }
        }
        regular.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut freqs = special_freq.to_vec();
        for (tok, c) in regular {
            tokens.push(tok.to_string());
            freqs.push(c);
        }
        Ok(Self::from_parts(tokens, freqs, min_count))
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>, min_count: u64) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            ids,
            freqs,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.freqs[id]
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Number of vocabulary entries that are not special tokens.
    pub fn regular_len(&self) -> usize {
        self.len() - SPECIALS.len()
    }

    pub fn encode(&self, sentence: &Sentence) -> Vec<usize> {
        sentence.tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, (t, f)) in self.tokens.iter().zip(&self.freqs).enumerate() {
            out.push_str(&format!("{t}\t{i}\t{f}\n"));
        }
        out
    }

    /// Stable content hash of the TSV serialization.
    pub fn content_hash(&self) -> String {
        util::sha256_hex(self.to_tsv().as_bytes())[..16].to_string()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        util::write_string(path, &self.to_tsv())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = util::read_to_string(path)?;
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, lineno, "expected token<TAB>id<TAB>frequency"));
            }
            let id: usize = fields[1]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad id"))?;
            let freq: u64 = fields[2]
                .parse()
                .map_err(|_| Error::parse(path, lineno, "bad frequency"))?;
            if id != tokens.len() {
                return Err(Error::parse(path, lineno, "ids must be consecutive from 0"));
            }
            if id < SPECIALS.len() && fields[0] != SPECIALS[id] {
                return Err(Error::parse(path, lineno, "special token at wrong id"));
            }
            tokens.push(fields[0].to_string());
            freqs.push(freq);
        }
        if tokens.len() < SPECIALS.len() {
            return Err(Error::parse(path, tokens.len() + 1, "missing special tokens"));
        }
        let min_count = freqs[SPECIALS.len()..].iter().copied().min().unwrap_or(1).max(1);
        let vocab = Self::from_parts(tokens, freqs, min_count);
        if vocab.ids.len() != vocab.tokens.len() {
            return Err(Error::parse(path, 0, "duplicate token"));
        }
        Ok(vocab)
    }
}

/// Builds the vocabulary and rewrites every excluded token to `<unk>`.
pub fn build_vocab(sentences: &mut [Sentence], min_count: u64) -> Result<Vocabulary> {
    let vocab = Vocabulary::build(sentences, min_count)?;
    apply_vocab(sentences, &vocab);
    Ok(vocab)
}

/// Maps tokens missing from `vocab` to `<unk>`.
pub fn apply_vocab(sentences: &mut [Sentence], vocab: &Vocabulary) {
    for s in sentences.iter_mut() {
        for t in s.tokens.iter_mut() {
            if vocab.id(t).is_none() {
                *t = UNK.to_string();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// dataset files

impl SentenceDataset {
    pub fn new(source: impl Into<String>, sentences: Vec<Sentence>) -> Self {
        Self {
            source: source.into(),
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Concatenates the sentences of each post, in order of first appearance,
    /// into one pseudo-sentence per post.
    pub fn full_texts(&self) -> SentenceDataset {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut docs: Vec<Sentence> = Vec::new();
        for s in &self.sentences {
            match index.get(s.doc_id.as_str()) {
                Some(&i) => docs[i].tokens.extend(s.tokens.iter().cloned()),
                None => {
                    index.insert(&s.doc_id, docs.len());
                    docs.push(Sentence {
                        sent_id: s.doc_id.clone(),
                        doc_id: s.doc_id.clone(),
                        domain: s.domain.clone(),
                        tokens: s.tokens.clone(),
                    });
                }
            }
        }
        SentenceDataset::new(format!("{} (full texts)", self.source), docs)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&serde_json::to_string(s).expect("sentence serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = util::create_writer(path)?;
        for s in &self.sentences {
            serde_json::to_writer(&mut w, s)
                .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn parse_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut sentences = Vec::new();
        for (i, line) in text.split_terminator('\n').enumerate() {
            let s: Sentence = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if s.tokens.is_empty() || s.tokens.iter().any(String::is_empty) {
                return Err(Error::parse(path, i + 1, "sentence has empty tokens"));
            }
            sentences.push(s);
        }
        Ok(Self::new(path.display().to_string(), sentences))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = util::read_to_string(path)?;
        Self::parse_jsonl(&text, path)
    }
}
