//! Generator for a small two-domain corpus with known topic structure.
//!
//! The in-domain set mixes topic sentences (words drawn from one of several
//! disjoint topic vocabularies) with topic-free filler sentences drawn from a
//! Zipfian background vocabulary. The out-of-domain set contains filler only,
//! so a classifier can learn to recognise filler and the filter can remove it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Sentence, SentenceDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub filler_words: usize,
    pub topic_sentences: usize,
    pub id_filler_sentences: usize,
    pub ood_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a token of a topic sentence comes from the filler
    /// vocabulary instead of the topic.
    pub filler_share: f64,
    pub sentences_per_doc: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            topics: 3,
            words_per_topic: 30,
            filler_words: 100,
            topic_sentences: 1400,
            id_filler_sentences: 600,
            ood_sentences: 6000,
            min_len: 6,
            max_len: 12,
            filler_share: 0.0,
            sentences_per_doc: 5,
            seed: 1,
        }
    }
}

/// A generated corpus with its generating partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub id: SentenceDataset,
    pub ood: SentenceDataset,
    pub topic_words: Vec<Vec<String>>,
    pub filler_words: Vec<String>,
}

/// Maps `n` to a lowercase letter string (bijective base 26).
fn letters(mut n: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'a' + (n % 26) as u8);
        n /= 26;
        if n == 0 {
            break;
        }
        n -= 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

pub fn topic_word(topic: usize, index: usize) -> String {
    format!("top{}x{}", letters(topic), letters(index))
}

pub fn filler_word(index: usize) -> String {
    format!("fill{}", letters(index))
}

struct Zipf {
    cumulative: Vec<f64>,
}

impl Zipf {
    fn new(n: usize) -> Self {
        let mut acc = 0.0;
        let cumulative = (1..=n)
            .map(|r| {
                acc += 1.0 / r as f64;
                acc
            })
            .collect();
        Self { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(0.0);
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if config.topics < 1 || config.words_per_topic < 2 || config.filler_words < 2 {
        return Err(Error::Usage("synthetic corpus needs topics and at least 2 words each".into()));
    }
    if config.min_len < 1 || config.max_len < config.min_len || config.sentences_per_doc < 1 {
        return Err(Error::Usage("bad synthetic sentence or document length".into()));
    }
    if !(0.0..1.0).contains(&config.filler_share) {
        return Err(Error::Usage("filler_share must be in [0, 1)".into()));
    }
    let topic_words: Vec<Vec<String>> = (0..config.topics)
        .map(|t| (0..config.words_per_topic).map(|i| topic_word(t, i)).collect())
        .collect();
    let filler: Vec<String> = (0..config.filler_words).map(filler_word).collect();
    let zipf = Zipf::new(config.filler_words);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let filler_sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(config.min_len..=config.max_len);
        (0..len).map(|_| filler[zipf.sample(rng)].clone()).collect()
    };

    // Shuffle topic and filler slots so that documents mix both kinds.
    let total_id = config.topic_sentences + config.id_filler_sentences;
    let mut kinds: Vec<bool> = (0..total_id).map(|i| i < config.topic_sentences).collect();
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }
    let mut id = Vec::with_capacity(total_id);
    let mut doc_topic = 0;
    for (i, &is_topic) in kinds.iter().enumerate() {
        let doc = i / config.sentences_per_doc;
        if i % config.sentences_per_doc == 0 {
            doc_topic = rng.random_range(0..config.topics);
        }
        let tokens = if is_topic {
            let len = rng.random_range(config.min_len..=config.max_len);
            (0..len)
                .map(|_| {
                    if rng.random_bool(config.filler_share) {
                        filler[zipf.sample(&mut rng)].clone()
                    } else {
                        topic_words[doc_topic][rng.random_range(0..config.words_per_topic)].clone()
                    }
                })
                .collect()
        } else {
            filler_sentence(&mut rng)
        };
        id.push(Sentence {
            sent_id: format!("synth.id/{doc}#{}", i % config.sentences_per_doc),
            doc_id: format!("synth.id/{doc}"),
            domain: "synth.id".into(),
            tokens,
        });
    }
    let ood = (0..config.ood_sentences)
        .map(|i| {
            let doc = i / config.sentences_per_doc;
            Sentence {
                sent_id: format!("synth.ood/{doc}#{}", i % config.sentences_per_doc),
                doc_id: format!("synth.ood/{doc}"),
                domain: "synth.ood".into(),
                tokens: filler_sentence(&mut rng),
            }
        })
        .collect();
    Ok(SyntheticCorpus {
        id: SentenceDataset::new("synth.id", id),
        ood: SentenceDataset::new("synth.ood", ood),
        topic_words,
        filler_words: filler,
    })
}
