use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;

use oodaspect::abae::{ortho_penalty, AbaeModel};
use oodaspect::coherence::{self, CoherenceConfig};
use oodaspect::corpus::{self, Sentence, SentenceDataset, Vocabulary};
use oodaspect::embeddings::EmbeddingMatrix;
use oodaspect::oodfilter::{self, Threshold};

fn sentence(i: usize, tokens: Vec<String>) -> Sentence {
    Sentence {
        sent_id: format!("d{i}#0"),
        doc_id: format!("d{i}"),
        domain: "p".into(),
        tokens,
    }
}

fn small_corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(
        prop::collection::vec(prop::sample::select(vec!["ohm", "volt", "amp", "watt", "farad"]), 1..12),
        1..10,
    )
    .prop_map(|s| s.into_iter().map(|t| t.into_iter().map(String::from).collect()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenizer_is_idempotent(text in "[ -~\\n’]{0,80}") {
        let once = corpus::tokenize_normalize(&text);
        let twice = corpus::tokenize_normalize(&once.join(" "));
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn dataset_jsonl_roundtrips(sents in small_corpus()) {
        let data = SentenceDataset::new(
            "p",
            sents.into_iter().enumerate().map(|(i, t)| sentence(i, t)).collect(),
        );
        let text = data.to_jsonl();
        let back = SentenceDataset::parse_jsonl(&text, std::path::Path::new("p.jsonl")).unwrap();
        prop_assert_eq!(back.sentences, data.sentences);
    }

    #[test]
    fn pmi_is_symmetric_and_coherence_ignores_word_order(sents in small_corpus(), window in 2usize..6) {
        let data = SentenceDataset::new(
            "p",
            sents.into_iter().enumerate().map(|(i, t)| sentence(i, t)).collect(),
        );
        let counts = coherence::count_windows(&data, window).unwrap();
        let words: Vec<String> = ["ohm", "volt", "amp", "watt"].iter().map(|s| s.to_string()).collect();
        for a in &words {
            for b in &words {
                let ab = coherence::pmi(&counts, a, b, 1e-10);
                let ba = coherence::pmi(&counts, b, a, 1e-10);
                prop_assert!((ab - ba).abs() < 1e-12);
            }
        }
        let config = CoherenceConfig { top_n: 4, window, ..CoherenceConfig::default() };
        let mut reversed = words.clone();
        reversed.reverse();
        let c1 = coherence::coherence_npmi(&counts, &words, &config).unwrap();
        let c2 = coherence::coherence_npmi(&counts, &reversed, &config).unwrap();
        prop_assert!((c1 - c2).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c1));
    }

    #[test]
    fn filtering_with_a_trained_model_is_monotone(
        id in small_corpus(),
        ood in small_corpus(),
        mut grid in prop::collection::vec(0.0f64..1.0, 1..6),
    ) {
        let id = SentenceDataset::new("id", id.into_iter().enumerate().map(|(i, t)| sentence(i, t)).collect());
        let ood = SentenceDataset::new("ood", ood.into_iter().enumerate().map(|(i, t)| sentence(i, t)).collect());
        let (model, _) = oodfilter::train_ood(&id, &ood, 1.0, 50).unwrap();
        grid.push(0.0);
        grid.sort_by(f64::total_cmp);
        let mut last = f64::INFINITY;
        for t in grid {
            let f = oodfilter::filter_dataset(&id, &model, Threshold::new(t).unwrap());
            prop_assert!(f.retention <= last);
            if t == 0.0 {
                prop_assert_eq!(&f.dataset.sentences, &id.sentences);
            }
            last = f.retention;
        }
    }

    #[test]
    fn ortho_penalty_is_nonnegative(values in prop::collection::vec(-5.0f64..5.0, 12)) {
        let t = Array2::from_shape_vec((3, 4), values).unwrap();
        if t.outer_iter().all(|r| r.dot(&r) > 1e-12) {
            let (p, _) = ortho_penalty(&t).unwrap();
            prop_assert!(p >= 0.0);
        }
    }

    #[test]
    fn permuting_a_sentence_permutes_attention(
        values in prop::collection::vec(-2.0f64..2.0, 8 * 5),
        ids in prop::collection::vec(3usize..8, 1..7),
        rotate in 0usize..7,
    ) {
        let words: Vec<String> = (0..5).map(|i| format!("w{i}")).collect();
        let vocab = Arc::new(Vocabulary::build(&[sentence(0, words)], 1).unwrap());
        let emb = EmbeddingMatrix::new(vocab, Array2::from_shape_vec((8, 5), values).unwrap()).unwrap();
        let model = AbaeModel::initialize(emb, 3, 1).unwrap();
        let mut permuted = ids.clone();
        let r = rotate % ids.len();
        permuted.rotate_left(r);
        let t1 = model.forward(&ids).unwrap();
        let t2 = model.forward(&permuted).unwrap();
        for i in 0..ids.len() {
            prop_assert!((t2.attention[i] - t1.attention[(i + r) % ids.len()]).abs() < 1e-12);
        }
        for (a, b) in t1.aspect_probs.iter().zip(t2.aspect_probs.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in t1.reconstruction.iter().zip(t2.reconstruction.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
