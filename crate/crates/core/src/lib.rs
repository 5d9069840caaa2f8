//! Out-of-domain sentence filtering for unsupervised aspect extraction.
//!
//! The pipeline ingests newsgroup-style posts, trains a bag-of-words
//! logistic-regression classifier that separates in-domain sentences from
//! sentences of other collections, drops low-scoring sentences, and trains an
//! attention-based aspect autoencoder on what remains. Aspect quality is
//! measured with sliding-window PMI / NPMI topic coherence and compared
//! against collapsed-Gibbs LDA baselines.

pub mod abae;
pub mod coherence;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod lda;
pub mod oodfilter;
pub mod pipeline;
pub mod synthetic;

mod util;

pub use abae::{AbaeModel, AspectTable, ForwardTrace, TrainConfig};
pub use coherence::{CoherenceConfig, CoherenceReport, CooccurrenceCounts};
pub use corpus::{RawDocument, Sentence, SentenceDataset, Vocabulary};
pub use embeddings::{Centroids, EmbeddingMatrix, SgnsConfig};
pub use error::{Error, Result};
pub use lda::{LdaConfig, LdaModel};
pub use oodfilter::{BowVector, OodModel, Threshold};
pub use pipeline::{PipelineConfig, SweepResult};
