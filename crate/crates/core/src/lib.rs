//! Quality filtering for multilingual pretraining corpora.
//!
//! A logistic-regression quality classifier is trained on labeled seed
//! documents represented by multilingual sentence embeddings, then used to
//! score corpora in any language. Documents scoring strictly above a
//! percentile threshold are kept. Supporting modules cover balanced k-means
//! diagnostics for comparing dataset distributions and token-budget
//! planning for training mixtures.

pub mod classifier;
pub mod cluster;
pub mod corpus;
pub mod embedding;
pub mod pipeline;
pub mod planner;
pub mod provenance;
pub mod threshold;

pub use classifier::{LabeledExample, LinearClassifier, TrainConfig};
pub use cluster::{ClusterHistogram, ClusterModel};
pub use corpus::{CorpusManifest, Document, SamplingStrategy};
pub use embedding::{EmbeddingProvider, EmbeddingProviderConfig, EmbeddingVector};
pub use threshold::{FilterStats, ScoreRecord, ThresholdEstimate};
