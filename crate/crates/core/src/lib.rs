//! Kernel-pooling neural ranking (K-NRM) with tooling for studying how
//! independently trained models agree and disagree.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: click logs, vocabularies, click-model labels and a seeded
//!   synthetic corpus generator.
//! - [`model`]: embeddings, translation matrix, Gaussian kernel pooling and
//!   the `tanh` learning-to-rank layer.
//! - [`training`]: pairwise hinge loss, analytic gradients, Adam and early
//!   stopping; multi-trial training farms.
//! - [`eval`]: NDCG@k, MRR and cross-trial summary statistics.
//! - [`analysis`]: top-k agreement, latent weight-pattern classification and
//!   word-pair movement heat maps.
//! - [`ensemble`]: unweighted score-averaging ensembles and pattern-mix grids.
//!
//! Everything that involves randomness takes an explicit `u64` seed.

pub mod analysis;
pub mod data;
pub mod ensemble;
mod error;
pub mod eval;
pub mod model;
pub mod training;

pub use analysis::{
    AgreementHistogram, MovementHeatmap, Pattern, PatternAssignment, PatternLabel,
};
pub use data::{
    Candidate, ClickLogRecord, LabelSet, LabeledPair, QueryGroup, SyntheticCorpus,
    SyntheticCorpusSpec, Vocabulary, PAD, UNK,
};
pub use ensemble::{Ensemble, EnsembleSpec, Selection};
pub use error::{Error, Result};
pub use eval::{EvalLabels, LabelCondition, MetricKey, RankedList, TrialStatistics};
pub use model::{
    EmbeddingTable, KernelBank, RankingWeights, Scorer, SoftTf, TrainedTrial,
    TranslationMatrix,
};
pub use training::{GradientBundle, PreferencePair, TrainConfig, TrainRun};
