//! Pool-based active learning for discovering new slot types and values in
//! task-oriented dialogue corpora.
//!
//! The pipeline: candidate spans are extracted from utterances and weakly
//! labeled ([`extraction`]), encoded with an inherent + masked-context span
//! representation ([`encoder`]), classified by a two-headed network trained
//! on gold slots and weak labels ([`classifier`]), and selected for
//! annotation by uncertainty and diversity criteria ([`sampling`]). The loop
//! in [`alcore`] ties these together and [`metrics`] scores the result.

pub mod alcore;
pub mod checkpoint;
pub mod classifier;
pub mod convert;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod extraction;
pub mod metrics;
pub mod sampling;
pub mod synthgen;
mod util;

pub use alcore::{
    ActiveLearner, AnnotationSource, IterationRecord, LearnerConfig, OracleAnnotator, StopReason,
};
pub use classifier::{MultiTaskModel, TrainingConfig, WeakMode};
pub use corpus::{CandidateSpan, Corpus, DatasetSplit, SlotCatalog, SpanId, Utterance};
pub use error::{Error, Result};
pub use metrics::{span_f1, SlotEvalResult};
pub use sampling::{SelectionConfig, Strategy};

/// Schema version accepted by [`corpus::load_dataset`] and written by the generators.
pub const SCHEMA_VERSION: &str = "1";
