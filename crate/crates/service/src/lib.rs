//! HTTP annotation service driving a human-in-the-loop active learning run.
//!
//! The loop alternates between an annotating phase, where a batch is served
//! as leased tasks, and a retraining phase that runs on a blocking worker.
//! State is persisted to `state.ckpt` and `board.json` in the state directory.

pub mod app;
pub mod board;

pub use app::{LoopPhase, ProgressSnapshot, Service, ServiceConfig, ServiceError};
pub use board::{AnnotationTask, BoardError, TaskBoard, TaskStatus};
