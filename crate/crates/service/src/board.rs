//! Leased annotation tasks for one batch.
//!
//! Status moves `pending → assigned → completed | skipped`; an assigned
//! task whose lease has expired falls back to `pending`. Times are passed in
//! as milliseconds so callers control the clock.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use slotdisc::SpanId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Assigned,
    Completed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub slot: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub span_id: SpanId,
    pub utterance_id: String,
    pub tokens: Vec<String>,
    pub start: usize,
    pub length: usize,
    pub weak_label: Option<String>,
    pub suggestions: Vec<Suggestion>,
    pub status: TaskStatus,
    pub annotator: Option<String>,
    pub lease_expiry_ms: Option<u64>,
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotDeclaration {
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum BoardError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{0}` is not leased to `{1}`")]
    NotLeased(String, String),
    #[error("lease on task `{0}` expired")]
    LeaseExpired(String),
    #[error("task `{0}` was already submitted")]
    AlreadyDone(String),
    #[error("{0}")]
    Validation(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBoard {
    pub iteration: usize,
    pub lease_ms: u64,
    pub tasks: Vec<AnnotationTask>,
    /// New slots declared during this batch, by name.
    pub declared: BTreeMap<String, SlotDeclaration>,
}

impl TaskBoard {
    pub fn new(iteration: usize, tasks: Vec<AnnotationTask>, lease_ms: u64) -> Self {
        TaskBoard {
            iteration,
            lease_ms,
            tasks,
            declared: BTreeMap::new(),
        }
    }

    /// Returns expired leases to pending. Reports whether anything changed.
    pub fn expire(&mut self, now_ms: u64) -> bool {
        let mut changed = false;
        for t in &mut self.tasks {
            if t.status == TaskStatus::Assigned && t.lease_expiry_ms.is_some_and(|e| e <= now_ms) {
                t.status = TaskStatus::Pending;
                t.annotator = None;
                t.lease_expiry_ms = None;
                changed = true;
            }
        }
        changed
    }

    /// Puts every assigned task back to pending (used after a restart).
    pub fn release_all(&mut self) {
        for t in &mut self.tasks {
            if t.status == TaskStatus::Assigned {
                t.status = TaskStatus::Pending;
                t.annotator = None;
                t.lease_expiry_ms = None;
            }
        }
    }

    /// Leases up to `max` pending tasks. Tasks already leased to the same
    /// annotator are returned first and have their lease renewed.
    pub fn lease(&mut self, annotator: &str, max: usize, now_ms: u64) -> Vec<AnnotationTask> {
        self.expire(now_ms);
        let expiry = now_ms + self.lease_ms;
        let mut out = Vec::new();
        for t in &mut self.tasks {
            if out.len() >= max {
                break;
            }
            if t.status == TaskStatus::Assigned && t.annotator.as_deref() == Some(annotator) {
                t.lease_expiry_ms = Some(expiry);
                out.push(t.clone());
            }
        }
        for t in &mut self.tasks {
            if out.len() >= max {
                break;
            }
            if t.status == TaskStatus::Pending {
                t.status = TaskStatus::Assigned;
                t.annotator = Some(annotator.to_owned());
                t.lease_expiry_ms = Some(expiry);
                out.push(t.clone());
            }
        }
        out
    }

    fn leased_task(&mut self, task_id: &str, annotator: &str, now_ms: u64) -> Result<&mut AnnotationTask, BoardError> {
        self.expire(now_ms);
        let t = self
            .tasks
            .iter_mut()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| BoardError::UnknownTask(task_id.to_owned()))?;
        match t.status {
            TaskStatus::Completed | TaskStatus::Skipped => Err(BoardError::AlreadyDone(task_id.to_owned())),
            TaskStatus::Pending => Err(BoardError::LeaseExpired(task_id.to_owned())),
            TaskStatus::Assigned if t.annotator.as_deref() != Some(annotator) => {
                Err(BoardError::NotLeased(task_id.to_owned(), annotator.to_owned()))
            }
            TaskStatus::Assigned => Ok(t),
        }
    }

    /// Declares a new slot for this batch. Declaring an existing name again
    /// is a no-op; returns whether the declaration is new.
    pub fn declare(&mut self, name: &str, description: &str) -> Result<bool, BoardError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(BoardError::Validation("slot name must not be empty".into()));
        }
        if self.declared.contains_key(name) {
            return Ok(false);
        }
        self.declared.insert(
            name.to_owned(),
            SlotDeclaration {
                name: name.to_owned(),
                description: description.trim().to_owned(),
            },
        );
        Ok(true)
    }

    /// Records a label. `known` says whether the label is an existing slot;
    /// otherwise it must have been declared in this batch.
    pub fn submit(
        &mut self,
        task_id: &str,
        annotator: &str,
        label: &str,
        known: impl Fn(&str) -> bool,
        now_ms: u64,
    ) -> Result<(), BoardError> {
        let label = label.trim();
        if label.is_empty() {
            return Err(BoardError::Validation("slot name must not be empty".into()));
        }
        if !known(label) && !self.declared.contains_key(label) {
            return Err(BoardError::Validation(format!(
                "`{label}` is neither a known slot nor declared in this batch"
            )));
        }
        let t = self.leased_task(task_id, annotator, now_ms)?;
        t.status = TaskStatus::Completed;
        t.label = Some(label.to_owned());
        t.lease_expiry_ms = None;
        Ok(())
    }

    /// Defers a task; its span returns to the unlabeled pool.
    pub fn skip(&mut self, task_id: &str, annotator: &str, now_ms: u64) -> Result<(), BoardError> {
        let t = self.leased_task(task_id, annotator, now_ms)?;
        t.status = TaskStatus::Skipped;
        t.lease_expiry_ms = None;
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.tasks
            .iter()
            .all(|t| matches!(t.status, TaskStatus::Completed | TaskStatus::Skipped))
    }

    /// Share of tasks completed or skipped; 1 for an empty board.
    pub fn completion_ratio(&self) -> f64 {
        if self.tasks.is_empty() {
            return 1.0;
        }
        let done = self
            .tasks
            .iter()
            .filter(|t| matches!(t.status, TaskStatus::Completed | TaskStatus::Skipped))
            .count();
        done as f64 / self.tasks.len() as f64
    }

    /// `(span, label)` for every completed task.
    pub fn results(&self) -> Vec<(SpanId, String)> {
        self.tasks
            .iter()
            .filter(|t| t.status == TaskStatus::Completed)
            .map(|t| (t.span_id.clone(), t.label.clone().expect("completed tasks carry a label")))
            .collect()
    }
}
