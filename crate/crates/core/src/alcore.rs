//! The active-learning loop: warm-up training, then repeated
//! select → annotate → update → expand head → retrain → evaluate.
//!
//! Annotation comes from an [`AnnotationSource`]: the gold-label
//! [`OracleAnnotator`] for simulation, or labels pushed in by a human-facing
//! service through [`ActiveLearner::next_batch`] and
//! [`ActiveLearner::complete_iteration`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Container;
use crate::classifier::{argmax, ModelConfig, MultiTaskModel, Phase, TrainingConfig};
use crate::corpus::{init_pools, split_dataset, AlPools, Corpus, DatasetSplit, SlotCatalog, SpanId, SplitRatios};
use crate::encoder::ReferenceEncoder;
use crate::error::{Error, Result};
use crate::metrics::{group_by_label, span_f1, SlotEvalResult};
use crate::sampling::{build_candidates, select_batch, SampleScore, Selection, SelectionConfig, Strategy};
use crate::util::{derive_seed, round_count};

const STATE_KIND: &str = "ALSTATE";
const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    /// Run seed. Warm-up, initialization, training and selection seeds are
    /// all derived from it; the seeds inside the component configs are ignored.
    pub seed: u64,
    pub split_seed: u64,
    pub split: SplitRatios,
    pub warmup_fraction: f64,
    /// Stop once this fraction of the train pool is labeled. `None` runs until
    /// the pool is empty.
    pub budget_fraction: Option<f64>,
    /// Stop after this many iterations without validation improvement.
    pub patience: Option<usize>,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub selection: SelectionConfig,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            seed: 0,
            split_seed: 0,
            split: SplitRatios::default(),
            warmup_fraction: 0.05,
            budget_fraction: Some(0.21),
            patience: Some(3),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            selection: SelectionConfig::default(),
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.selection.validate()?;
        if let Some(b) = self.budget_fraction {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::InvalidArgument(format!("budget fraction must be in (0, 1], got {b}")));
            }
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        Ok(())
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: derive_seed(self.seed, &[0x30DE1]),
            ..self.model.clone()
        }
    }

    fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            seed: derive_seed(self.seed, &[0x7A1]),
            ..self.training.clone()
        }
    }

    fn selection_config(&self, iteration: usize) -> SelectionConfig {
        SelectionConfig {
            seed: derive_seed(self.seed, &[0x5E1, iteration as u64]),
            ..self.selection.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PoolExhausted,
    BudgetReached,
    Patience,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub precision: f64,
    pub recall: f64,
    pub span_f1: f64,
}

impl From<&SlotEvalResult> for EvalSummary {
    fn from(r: &SlotEvalResult) -> Self {
        EvalSummary {
            precision: r.weighted_precision,
            recall: r.weighted_recall,
            span_f1: r.span_f1,
        }
    }
}

/// One row of the loop history. Iteration 0 is the warm-up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub selected: Vec<SpanId>,
    pub annotated: usize,
    pub labeled: usize,
    pub labeled_fraction: f64,
    /// Slots that became known in this iteration.
    pub new_slots: Vec<String>,
    pub known_slots: usize,
    pub test: EvalSummary,
    pub validation: EvalSummary,
    /// Largest probability any sampling-time distribution put on an unknown slot.
    pub max_unknown_mass: f64,
    pub zero_norm_count: usize,
    pub train_loss: f64,
}

/// A batch waiting for annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingBatch {
    pub iteration: usize,
    pub span_ids: Vec<SpanId>,
    pub scores: Vec<SampleScore>,
    pub max_unknown_mass: f64,
    pub zero_norm_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlState {
    pub pools: AlPools,
    pub labels: BTreeMap<SpanId, String>,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
    pub pending: Option<PendingBatch>,
    pub best_validation_f1: f64,
    pub rounds_without_improvement: usize,
    pub stop: Option<StopReason>,
}

pub trait AnnotationSource {
    /// Labels for some or all of `ids`.
    fn annotate(&mut self, corpus: &Corpus, ids: &[SpanId]) -> Result<Vec<(SpanId, String)>>;
}

/// Returns gold labels verbatim.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleAnnotator;

impl AnnotationSource for OracleAnnotator {
    fn annotate(&mut self, corpus: &Corpus, ids: &[SpanId]) -> Result<Vec<(SpanId, String)>> {
        ids.iter()
            .map(|id| {
                corpus
                    .gold_label(id)
                    .map(|g| (id.clone(), g.to_owned()))
                    .ok_or_else(|| Error::MissingLabel(id.to_string(), "gold"))
            })
            .collect()
    }
}

/// Span F1 of the model's masked argmax predictions on `ids`.
pub fn evaluate_spans(
    model: &MultiTaskModel<ReferenceEncoder>,
    corpus: &Corpus,
    ids: &BTreeSet<SpanId>,
) -> Result<SlotEvalResult> {
    let spans = ids
        .iter()
        .map(|id| corpus.span_with_utterance(id))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = spans.iter().map(|(s, u)| (*u, *s)).collect();
    let preds = model.predict_many(&items, &model.mask(), None)?;
    let catalog = model.catalog();
    let mut gold = Vec::with_capacity(spans.len());
    for (s, _) in &spans {
        let g = s
            .gold_label
            .as_deref()
            .ok_or_else(|| Error::MissingLabel(s.span_id.to_string(), "gold"))?;
        gold.push((s.key(), g));
    }
    let predicted = spans
        .iter()
        .zip(&preds)
        .map(|((s, _), p)| (s.key(), catalog.label(argmax(&p.slot))));
    Ok(span_f1(&group_by_label(gold), &group_by_label(predicted)))
}

pub struct ActiveLearner {
    config: LearnerConfig,
    corpus: Corpus,
    split: DatasetSplit,
    model: MultiTaskModel<ReferenceEncoder>,
    state: AlState,
}

impl ActiveLearner {
    /// Splits the corpus, draws the warm-up set, trains the initial model
    /// and records iteration 0.
    ///
    /// `catalog` lists the slots the head is created with; it may contain
    /// labels that are not yet known (oracle mode) or be empty (human mode).
    pub fn new(corpus: Corpus, catalog: &SlotCatalog, config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        let split = split_dataset(corpus.spans(), config.split, config.split_seed)?;
        let warm = init_pools(
            &corpus,
            &split.train,
            catalog,
            config.warmup_fraction,
            derive_seed(config.seed, &[0xAA]),
        )?;
        let model = MultiTaskModel::reference(&config.model_config(), warm.catalog.clone(), &corpus.weak_vocabulary())?;
        let mut learner = ActiveLearner {
            config,
            corpus,
            split,
            model,
            state: AlState {
                pools: warm.pools,
                labels: warm.labels,
                iteration: 0,
                history: Vec::new(),
                pending: None,
                best_validation_f1: f64::NEG_INFINITY,
                rounds_without_improvement: 0,
                stop: None,
            },
        };
        let examples = learner.model.examples(&learner.corpus, &learner.state.labels)?;
        let log = learner.model.train(&examples, &learner.config.training_config(), Phase::Initial)?;
        let (test, validation) = learner.evaluate()?;
        learner.state.best_validation_f1 = validation.span_f1;
        let known: Vec<String> = learner.model.catalog().known_labels().map(str::to_owned).collect();
        learner.state.history.push(IterationRecord {
            iteration: 0,
            selected: learner.state.labels.keys().cloned().collect(),
            annotated: learner.state.labels.len(),
            labeled: learner.state.pools.labeled.len(),
            labeled_fraction: learner.state.pools.labeled_fraction(),
            known_slots: known.len(),
            new_slots: known,
            test,
            validation,
            max_unknown_mass: 0.0,
            zero_norm_count: 0,
            train_loss: log.last().map_or(0.0, |e| e.total_loss),
        });
        learner.check_stop();
        Ok(learner)
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn split(&self) -> &DatasetSplit {
        &self.split
    }

    pub fn model(&self) -> &MultiTaskModel<ReferenceEncoder> {
        &self.model
    }

    pub fn state(&self) -> &AlState {
        &self.state
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.state.history
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.state.stop
    }

    fn budget_cap(&self) -> usize {
        let train = self.state.pools.total();
        self.config
            .budget_fraction
            .map_or(train, |b| round_count(b, train))
    }

    /// Size of the next batch: `min(round(batch_fraction * |train|), |D_u|, cap - |D_l|)`.
    pub fn next_batch_size(&self) -> usize {
        let p = &self.state.pools;
        round_count(self.config.selection.batch_fraction, p.total())
            .max(1)
            .min(p.unlabeled.len())
            .min(self.budget_cap().saturating_sub(p.labeled.len()))
    }

    fn evaluate(&self) -> Result<(EvalSummary, EvalSummary)> {
        let test = evaluate_spans(&self.model, &self.corpus, &self.split.test)?;
        let val = evaluate_spans(&self.model, &self.corpus, &self.split.validation)?;
        Ok(((&test).into(), (&val).into()))
    }

    fn check_stop(&mut self) {
        if self.state.stop.is_some() {
            return;
        }
        let p = &self.state.pools;
        self.state.stop = if p.unlabeled.is_empty() {
            Some(StopReason::PoolExhausted)
        } else if p.labeled.len() >= self.budget_cap() {
            Some(StopReason::BudgetReached)
        } else if self
            .config
            .patience
            .is_some_and(|n| self.state.rounds_without_improvement >= n)
        {
            Some(StopReason::Patience)
        } else {
            None
        };
    }

    fn select(&self, config: &SelectionConfig, k: usize, iteration: usize) -> Result<(Selection, f64)> {
        let mask = self.model.mask();
        let pool: Vec<SpanId> = self.state.pools.unlabeled.iter().cloned().collect();
        let candidates = build_candidates(&self.model, &self.corpus, &pool, &mask, config)?;
        let max_unknown_mass = candidates
            .iter()
            .flat_map(|c| c.probs.iter().zip(&mask).filter(|(_, m)| **m == 0.0).map(|(p, _)| *p))
            .fold(0.0, f64::max);
        let labeled_ids: Vec<SpanId> = self.state.pools.labeled.iter().cloned().collect();
        let labeled_items = labeled_ids
            .iter()
            .map(|id| self.corpus.span_with_utterance(id).map(|(s, u)| (u, s)))
            .collect::<Result<Vec<_>>>()?;
        let labeled_reprs: Vec<_> = self
            .model
            .predict_many(&labeled_items, &mask, None)?
            .into_iter()
            .map(|p| p.repr.r)
            .collect();
        let selection = select_batch(&candidates, &labeled_reprs, k, config, iteration as u64)?;
        Ok((selection, max_unknown_mass))
    }

    /// Scores the current unlabeled pool as the next selection round would,
    /// optionally with a different strategy. Does not change any state.
    pub fn score_pool(&self, strategy: Option<Strategy>) -> Result<Selection> {
        let iteration = self.state.iteration + 1;
        let mut config = self.config.selection_config(iteration);
        if let Some(s) = strategy {
            config.strategy = s;
        }
        let k = self.next_batch_size().max(1).min(self.state.pools.unlabeled.len());
        Ok(self.select(&config, k, iteration)?.0)
    }

    /// Selects the next batch, or returns the pending one if it has not been
    /// completed. `None` once a stopping rule has fired.
    pub fn next_batch(&mut self) -> Result<Option<PendingBatch>> {
        if let Some(p) = &self.state.pending {
            return Ok(Some(p.clone()));
        }
        if self.state.stop.is_some() {
            return Ok(None);
        }
        let k = self.next_batch_size();
        let iteration = self.state.iteration + 1;
        let (selection, max_unknown_mass) = self.select(&self.config.selection_config(iteration), k, iteration)?;
        if let Some(id) = selection.chosen.iter().find(|id| self.state.pools.labeled.contains(*id)) {
            return Err(Error::Protocol(format!("selection returned labeled span `{id}`")));
        }
        let batch = PendingBatch {
            iteration,
            span_ids: selection.chosen,
            scores: selection.scores,
            max_unknown_mass,
            zero_norm_count: selection.zero_norm_count,
        };
        self.state.pending = Some(batch.clone());
        Ok(Some(batch))
    }

    /// Applies annotations for the pending batch, expands the slot head for
    /// new labels, retrains and evaluates. Spans of the batch without an
    /// annotation go back to the unlabeled pool.
    pub fn complete_iteration(&mut self, annotations: Vec<(SpanId, String)>) -> Result<IterationRecord> {
        let batch = self
            .state
            .pending
            .clone()
            .ok_or_else(|| Error::Protocol("no pending batch".into()))?;
        let requested: BTreeSet<&SpanId> = batch.span_ids.iter().collect();
        let mut seen = BTreeSet::new();
        for (id, label) in &annotations {
            if !requested.contains(id) {
                return Err(Error::Protocol(format!("annotation for unrequested span `{id}`")));
            }
            if !seen.insert(id) {
                return Err(Error::Protocol(format!("span `{id}` annotated twice")));
            }
            if label.trim().is_empty() {
                return Err(Error::InvalidArgument(format!("empty label for span `{id}`")));
            }
        }

        let mut new_slots = Vec::new();
        let mut unseen = Vec::new();
        for (_, label) in &annotations {
            if self.model.catalog().contains(label) {
                if self.model.mark_known(label)? {
                    new_slots.push(label.clone());
                }
            } else if !unseen.contains(label) {
                unseen.push(label.clone());
            }
        }
        self.model.expand_slot_head(&unseen)?;
        new_slots.extend(unseen);

        let ids: Vec<SpanId> = annotations.iter().map(|(id, _)| id.clone()).collect();
        self.state.pools.move_to_labeled(&ids)?;
        self.state.labels.extend(annotations);
        self.state.pending = None;
        self.state.iteration = batch.iteration;

        let mut train_loss = self.state.history.last().map_or(0.0, |r| r.train_loss);
        if !ids.is_empty() {
            let examples = self.model.examples(&self.corpus, &self.state.labels)?;
            let log = self.model.train(
                &examples,
                &self.config.training_config(),
                Phase::Incremental {
                    iteration: batch.iteration as u64,
                },
            )?;
            train_loss = log.last().map_or(train_loss, |e| e.total_loss);
        }
        let (test, validation) = self.evaluate()?;
        if validation.span_f1 > self.state.best_validation_f1 {
            self.state.best_validation_f1 = validation.span_f1;
            self.state.rounds_without_improvement = 0;
        } else {
            self.state.rounds_without_improvement += 1;
        }
        let record = IterationRecord {
            iteration: batch.iteration,
            selected: batch.span_ids,
            annotated: ids.len(),
            labeled: self.state.pools.labeled.len(),
            labeled_fraction: self.state.pools.labeled_fraction(),
            new_slots,
            known_slots: self.model.catalog().known_count(),
            test,
            validation,
            max_unknown_mass: batch.max_unknown_mass,
            zero_norm_count: batch.zero_norm_count,
            train_loss,
        };
        self.state.history.push(record.clone());
        self.check_stop();
        Ok(record)
    }

    /// Runs until a stopping rule fires.
    pub fn run(&mut self, source: &mut dyn AnnotationSource) -> Result<StopReason> {
        while let Some(batch) = self.next_batch()? {
            let labels = source.annotate(&self.corpus, &batch.span_ids)?;
            self.complete_iteration(labels)?;
        }
        Ok(self.state.stop.expect("loop ends only on a stop reason"))
    }

    /// Top `n` known slots for a span under the current model.
    pub fn suggestions(&self, id: &SpanId, n: usize) -> Result<Vec<(String, f64)>> {
        let (span, utt) = self.corpus.span_with_utterance(id)?;
        let p = self.model.predict(utt, span, &self.model.mask(), None)?;
        let mut ranked: Vec<(usize, f64)> = p.slot.iter().copied().enumerate().filter(|(i, _)| self.model.catalog().is_known_index(*i)).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        Ok(ranked
            .into_iter()
            .take(n)
            .map(|(i, p)| (self.model.catalog().label(i).to_owned(), p))
            .collect())
    }

    /// `iteration,labeled_fraction,span_f1,known_slots,new_slots_discovered`,
    /// the last column counting slots discovered after the warm-up.
    pub fn learning_curve_csv(&self) -> String {
        learning_curve_csv(&self.state.history)
    }

    pub fn events_jsonl(&self) -> String {
        events_jsonl(&self.state.history)
    }

    pub fn to_container(&self) -> Result<Container> {
        let model = self.model.to_container();
        let header = serde_json::json!({
            "version": STATE_VERSION,
            "corpus_digest": corpus_digest(&self.corpus)?,
            "config": self.config,
            "split": self.split,
            "state": self.state,
            "model": model.header,
        });
        Ok(Container {
            kind: STATE_KIND.to_owned(),
            header,
            tensors: model.tensors,
        })
    }

    /// Writes the full loop state atomically.
    pub fn checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn from_container(c: Container, corpus: Corpus) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
            corpus_digest: String,
            config: LearnerConfig,
            split: DatasetSplit,
            state: AlState,
            model: serde_json::Value,
        }
        let h: Header = serde_json::from_value(c.header)?;
        if h.version != STATE_VERSION {
            return Err(Error::SchemaVersion {
                found: h.version.to_string(),
                expected: STATE_VERSION.to_string(),
            });
        }
        if h.corpus_digest != corpus_digest(&corpus)? {
            return Err(Error::Checkpoint("checkpoint was written for a different corpus".into()));
        }
        let model = MultiTaskModel::from_container(Container {
            kind: "MODEL".to_owned(),
            header: h.model,
            tensors: c.tensors,
        })?;
        Ok(ActiveLearner {
            config: h.config,
            corpus,
            split: h.split,
            model,
            state: h.state,
        })
    }

    pub fn resume(path: &Path, corpus: Corpus) -> Result<Self> {
        Self::from_container(Container::load(path, STATE_KIND)?, corpus)
    }
}

/// Hex SHA-256 of the corpus in its canonical line format.
pub fn corpus_digest(corpus: &Corpus) -> Result<String> {
    let mut buf = Vec::new();
    corpus
        .write_jsonl(&mut buf)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(hex(&Sha256::digest(&buf)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        write!(s, "{b:02x}").expect("write to string");
        s
    })
}

pub fn learning_curve_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,labeled_fraction,span_f1,known_slots,new_slots_discovered\n");
    let mut discovered = 0;
    for r in history {
        if r.iteration > 0 {
            discovered += r.new_slots.len();
        }
        writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.iteration, r.labeled_fraction, r.test.span_f1, r.known_slots, discovered
        )
        .expect("write to string");
    }
    out
}

/// One `selection` line per iteration and one `discovery` line per new slot.
pub fn events_jsonl(history: &[IterationRecord]) -> String {
    let mut out = String::new();
    for r in history {
        let sel = serde_json::json!({
            "event": if r.iteration == 0 { "warmup" } else { "selection" },
            "iteration": r.iteration,
            "span_ids": r.selected,
            "annotated": r.annotated,
            "labeled_fraction": r.labeled_fraction,
            "test_span_f1": r.test.span_f1,
            "validation_span_f1": r.validation.span_f1,
        });
        out.push_str(&sel.to_string());
        out.push('\n');
        for slot in &r.new_slots {
            let ev = serde_json::json!({"event": "discovery", "iteration": r.iteration, "slot": slot});
            out.push_str(&ev.to_string());
            out.push('\n');
        }
    }
    out
}
