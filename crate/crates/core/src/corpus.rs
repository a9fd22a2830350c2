//! Dataset loading, validation, splitting and the labeled/unlabeled pools.
//!
//! The on-disk format is line-delimited JSON, one utterance per line:
//!
//! ```text
//! {"utterance_id":"u1","dialogue_id":"d1","turn":0,"tokens":["leave","after","7","pm"],
//!  "spans":[{"span_id":"s1","start":2,"len":2,"weak_label":"time-pattern","gold_label":"leave_at"}]}
//! ```
//!
//! `weak_label` and `gold_label` are optional. An optional `"schema"` field,
//! when present, must equal the schema version the caller asked for.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{rng_for, round_count};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpanId(pub String);

impl SpanId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SpanId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SpanId {
    fn from(s: &str) -> Self {
        SpanId(s.to_owned())
    }
}

impl From<String> for SpanId {
    fn from(s: String) -> Self {
        SpanId(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<String>,
    pub dialogue_id: String,
    pub turn_index: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpan {
    pub span_id: SpanId,
    pub utterance_id: String,
    pub start: usize,
    /// Number of tokens; always at least one.
    pub length: usize,
    pub weak_label: Option<String>,
    pub gold_label: Option<String>,
}

/// Exact span identity used for matching in evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanKey {
    pub utterance_id: String,
    pub start: usize,
    pub length: usize,
}

impl CandidateSpan {
    pub fn key(&self) -> SpanKey {
        SpanKey {
            utterance_id: self.utterance_id.clone(),
            start: self.start,
            length: self.length,
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Ordered slot labels plus the subset discovered so far.
///
/// Index `i` of every slot probability vector refers to `labels[i]`; labels
/// are only ever appended so indices are stable for the whole run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCatalog {
    labels: Vec<String>,
    known: Vec<bool>,
}

impl SlotCatalog {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut catalog = SlotCatalog {
            labels: Vec::new(),
            known: Vec::new(),
        };
        for l in labels {
            catalog.push(l.into(), false)?;
        }
        Ok(catalog)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    pub fn is_known(&self, label: &str) -> bool {
        self.index_of(label).is_some_and(|i| self.known[i])
    }

    pub fn is_known_index(&self, index: usize) -> bool {
        self.known[index]
    }

    pub fn known_labels(&self) -> impl Iterator<Item = &str> {
        self.labels
            .iter()
            .zip(&self.known)
            .filter(|(_, k)| **k)
            .map(|(l, _)| l.as_str())
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|k| **k).count()
    }

    /// Appends a label; returns its index.
    pub fn push(&mut self, label: String, known: bool) -> Result<usize> {
        if label.is_empty() {
            return Err(Error::InvalidArgument("empty slot label".into()));
        }
        if self.contains(&label) {
            return Err(Error::DuplicateLabel(label));
        }
        self.labels.push(label);
        self.known.push(known);
        Ok(self.labels.len() - 1)
    }

    /// Marks an existing label as known. Returns `true` when it was not known before.
    pub fn mark_known(&mut self, label: &str) -> Result<bool> {
        let i = self
            .index_of(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_owned()))?;
        let newly = !self.known[i];
        self.known[i] = true;
        Ok(newly)
    }

    /// Binary mask over `labels`: 1.0 for known, 0.0 otherwise.
    pub fn mask(&self) -> Vec<f64> {
        self.known
            .iter()
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    spans: Vec<CandidateSpan>,
    utterance_index: HashMap<String, usize>,
    span_index: HashMap<SpanId, usize>,
}

impl Corpus {
    /// Builds a corpus, validating ids and span bounds.
    pub fn from_parts(utterances: Vec<Utterance>, spans: Vec<CandidateSpan>) -> Result<Self> {
        let mut corpus = Corpus::default();
        for u in utterances {
            corpus.add_utterance(u, 0)?;
        }
        for s in spans {
            corpus.add_span(s, 0)?;
        }
        Ok(corpus)
    }

    fn add_utterance(&mut self, u: Utterance, line: usize) -> Result<()> {
        if u.tokens.is_empty() {
            return Err(Error::Malformed {
                line,
                message: format!("utterance `{}` has no tokens", u.id),
            });
        }
        if self.utterance_index.contains_key(&u.id) {
            return Err(Error::DuplicateId {
                kind: "utterance",
                id: u.id,
            });
        }
        self.utterance_index.insert(u.id.clone(), self.utterances.len());
        self.utterances.push(u);
        Ok(())
    }

    fn add_span(&mut self, s: CandidateSpan, line: usize) -> Result<()> {
        let utt = self.utterance(&s.utterance_id).ok_or_else(|| Error::Malformed {
            line,
            message: format!(
                "span `{}` references unknown utterance `{}`",
                s.span_id, s.utterance_id
            ),
        })?;
        if s.length == 0 || s.end() > utt.tokens.len() {
            return Err(Error::SpanOutOfBounds {
                line,
                span_id: s.span_id.0.clone(),
                start: s.start,
                len: s.length,
                tokens: utt.tokens.len(),
            });
        }
        if self.span_index.contains_key(&s.span_id) {
            return Err(Error::DuplicateId {
                kind: "span",
                id: s.span_id.0,
            });
        }
        self.span_index.insert(s.span_id.clone(), self.spans.len());
        self.spans.push(s);
        Ok(())
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn spans(&self) -> &[CandidateSpan] {
        &self.spans
    }

    pub fn utterance(&self, id: &str) -> Option<&Utterance> {
        self.utterance_index.get(id).map(|&i| &self.utterances[i])
    }

    pub fn span(&self, id: &SpanId) -> Option<&CandidateSpan> {
        self.span_index.get(id).map(|&i| &self.spans[i])
    }

    pub fn get_span(&self, id: &SpanId) -> Result<&CandidateSpan> {
        self.span(id).ok_or_else(|| Error::UnknownSpan(id.0.clone()))
    }

    /// The span together with its utterance.
    pub fn span_with_utterance(&self, id: &SpanId) -> Result<(&CandidateSpan, &Utterance)> {
        let span = self.get_span(id)?;
        let utt = self
            .utterance(&span.utterance_id)
            .expect("span validated against its utterance");
        Ok((span, utt))
    }

    pub fn span_tokens(&self, span: &CandidateSpan) -> &[String] {
        let utt = self
            .utterance(&span.utterance_id)
            .expect("span validated against its utterance");
        &utt.tokens[span.start..span.end()]
    }

    pub fn span_text(&self, span: &CandidateSpan) -> String {
        self.span_tokens(span).join(" ")
    }

    /// Spans belonging to one utterance, in file order.
    pub fn spans_of<'a>(&'a self, utterance_id: &'a str) -> impl Iterator<Item = &'a CandidateSpan> {
        self.spans
            .iter()
            .filter(move |s| s.utterance_id == utterance_id)
    }

    /// Slot catalog over the distinct gold labels, sorted; nothing known yet.
    pub fn slot_catalog(&self) -> SlotCatalog {
        let labels: BTreeSet<&str> = self
            .spans
            .iter()
            .filter_map(|s| s.gold_label.as_deref())
            .collect();
        SlotCatalog::new(labels).expect("distinct labels")
    }

    /// Distinct weak labels, sorted.
    pub fn weak_vocabulary(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .spans
            .iter()
            .filter_map(|s| s.weak_label.as_deref())
            .collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Fails listing every span without a gold label (simulation mode requirement).
    pub fn ensure_gold_labels(&self) -> Result<()> {
        let missing: Vec<&str> = self
            .spans
            .iter()
            .filter(|s| s.gold_label.is_none())
            .map(|s| s.span_id.as_str())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingLabel(missing.join(","), "gold label"))
        }
    }

    pub fn gold_label(&self, id: &SpanId) -> Option<&str> {
        self.span(id).and_then(|s| s.gold_label.as_deref())
    }

    /// Replaces the span list, e.g. after extraction; spans are re-validated.
    pub fn with_spans(&self, spans: Vec<CandidateSpan>) -> Result<Corpus> {
        Corpus::from_parts(self.utterances.clone(), spans)
    }

    /// Writes the corpus in the line-delimited format.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut by_utt: HashMap<&str, Vec<&CandidateSpan>> = HashMap::new();
        for s in &self.spans {
            by_utt.entry(s.utterance_id.as_str()).or_default().push(s);
        }
        for u in &self.utterances {
            let spans = by_utt
                .get(u.id.as_str())
                .map(|v| {
                    v.iter()
                        .map(|s| RawSpan {
                            span_id: s.span_id.0.clone(),
                            start: s.start,
                            len: s.length,
                            weak_label: s.weak_label.clone(),
                            gold_label: s.gold_label.clone(),
                        })
                        .collect()
                })
                .unwrap_or_default();
            let rec = RawRecord {
                schema: None,
                utterance_id: u.id.clone(),
                dialogue_id: u.dialogue_id.clone(),
                turn: u.turn_index,
                tokens: u.tokens.clone(),
                spans,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct RawSpan {
    span_id: String,
    start: usize,
    len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weak_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_label: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema: Option<String>,
    utterance_id: String,
    dialogue_id: String,
    turn: u32,
    tokens: Vec<String>,
    #[serde(default)]
    spans: Vec<RawSpan>,
}

/// Parses a dataset from a reader. Blank lines are ignored.
pub fn parse_dataset<R: BufRead>(reader: R, schema_version: &str) -> Result<Corpus> {
    if schema_version != crate::SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: schema_version.to_owned(),
            expected: crate::SCHEMA_VERSION.to_owned(),
        });
    }
    let mut corpus = Corpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(schema) = &rec.schema {
            if schema != schema_version {
                return Err(Error::SchemaVersion {
                    found: schema.clone(),
                    expected: schema_version.to_owned(),
                });
            }
        }
        let utterance_id = rec.utterance_id.clone();
        corpus.add_utterance(
            Utterance {
                id: rec.utterance_id,
                tokens: rec.tokens,
                dialogue_id: rec.dialogue_id,
                turn_index: rec.turn,
            },
            line_no,
        )?;
        for s in rec.spans {
            corpus.add_span(
                CandidateSpan {
                    span_id: SpanId(s.span_id),
                    utterance_id: utterance_id.clone(),
                    start: s.start,
                    length: s.len,
                    weak_label: s.weak_label.filter(|l| !l.is_empty()),
                    gold_label: s.gold_label.filter(|l| !l.is_empty()),
                },
                line_no,
            )?;
        }
    }
    Ok(corpus)
}

/// Loads a dataset file and builds its slot catalog from the gold labels present.
pub fn load_dataset(path: &Path, schema_version: &str) -> Result<(Corpus, SlotCatalog)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let corpus = parse_dataset(BufReader::new(file), schema_version)?;
    let catalog = corpus.slot_catalog();
    Ok((corpus, catalog))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<SpanId>,
    pub test: BTreeSet<SpanId>,
    pub validation: BTreeSet<SpanId>,
}

/// Split ratios in (train, test, validation) order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            test: 0.1,
            validation: 0.1,
        }
    }
}

/// Uniform random split by span. Gold-labeled spans are divided according to
/// `ratios`; spans without a gold label (human mode) always go to train.
pub fn split_dataset(spans: &[CandidateSpan], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let sum = ratios.train + ratios.test + ratios.validation;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.test, ratios.validation].iter().any(|r| *r < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative and sum to 1, got {sum}"
        )));
    }
    let mut gold: Vec<&SpanId> = spans
        .iter()
        .filter(|s| s.gold_label.is_some())
        .map(|s| &s.span_id)
        .collect();
    if gold.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 gold-labeled spans to split, got {}",
            gold.len()
        )));
    }
    gold.sort();
    let mut rng = rng_for(seed, &[0x5B117]);
    gold.shuffle(&mut rng);

    let n = gold.len();
    let n_test = round_count(ratios.test, n).clamp(1, n - 2);
    let n_val = round_count(ratios.validation, n).clamp(1, n - 1 - n_test);

    let test = gold[..n_test].iter().map(|s| (*s).clone()).collect();
    let validation = gold[n_test..n_test + n_val]
        .iter()
        .map(|s| (*s).clone())
        .collect();
    let mut train: BTreeSet<SpanId> = gold[n_test + n_val..].iter().map(|s| (*s).clone()).collect();
    train.extend(
        spans
            .iter()
            .filter(|s| s.gold_label.is_none())
            .map(|s| s.span_id.clone()),
    );
    Ok(DatasetSplit {
        train,
        test,
        validation,
    })
}

/// The labeled pool D_l and unlabeled pool D_u.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlPools {
    pub labeled: BTreeSet<SpanId>,
    pub unlabeled: BTreeSet<SpanId>,
}

impl AlPools {
    /// Moves spans from unlabeled to labeled. Fails without mutating when any
    /// id is not currently unlabeled.
    pub fn move_to_labeled(&mut self, ids: &[SpanId]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for id in ids {
            if !self.unlabeled.contains(id) || !seen.insert(id) {
                return Err(Error::Protocol(format!(
                    "span `{id}` is not in the unlabeled pool"
                )));
            }
        }
        for id in ids {
            self.unlabeled.remove(id);
            self.labeled.insert(id.clone());
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn labeled_fraction(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.labeled.len() as f64 / self.total() as f64
        }
    }
}

/// Initial pools, the gold labels of the warm-up set, and the catalog with
/// the warm-up labels marked known.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub pools: AlPools,
    pub catalog: SlotCatalog,
    pub labels: BTreeMap<SpanId, String>,
}

/// Draws the warm-up set uniformly over spans of the train split.
///
/// The warm-up size is `round(warmup_fraction * |train|)`. Only spans that
/// carry a gold label are eligible, so in human mode with few gold spans the
/// warm-up may be smaller.
pub fn init_pools(
    corpus: &Corpus,
    train: &BTreeSet<SpanId>,
    catalog: &SlotCatalog,
    warmup_fraction: f64,
    seed: u64,
) -> Result<WarmStart> {
    if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "warm-up fraction must be in (0, 1), got {warmup_fraction}"
        )));
    }
    let target = round_count(warmup_fraction, train.len());
    let mut eligible: Vec<&SpanId> = train
        .iter()
        .filter(|id| corpus.gold_label(id).is_some())
        .collect();
    let mut rng = rng_for(seed, &[0x3A53]);
    eligible.shuffle(&mut rng);
    eligible.truncate(target);
    if eligible.is_empty() {
        return Err(Error::InvalidArgument(
            "warm-up selection is empty".into(),
        ));
    }

    let mut catalog = catalog.clone();
    let mut labels = BTreeMap::new();
    for id in &eligible {
        let gold = corpus.gold_label(id).expect("eligible spans have gold");
        if !catalog.contains(gold) {
            catalog.push(gold.to_owned(), false)?;
        }
        catalog.mark_known(gold)?;
        labels.insert((*id).clone(), gold.to_owned());
    }
    let labeled: BTreeSet<SpanId> = eligible.into_iter().cloned().collect();
    let unlabeled = train.difference(&labeled).cloned().collect();
    Ok(WarmStart {
        pools: AlPools { labeled, unlabeled },
        catalog,
        labels,
    })
}
