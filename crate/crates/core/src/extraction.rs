//! Candidate value extraction, noise filtering and weak labels.
//!
//! Extractors are unioned: a span found by several extractors is kept once,
//! with its vote count incremented and the weak labels of all sources kept
//! in priority order (gazetteer, then pattern, then capitalized chunk). The
//! first of those becomes the span's weak label.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{CandidateSpan, SpanId, Utterance};
use crate::error::{Error, Result};

pub const TIME_LABEL: &str = "time-pattern";
pub const NUMBER_LABEL: &str = "number-pattern";
pub const PRICE_LABEL: &str = "price-pattern";
pub const CAPITALIZED_LABEL: &str = "capitalized-chunk";
pub const GAZETTEER_LABEL: &str = "gazetteer";
pub const OTHER_LABEL: &str = "other";

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// A match inside one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Match {
    pub start: usize,
    pub len: usize,
    pub weak_label: String,
}

pub trait Extractor: Send + Sync {
    fn name(&self) -> &str;
    /// Lower values win when merging weak labels.
    fn priority(&self) -> u8;
    fn extract(&self, utterance: &Utterance) -> std::result::Result<Vec<Match>, String>;
}

/// Longest-match lookup of phrase entries, case-insensitive.
#[derive(Clone, Debug, Default)]
pub struct GazetteerMatcher {
    entries: HashMap<Vec<String>, String>,
    max_len: usize,
}

impl GazetteerMatcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, phrase: &str, label: &str) {
        let key: Vec<String> = phrase.split_whitespace().map(str::to_lowercase).collect();
        if key.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(key.len());
        self.entries.insert(key, label.to_owned());
    }

    /// Parses a gazetteer file: one entry per line, optionally `phrase<TAB>label`.
    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        let mut g = Self::new();
        for line in text.lines() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            match line.split_once('\t') {
                Some((phrase, label)) if !label.trim().is_empty() => g.add(phrase, label.trim()),
                Some((phrase, _)) => g.add(phrase, GAZETTEER_LABEL),
                None => g.add(line, GAZETTEER_LABEL),
            }
        }
        g
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Extractor for GazetteerMatcher {
    fn name(&self) -> &str {
        "gazetteer"
    }

    fn priority(&self) -> u8 {
        0
    }

    fn extract(&self, utterance: &Utterance) -> std::result::Result<Vec<Match>, String> {
        let lower: Vec<String> = utterance.tokens.iter().map(|t| t.to_lowercase()).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < lower.len() {
            let longest = (1..=self.max_len.min(lower.len() - i))
                .rev()
                .find_map(|n| self.entries.get(&lower[i..i + n]).map(|l| (n, l)));
            match longest {
                Some((n, label)) => {
                    out.push(Match {
                        start: i,
                        len: n,
                        weak_label: label.clone(),
                    });
                    i += n;
                }
                None => i += 1,
            }
        }
        Ok(out)
    }
}

/// Class of a single token under the built-in patterns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TokenClass {
    /// A complete time such as `7pm` or `19:30`.
    Time,
    /// An hour-like number that becomes a time when followed by am/pm.
    Number,
    Price,
    Meridiem,
    None,
}

fn patterns() -> &'static [(Regex, TokenClass); 5] {
    static P: OnceLock<[(Regex, TokenClass); 5]> = OnceLock::new();
    P.get_or_init(|| {
        [
            (
                Regex::new(r"^(?i)(\d{1,2}(:\d{2})?(am|pm)|\d{1,2}:\d{2}|noon|midnight)$").unwrap(),
                TokenClass::Time,
            ),
            (Regex::new(r"^(?i)(am|pm|a\.m\.|p\.m\.)$").unwrap(), TokenClass::Meridiem),
            (Regex::new(r"^[$£€]\d+([.,]\d+)?$").unwrap(), TokenClass::Price),
            (Regex::new(r"^\d+([.,]\d+)?$").unwrap(), TokenClass::Number),
            (
                Regex::new(r"^(?i)(one|two|three|four|five|six|seven|eight|nine|ten|eleven|twelve)$")
                    .unwrap(),
                TokenClass::Number,
            ),
        ]
    })
}

fn classify(token: &str) -> TokenClass {
    patterns()
        .iter()
        .find(|(re, _)| re.is_match(token))
        .map_or(TokenClass::None, |(_, c)| *c)
}

/// Numbers, prices and times (`7 pm`, `7pm`, `19:30`, `noon`).
#[derive(Clone, Copy, Debug, Default)]
pub struct PatternMatcher;

impl Extractor for PatternMatcher {
    fn name(&self) -> &str {
        "pattern"
    }

    fn priority(&self) -> u8 {
        1
    }

    fn extract(&self, utterance: &Utterance) -> std::result::Result<Vec<Match>, String> {
        let classes: Vec<TokenClass> = utterance.tokens.iter().map(|t| classify(t)).collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < classes.len() {
            match classes[i] {
                TokenClass::Number if classes.get(i + 1) == Some(&TokenClass::Meridiem) => {
                    out.push(Match {
                        start: i,
                        len: 2,
                        weak_label: TIME_LABEL.into(),
                    });
                    i += 2;
                    continue;
                }
                TokenClass::Time => out.push(Match {
                    start: i,
                    len: 1,
                    weak_label: TIME_LABEL.into(),
                }),
                TokenClass::Number => out.push(Match {
                    start: i,
                    len: 1,
                    weak_label: NUMBER_LABEL.into(),
                }),
                TokenClass::Price => out.push(Match {
                    start: i,
                    len: 1,
                    weak_label: PRICE_LABEL.into(),
                }),
                TokenClass::Meridiem | TokenClass::None => {}
            }
            i += 1;
        }
        Ok(out)
    }
}

fn is_capitalized(token: &str) -> bool {
    token.chars().next().is_some_and(char::is_uppercase)
}

/// Maximal runs of capitalized tokens. A lone capitalized first token is
/// skipped as ordinary sentence capitalization.
#[derive(Clone, Copy, Debug, Default)]
pub struct CapitalizedChunkMatcher;

impl Extractor for CapitalizedChunkMatcher {
    fn name(&self) -> &str {
        "capitalized"
    }

    fn priority(&self) -> u8 {
        2
    }

    fn extract(&self, utterance: &Utterance) -> std::result::Result<Vec<Match>, String> {
        let toks = &utterance.tokens;
        let mut out = Vec::new();
        let mut i = 0;
        while i < toks.len() {
            if !is_capitalized(&toks[i]) {
                i += 1;
                continue;
            }
            let start = i;
            while i < toks.len() && is_capitalized(&toks[i]) {
                i += 1;
            }
            let len = i - start;
            if !(start == 0 && len == 1) {
                out.push(Match {
                    start,
                    len,
                    weak_label: CAPITALIZED_LABEL.into(),
                });
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedSpan {
    pub span: CandidateSpan,
    pub vote_count: u32,
    /// Extractor names that produced this span, in priority order.
    pub sources: Vec<String>,
    /// Weak labels of all sources, in the same order; `span.weak_label` is the first.
    pub weak_labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionFailure {
    pub extractor: String,
    pub utterance_id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractorOutput {
    pub spans: Vec<ExtractedSpan>,
    /// Extractor names in priority order.
    pub sources: Vec<String>,
    /// Raw matches per extractor, before merging.
    pub matches_per_extractor: BTreeMap<String, usize>,
    pub failures: Vec<ExtractionFailure>,
}

/// Runs every extractor on every utterance and unions the results.
///
/// Output is sorted by `(utterance_id, start, len)`; span ids are
/// `{utterance_id}:{start}+{len}`.
pub fn extract_candidates(
    utterances: &[Utterance],
    extractors: &[Box<dyn Extractor>],
) -> Result<ExtractorOutput> {
    if extractors.is_empty() {
        return Err(Error::InvalidArgument("no extractor registered".into()));
    }
    let mut ordered: Vec<&dyn Extractor> = extractors.iter().map(AsRef::as_ref).collect();
    ordered.sort_by_key(|e| e.priority());

    type PerUtt = (Vec<(usize, usize, String, String)>, Vec<ExtractionFailure>);
    let per_utt: Vec<PerUtt> = utterances
        .par_iter()
        .map(|u| {
            let mut found = Vec::new();
            let mut failures = Vec::new();
            for ex in &ordered {
                match ex.extract(u) {
                    Ok(ms) => found.extend(
                        ms.into_iter()
                            .filter(|m| m.len > 0 && m.start + m.len <= u.tokens.len())
                            .map(|m| (m.start, m.len, ex.name().to_owned(), m.weak_label)),
                    ),
                    Err(message) => failures.push(ExtractionFailure {
                        extractor: ex.name().to_owned(),
                        utterance_id: u.id.clone(),
                        message,
                    }),
                }
            }
            (found, failures)
        })
        .collect();

    let mut out = ExtractorOutput {
        sources: ordered.iter().map(|e| e.name().to_owned()).collect(),
        ..Default::default()
    };
    let mut merged: BTreeMap<(String, usize, usize), ExtractedSpan> = BTreeMap::new();
    for (u, (found, failures)) in utterances.iter().zip(per_utt) {
        out.failures.extend(failures);
        for (start, len, source, label) in found {
            *out.matches_per_extractor.entry(source.clone()).or_default() += 1;
            let entry = merged
                .entry((u.id.clone(), start, len))
                .or_insert_with(|| ExtractedSpan {
                    span: CandidateSpan {
                        span_id: SpanId(format!("{}:{start}+{len}", u.id)),
                        utterance_id: u.id.clone(),
                        start,
                        length: len,
                        weak_label: None,
                        gold_label: None,
                    },
                    vote_count: 0,
                    sources: Vec::new(),
                    weak_labels: Vec::new(),
                });
            entry.vote_count += 1;
            entry.sources.push(source);
            entry.weak_labels.push(label);
        }
    }
    for (_, mut s) in merged {
        s.span.weak_label = s.weak_labels.first().cloned();
        out.spans.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub stopwords: HashSet<String>,
    pub min_frequency: u32,
    pub blocklist: HashSet<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            stopwords: parse_word_list(DEFAULT_STOPWORDS),
            min_frequency: 2,
            blocklist: HashSet::new(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_frequency == 0 {
            return Err(Error::InvalidArgument("min_frequency must be >= 1".into()));
        }
        Ok(())
    }
}

/// One entry per line, lowercased; blank lines and `#` comments skipped.
pub fn parse_word_list(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect()
}

/// Occurrence counts of lowercased token n-grams over a corpus.
#[derive(Clone, Debug, Default)]
pub struct CorpusFrequencies {
    counts: HashMap<String, u32>,
    max_n: usize,
}

impl CorpusFrequencies {
    /// Counts every n-gram up to `max_n` tokens.
    pub fn new(utterances: &[Utterance], max_n: usize) -> Self {
        let mut counts: HashMap<String, u32> = HashMap::new();
        for u in utterances {
            let lower: Vec<String> = u.tokens.iter().map(|t| t.to_lowercase()).collect();
            for n in 1..=max_n.min(lower.len()) {
                for w in lower.windows(n) {
                    *counts.entry(w.join(" ")).or_default() += 1;
                }
            }
        }
        CorpusFrequencies { counts, max_n }
    }

    /// Sized to the longest span in `spans`.
    pub fn for_spans<'a>(
        utterances: &[Utterance],
        spans: impl IntoIterator<Item = &'a CandidateSpan>,
    ) -> Self {
        let max_n = spans.into_iter().map(|s| s.length).max().unwrap_or(1);
        Self::new(utterances, max_n)
    }

    pub fn count(&self, text: &str) -> u32 {
        self.counts.get(&text.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn max_n(&self) -> usize {
        self.max_n
    }
}

pub trait HasSpan {
    fn candidate(&self) -> &CandidateSpan;
}

impl HasSpan for CandidateSpan {
    fn candidate(&self) -> &CandidateSpan {
        self
    }
}

impl HasSpan for ExtractedSpan {
    fn candidate(&self) -> &CandidateSpan {
        &self.span
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub removed_stopword: usize,
    pub removed_blocklist: usize,
    pub removed_frequency: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterRule {
    Stopword,
    Blocklist,
    Frequency,
}

/// First rule a span violates, if any.
pub fn violated_rule(text: &str, config: &FilterConfig, freqs: &CorpusFrequencies) -> Option<FilterRule> {
    let lower = text.to_lowercase();
    if config.stopwords.contains(&lower) {
        Some(FilterRule::Stopword)
    } else if config.blocklist.contains(&lower) {
        Some(FilterRule::Blocklist)
    } else if freqs.count(&lower) < config.min_frequency {
        Some(FilterRule::Frequency)
    } else {
        None
    }
}

/// Drops stopwords, blocklisted text and spans rarer than `min_frequency`
/// (threshold applied to the whole span text). Order is preserved.
pub fn filter_candidates<T: HasSpan + Clone>(
    spans: &[T],
    config: &FilterConfig,
    freqs: &CorpusFrequencies,
    utterances: &[Utterance],
) -> Result<(Vec<T>, FilterReport)> {
    config.validate()?;
    let by_id: HashMap<&str, &Utterance> = utterances.iter().map(|u| (u.id.as_str(), u)).collect();
    let mut report = FilterReport {
        input: spans.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(spans.len());
    for item in spans {
        let s = item.candidate();
        let utt = by_id
            .get(s.utterance_id.as_str())
            .ok_or_else(|| Error::UnknownSpan(s.span_id.0.clone()))?;
        let text = utt.tokens[s.start..s.end()].join(" ");
        match violated_rule(&text, config, freqs) {
            Some(FilterRule::Stopword) => report.removed_stopword += 1,
            Some(FilterRule::Blocklist) => report.removed_blocklist += 1,
            Some(FilterRule::Frequency) => report.removed_frequency += 1,
            None => kept.push(item.clone()),
        }
    }
    report.kept = kept.len();
    Ok((kept, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakLabelSource {
    FromData,
    Heuristic,
}

/// Weak label a span would receive from the built-in rules.
pub fn heuristic_weak_label(tokens: &[String]) -> &'static str {
    let classes: Vec<TokenClass> = tokens.iter().map(|t| classify(t)).collect();
    match classes.as_slice() {
        [TokenClass::Time] | [TokenClass::Number, TokenClass::Meridiem] => TIME_LABEL,
        [TokenClass::Price] => PRICE_LABEL,
        [TokenClass::Number] => NUMBER_LABEL,
        _ if tokens.iter().all(|t| is_capitalized(t)) => CAPITALIZED_LABEL,
        _ => OTHER_LABEL,
    }
}

/// Ensures every span carries exactly one non-empty weak label.
pub fn assign_weak_labels(
    spans: &[CandidateSpan],
    source: WeakLabelSource,
    utterances: &[Utterance],
) -> Result<Vec<CandidateSpan>> {
    match source {
        WeakLabelSource::FromData => {
            let missing: Vec<&str> = spans
                .iter()
                .filter(|s| s.weak_label.as_deref().is_none_or(str::is_empty))
                .map(|s| s.span_id.as_str())
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingLabel(missing.join(","), "weak label"));
            }
            Ok(spans.to_vec())
        }
        WeakLabelSource::Heuristic => {
            let by_id: HashMap<&str, &Utterance> =
                utterances.iter().map(|u| (u.id.as_str(), u)).collect();
            spans
                .iter()
                .map(|s| {
                    let utt = by_id
                        .get(s.utterance_id.as_str())
                        .ok_or_else(|| Error::UnknownSpan(s.span_id.0.clone()))?;
                    let mut out = s.clone();
                    out.weak_label = Some(heuristic_weak_label(&utt.tokens[s.start..s.end()]).to_owned());
                    Ok(out)
                })
                .collect()
        }
    }
}

/// The three built-in extractors; the gazetteer is included when given.
pub fn builtin_extractors(gazetteer: Option<GazetteerMatcher>) -> Vec<Box<dyn Extractor>> {
    let mut v: Vec<Box<dyn Extractor>> = Vec::new();
    if let Some(g) = gazetteer {
        v.push(Box::new(g));
    }
    v.push(Box::new(PatternMatcher));
    v.push(Box::new(CapitalizedChunkMatcher));
    v
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn filter_is_subset_and_removed_violate(words in prop::collection::vec("[a-c]{1,2}", 1..30), min_freq in 1u32..4) {
            let u = Utterance { id: "u".into(), tokens: words.clone(), dialogue_id: "d".into(), turn_index: 0 };
            let spans: Vec<CandidateSpan> = (0..words.len()).map(|i| CandidateSpan {
                span_id: SpanId(format!("s{i}")), utterance_id: "u".into(), start: i, length: 1,
                weak_label: None, gold_label: None,
            }).collect();
            let us = vec![u];
            let freqs = CorpusFrequencies::new(&us, 1);
            let config = FilterConfig { stopwords: ["a".to_owned()].into(), min_frequency: min_freq, blocklist: ["bb".to_owned()].into() };
            let (kept, _) = filter_candidates(&spans, &config, &freqs, &us).unwrap();
            let kept_ids: HashSet<&SpanId> = kept.iter().map(|s| &s.span_id).collect();
            for s in &spans {
                let text = &words[s.start];
                let violates = violated_rule(text, &config, &freqs).is_some();
                prop_assert_eq!(kept_ids.contains(&s.span_id), !violates);
            }
        }
    }
}
