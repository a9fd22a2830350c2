//! Query strategies: uncertainty scores, diversity, their combination,
//! margin-then-cluster hybrid and random selection.
//!
//! Every ranking sorts by a priority (higher is picked first) and breaks
//! ties by ascending span id.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, MultiTaskModel};
use crate::corpus::{Corpus, SpanId};
use crate::encoder::TrainableBackend;
use crate::error::{Error, Result};
use crate::util::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Entropy,
    Margin,
    Bald,
    Diversity,
    BiCriteria,
    Hybrid,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Margin,
        Strategy::Bald,
        Strategy::Diversity,
        Strategy::BiCriteria,
        Strategy::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Margin => "margin",
            Strategy::Bald => "bald",
            Strategy::Diversity => "diversity",
            Strategy::BiCriteria => "bi_criteria",
            Strategy::Hybrid => "hybrid",
        }
    }

    fn uses_diversity(self) -> bool {
        matches!(self, Strategy::Diversity | Strategy::BiCriteria)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm || (norm == "bi" && *st == Strategy::BiCriteria))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    /// Batch size as a fraction of the training pool.
    pub batch_fraction: f64,
    /// Weight of the uncertainty term in the bi-criteria score.
    pub beta: f64,
    /// Stochastic forward passes for BALD.
    pub t_passes: usize,
    pub seed: u64,
    /// Hybrid: the coarse margin shortlist holds `ceil(multiplier * k)` spans.
    pub hybrid_coarse_multiplier: f64,
    /// Renormalize masked slot probabilities before scoring.
    pub renormalize_after_mask: bool,
    /// Bi-criteria: add each pick to the labeled set before scoring the next.
    pub incremental_diversity: bool,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: Strategy::BiCriteria,
            batch_fraction: 0.02,
            beta: 0.9,
            t_passes: 5,
            seed: 0,
            hybrid_coarse_multiplier: 3.0,
            renormalize_after_mask: false,
            incremental_diversity: false,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(Error::InvalidArgument("batch fraction must be in (0, 1]".into()));
        }
        if self.t_passes == 0 {
            return Err(Error::InvalidArgument("BALD needs at least one pass".into()));
        }
        if !(self.hybrid_coarse_multiplier >= 1.0) {
            return Err(Error::InvalidArgument("hybrid multiplier must be >= 1".into()));
        }
        Ok(())
    }
}

/// Checked [`entropy`]: rejects negative entries.
pub fn entropy_score(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&x| x < 0.0 || x.is_nan()) {
        return Err(Error::InvalidArgument("probabilities must be non-negative".into()));
    }
    Ok(entropy(p))
}

/// Checked [`margin`]: needs at least two entries.
pub fn margin_score(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::InvalidArgument("margin needs at least two labels".into()));
    }
    Ok(margin(p))
}

/// `-sum p ln p` over entries with `p > 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Difference between the two largest entries (0 for fewer than two).
pub fn margin(p: &[f64]) -> f64 {
    let mut top1 = f64::NEG_INFINITY;
    let mut top2 = f64::NEG_INFINITY;
    for &x in p {
        if x > top1 {
            top2 = top1;
            top1 = x;
        } else if x > top2 {
            top2 = x;
        }
    }
    if top2 == f64::NEG_INFINITY {
        0.0
    } else {
        top1 - top2
    }
}

/// Most frequent prediction and its count; ties go to the smallest label.
pub fn mode_vote(preds: &[usize]) -> Option<(usize, usize)> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in preds {
        *counts.entry(p).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (label, count) in counts {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((label, count));
        }
    }
    best
}

/// `1 - count(mode) / T`.
pub fn bald(preds: &[usize]) -> f64 {
    match mode_vote(preds) {
        Some((_, c)) => 1.0 - c as f64 / preds.len() as f64,
        None => 0.0,
    }
}

fn normalized(v: &Array1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(v).sqrt();
    (n > 0.0).then(|| v / n)
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Option<f64> {
    Some(normalized(a)?.dot(&normalized(b)?))
}

#[derive(Clone, Debug)]
struct UnitSet {
    units: Vec<Option<Array1<f64>>>,
}

impl UnitSet {
    fn new(vs: &[Array1<f64>]) -> Self {
        UnitSet {
            units: vs.iter().map(normalized).collect(),
        }
    }

    /// Largest cosine similarity to the set; zero-norm vectors count as 0 and
    /// an empty set gives 0.
    fn max_similarity(&self, v: Option<&Array1<f64>>) -> f64 {
        let mut best: Option<f64> = None;
        for u in &self.units {
            let s = match (u, v) {
                (Some(u), Some(v)) => u.dot(v),
                _ => 0.0,
            };
            best = Some(best.map_or(s, |b: f64| b.max(s)));
        }
        best.unwrap_or(0.0)
    }
}

/// `-max cos(r, r_l)` over the labeled representations.
pub fn diversity(r: &Array1<f64>, labeled: &[Array1<f64>]) -> f64 {
    -UnitSet::new(labeled).max_similarity(normalized(r).as_ref())
}

/// `beta * (-margin) + (1 - beta) * diversity`.
pub fn bi_criteria_score(margin: f64, diversity: f64, beta: f64) -> f64 {
    beta * (-margin) + (1.0 - beta) * diversity
}

/// One unlabeled span as seen by the selector.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub span_id: SpanId,
    /// Masked (optionally renormalized) slot distribution.
    pub probs: Vec<f64>,
    pub repr: Array1<f64>,
    pub weak_label: Option<String>,
    /// Argmax predictions of the stochastic passes (BALD only).
    pub votes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub span_id: SpanId,
    /// Entropy, BALD disagreement, or margin for the other strategies.
    pub uncertainty: f64,
    pub diversity: Option<f64>,
    /// Ranking priority; higher is selected first.
    pub combined: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Selection {
    pub chosen: Vec<SpanId>,
    pub scores: Vec<SampleScore>,
    /// Candidate and labeled representations with zero norm.
    pub zero_norm_count: usize,
}

fn rank_desc(keys: &[(f64, &SpanId)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| {
        keys[b]
            .0
            .partial_cmp(&keys[a].0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| keys[a].1.cmp(keys[b].1))
    });
    idx
}

/// Picks `k` candidates according to `config.strategy`. `round` seeds the
/// random strategy.
pub fn select_batch(
    candidates: &[Candidate],
    labeled_reprs: &[Array1<f64>],
    k: usize,
    config: &SelectionConfig,
    round: u64,
) -> Result<Selection> {
    config.validate()?;
    if k > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {k} requested from a pool of {}",
            candidates.len()
        )));
    }
    let needs_labeled = match config.strategy {
        Strategy::Diversity => true,
        Strategy::BiCriteria => config.beta < 1.0,
        _ => false,
    };
    if needs_labeled && labeled_reprs.is_empty() {
        return Err(Error::InvalidArgument("diversity needs a non-empty labeled set".into()));
    }
    let margins: Vec<f64> = candidates.iter().map(|c| margin(&c.probs)).collect();
    let labeled = UnitSet::new(labeled_reprs);
    let cand_units: Vec<Option<Array1<f64>>> = candidates.iter().map(|c| normalized(&c.repr)).collect();
    let zero_norm_count = cand_units.iter().filter(|u| u.is_none()).count()
        + labeled.units.iter().filter(|u| u.is_none()).count();
    let diversities: Option<Vec<f64>> = config.strategy.uses_diversity().then(|| {
        cand_units
            .iter()
            .map(|u| -labeled.max_similarity(u.as_ref()))
            .collect()
    });

    let (uncertainty, combined): (Vec<f64>, Vec<f64>) = match config.strategy {
        Strategy::Entropy => {
            let e: Vec<f64> = candidates.iter().map(|c| entropy(&c.probs)).collect();
            (e.clone(), e)
        }
        Strategy::Bald => {
            let b: Vec<f64> = candidates.iter().map(|c| bald(&c.votes)).collect();
            (b.clone(), b)
        }
        Strategy::Margin | Strategy::Hybrid | Strategy::Random => {
            (margins.clone(), margins.iter().map(|m| -m).collect())
        }
        Strategy::Diversity => (margins.clone(), diversities.clone().expect("computed")),
        Strategy::BiCriteria => {
            let d = diversities.as_ref().expect("computed");
            (
                margins.clone(),
                margins
                    .iter()
                    .zip(d)
                    .map(|(&m, &d)| bi_criteria_score(m, d, config.beta))
                    .collect(),
            )
        }
    };

    let chosen_idx: Vec<usize> = match config.strategy {
        Strategy::Random => {
            let mut idx: Vec<usize> = (0..candidates.len()).collect();
            idx.sort_by(|&a, &b| candidates[a].span_id.cmp(&candidates[b].span_id));
            idx.shuffle(&mut rng_for(config.seed, &[0x4A4D, round]));
            idx.truncate(k);
            idx
        }
        Strategy::Hybrid => hybrid_pick(candidates, &margins, k, config.hybrid_coarse_multiplier),
        Strategy::BiCriteria if config.incremental_diversity => {
            let mut labeled = labeled.clone();
            let mut remaining: Vec<usize> = (0..candidates.len()).collect();
            let mut picked = Vec::with_capacity(k);
            while picked.len() < k {
                let keys: Vec<(f64, &SpanId)> = remaining
                    .iter()
                    .map(|&i| {
                        let d = -labeled.max_similarity(cand_units[i].as_ref());
                        (bi_criteria_score(margins[i], d, config.beta), &candidates[i].span_id)
                    })
                    .collect();
                let best = remaining.remove(rank_desc(&keys)[0]);
                labeled.units.push(cand_units[best].clone());
                picked.push(best);
            }
            picked
        }
        _ => {
            let keys: Vec<(f64, &SpanId)> = combined.iter().zip(candidates).map(|(&s, c)| (s, &c.span_id)).collect();
            let mut order = rank_desc(&keys);
            order.truncate(k);
            order
        }
    };

    let scores = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| SampleScore {
            span_id: c.span_id.clone(),
            uncertainty: uncertainty[i],
            diversity: diversities.as_ref().map(|d| d[i]),
            combined: combined[i],
        })
        .collect();
    Ok(Selection {
        chosen: chosen_idx.into_iter().map(|i| candidates[i].span_id.clone()).collect(),
        scores,
        zero_norm_count,
    })
}

/// Lowest-margin shortlist of `ceil(multiplier * k)` spans, grouped by weak
/// label; groups are visited round-robin in order of their best margin.
fn hybrid_pick(candidates: &[Candidate], margins: &[f64], k: usize, multiplier: f64) -> Vec<usize> {
    let keys: Vec<(f64, &SpanId)> = margins.iter().zip(candidates).map(|(&m, c)| (-m, &c.span_id)).collect();
    let mut shortlist = rank_desc(&keys);
    shortlist.truncate(((multiplier * k as f64).ceil() as usize).max(k));
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &shortlist {
        let label = candidates[i].weak_label.as_deref().unwrap_or("");
        groups.entry(label).or_default().push(i);
    }
    let mut groups: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    groups.sort_by(|a, b| {
        margins[a.1[0]]
            .partial_cmp(&margins[b.1[0]])
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    let mut picked = Vec::with_capacity(k);
    let mut depth = 0;
    while picked.len() < k {
        let mut any = false;
        for (_, members) in &groups {
            if let Some(&i) = members.get(depth) {
                any = true;
                if picked.len() < k {
                    picked.push(i);
                }
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    picked
}

/// Scores the given unlabeled spans with the model. BALD pass `t` uses
/// dropout seed `config.seed + t` for every span.
pub fn build_candidates<B: TrainableBackend + Sync>(
    model: &MultiTaskModel<B>,
    corpus: &Corpus,
    ids: &[SpanId],
    mask: &[f64],
    config: &SelectionConfig,
) -> Result<Vec<Candidate>>
where
    B::Cache: Send,
{
    let items = ids
        .iter()
        .map(|id| corpus.span_with_utterance(id).map(|(s, u)| (u, s)))
        .collect::<Result<Vec<_>>>()?;
    let preds = model.predict_many(&items, mask, None)?;
    let mut votes: Vec<Vec<usize>> = vec![Vec::new(); ids.len()];
    if config.strategy == Strategy::Bald {
        for t in 0..config.t_passes {
            let seed = config.seed.wrapping_add(t as u64);
            for (v, p) in votes.iter_mut().zip(model.predict_many(&items, mask, Some(seed))?) {
                v.push(argmax(&p.slot));
            }
        }
    }
    Ok(preds
        .into_iter()
        .zip(votes)
        .zip(&items)
        .map(|((p, votes), (_, span))| {
            let probs = if config.renormalize_after_mask {
                let s: f64 = p.slot.iter().sum();
                if s > 0.0 {
                    p.slot.iter().map(|x| x / s).collect()
                } else {
                    p.slot
                }
            } else {
                p.slot
            };
            Candidate {
                span_id: span.span_id.clone(),
                probs,
                repr: p.repr.r,
                weak_label: span.weak_label.clone(),
                votes,
            }
        })
        .collect())
}

/// `span_id,strategy,uncertainty,diversity,combined`
pub fn scores_csv(strategy: Strategy, scores: &[SampleScore]) -> String {
    let mut out = String::from("span_id,strategy,uncertainty,diversity,combined\n");
    for s in scores {
        let d = s.diversity.map(|d| d.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.span_id, strategy, s.uncertainty, d, s.combined
        ));
    }
    out
}
