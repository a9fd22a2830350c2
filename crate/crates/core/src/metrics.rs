//! Span-level precision, recall and F1 with per-slot weighting, and learning
//! curve aggregation.
//!
//! A span counts as correct only if its identity and label both match.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::SpanKey;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotScore {
    pub precision: f64,
    pub recall: f64,
    /// |E_i|, spans predicted with this slot.
    pub predicted: usize,
    /// |M_i|, gold spans with this slot.
    pub gold: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotEvalResult {
    pub per_slot: BTreeMap<String, SlotScore>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub span_f1: f64,
}

impl SlotEvalResult {
    /// Fixed-width text table, one row per slot then the weighted totals.
    pub fn table(&self) -> String {
        let width = self.per_slot.keys().map(String::len).max().unwrap_or(4).max(8);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>6}  {:>6}\n",
            "slot", "precision", "recall", "|E|", "|M|"
        );
        for (slot, s) in &self.per_slot {
            writeln!(
                out,
                "{slot:<width$}  {:>9.4}  {:>9.4}  {:>6}  {:>6}",
                s.precision, s.recall, s.predicted, s.gold
            )
            .expect("write to string");
        }
        writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  F1 {:.4}",
            "weighted", self.weighted_precision, self.weighted_recall, self.span_f1
        )
        .expect("write to string");
        out
    }
}

/// Span F1 over slot → span-set maps. The slot universe is the union of keys.
pub fn span_f1(
    gold: &BTreeMap<String, BTreeSet<SpanKey>>,
    predicted: &BTreeMap<String, BTreeSet<SpanKey>>,
) -> SlotEvalResult {
    let empty = BTreeSet::new();
    let slots: BTreeSet<&String> = gold.keys().chain(predicted.keys()).collect();
    let mut per_slot = BTreeMap::new();
    let (mut p_num, mut e_total, mut r_num, mut m_total) = (0.0, 0usize, 0.0, 0usize);
    for slot in slots {
        let m = gold.get(slot).unwrap_or(&empty);
        let e = predicted.get(slot).unwrap_or(&empty);
        let correct = m.intersection(e).count();
        let precision = if e.is_empty() { 0.0 } else { correct as f64 / e.len() as f64 };
        let recall = if m.is_empty() { 0.0 } else { correct as f64 / m.len() as f64 };
        p_num += e.len() as f64 * precision;
        r_num += m.len() as f64 * recall;
        e_total += e.len();
        m_total += m.len();
        per_slot.insert(
            slot.clone(),
            SlotScore {
                precision,
                recall,
                predicted: e.len(),
                gold: m.len(),
                correct,
            },
        );
    }
    let p = if e_total == 0 { 0.0 } else { p_num / e_total as f64 };
    let r = if m_total == 0 { 0.0 } else { r_num / m_total as f64 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    SlotEvalResult {
        per_slot,
        weighted_precision: p,
        weighted_recall: r,
        span_f1: f1,
    }
}

/// Groups `(span, label)` pairs into the map form taken by [`span_f1`].
pub fn group_by_label<'a, I>(pairs: I) -> BTreeMap<String, BTreeSet<SpanKey>>
where
    I: IntoIterator<Item = (SpanKey, &'a str)>,
{
    let mut out: BTreeMap<String, BTreeSet<SpanKey>> = BTreeMap::new();
    for (key, label) in pairs {
        out.entry(label.to_owned()).or_default().insert(key);
    }
    out
}

/// One row of a learning curve tagged with its run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub strategy: String,
    pub seed: u64,
    pub iteration: usize,
    pub labeled_fraction: f64,
    pub span_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub strategy: String,
    pub iteration: usize,
    pub labeled_fraction: f64,
    pub mean_f1: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std_f1: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub table: Vec<AggregatePoint>,
    /// Mean over shared points and seeds of `f1(a) - f1(b)` for each ordered pair.
    pub mean_differences: BTreeMap<String, BTreeMap<String, f64>>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-iteration mean and standard deviation of span F1 for each strategy,
/// plus pairwise mean differences.
///
/// All curves of one strategy must share the labeled-fraction axis.
pub fn curve_report(points: &[CurvePoint]) -> Result<CurveReport> {
    let mut grouped: BTreeMap<(&str, usize), Vec<&CurvePoint>> = BTreeMap::new();
    for p in points {
        grouped.entry((&p.strategy, p.iteration)).or_default().push(p);
    }
    let mut table = Vec::new();
    for ((strategy, iteration), ps) in &grouped {
        let fraction = ps[0].labeled_fraction;
        if ps.iter().any(|p| (p.labeled_fraction - fraction).abs() > 1e-9) {
            return Err(Error::InvalidArgument(format!(
                "curves of `{strategy}` disagree on the labeled fraction at iteration {iteration}"
            )));
        }
        let f1s: Vec<f64> = ps.iter().map(|p| p.span_f1).collect();
        let (mean_f1, std_f1) = mean_std(&f1s);
        table.push(AggregatePoint {
            strategy: (*strategy).to_owned(),
            iteration: *iteration,
            labeled_fraction: fraction,
            mean_f1,
            std_f1,
            seeds: ps.len(),
        });
    }

    let mut by_run: BTreeMap<&str, BTreeMap<(u64, usize), f64>> = BTreeMap::new();
    for p in points {
        by_run.entry(&p.strategy).or_default().insert((p.seed, p.iteration), p.span_f1);
    }
    let mut mean_differences: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (a, ca) in &by_run {
        for (b, cb) in &by_run {
            if a == b {
                continue;
            }
            let diffs: Vec<f64> = ca
                .iter()
                .filter_map(|(k, fa)| cb.get(k).map(|fb| fa - fb))
                .collect();
            if !diffs.is_empty() {
                mean_differences
                    .entry((*a).to_owned())
                    .or_default()
                    .insert((*b).to_owned(), diffs.iter().sum::<f64>() / diffs.len() as f64);
            }
        }
    }
    Ok(CurveReport {
        table,
        mean_differences,
    })
}

/// `strategy,labeled_fraction,seed,span_f1`
pub fn plot_data_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("strategy,labeled_fraction,seed,span_f1\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.strategy, p.labeled_fraction, p.seed, p.span_f1).expect("write to string");
    }
    out
}

/// `strategy,labeled_fraction,mean_span_f1,std_span_f1,seeds`
pub fn aggregate_csv(table: &[AggregatePoint]) -> String {
    let mut out = String::from("strategy,labeled_fraction,mean_span_f1,std_span_f1,seeds\n");
    for a in table {
        writeln!(
            out,
            "{},{},{},{},{}",
            a.strategy, a.labeled_fraction, a.mean_f1, a.std_f1, a.seeds
        )
        .expect("write to string");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(i: usize) -> SpanKey {
        SpanKey {
            utterance_id: format!("u{}", i / 3),
            start: i % 3,
            length: 1,
        }
    }

    fn map(entries: &[(&str, &[usize])]) -> BTreeMap<String, BTreeSet<SpanKey>> {
        entries
            .iter()
            .map(|(l, ks)| (l.to_string(), ks.iter().map(|&i| key(i)).collect()))
            .collect()
    }

    #[test]
    fn hand_case() {
        let gold = map(&[("A", &[1, 2]), ("B", &[3])]);
        let pred = map(&[("A", &[1]), ("B", &[3, 4])]);
        let r = span_f1(&gold, &pred);
        assert!((r.weighted_precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.weighted_recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(format!("{:.4}", r.span_f1), "0.6667");
        assert_eq!(r.per_slot["B"].predicted, 2);
    }

    #[test]
    fn degenerate_cases() {
        let gold = map(&[("A", &[1, 2])]);
        assert_eq!(span_f1(&gold, &gold).span_f1, 1.0);
        let r = span_f1(&gold, &BTreeMap::new());
        assert_eq!((r.weighted_precision, r.weighted_recall, r.span_f1), (0.0, 0.0, 0.0));
        assert_eq!(span_f1(&BTreeMap::new(), &BTreeMap::new()).span_f1, 0.0);
        assert!(r.table().contains("weighted"));
    }

    #[test]
    fn curve_report_identities() {
        let pts = |s: &str, f: &[f64]| -> Vec<CurvePoint> {
            f.iter()
                .enumerate()
                .map(|(i, &v)| CurvePoint {
                    strategy: s.into(),
                    seed: 0,
                    iteration: i,
                    labeled_fraction: 0.05 + 0.02 * i as f64,
                    span_f1: v,
                })
                .collect()
        };
        let single = curve_report(&pts("a", &[0.1, 0.4])).unwrap();
        assert_eq!(single.table.iter().map(|p| p.mean_f1).collect::<Vec<_>>(), [0.1, 0.4]);
        assert!(single.table.iter().all(|p| p.std_f1 == 0.0));

        let mut two = pts("a", &[0.1, 0.4]);
        two.extend(pts("b", &[0.1, 0.4]));
        let rep = curve_report(&two).unwrap();
        assert_eq!(rep.mean_differences["a"]["b"], 0.0);

        let mut seeds = pts("a", &[0.2, 0.6]);
        seeds.extend(pts("a", &[0.4, 0.8]).into_iter().map(|mut p| {
            p.seed = 1;
            p
        }));
        let rep = curve_report(&seeds).unwrap();
        assert!((rep.table[1].mean_f1 - 0.7).abs() < 1e-12);
        assert!((rep.table[1].std_f1 - (0.02f64).sqrt()).abs() < 1e-12);

        let mut bad = pts("a", &[0.2]);
        bad.extend(pts("a", &[0.3]).into_iter().map(|mut p| {
            p.seed = 1;
            p.labeled_fraction = 0.5;
            p
        }));
        assert!(curve_report(&bad).is_err());
        assert!(plot_data_csv(&seeds).starts_with("strategy,labeled_fraction,seed,span_f1\n"));
    }

    /// Counts agreements pair by pair without set operations.
    fn counting_oracle(gold: &[(usize, u8)], pred: &[(usize, u8)]) -> (f64, f64, f64) {
        let labels: BTreeSet<u8> = gold.iter().chain(pred).map(|&(_, l)| l).collect();
        let (mut pn, mut pd, mut rn, mut rd) = (0.0, 0usize, 0.0, 0usize);
        for l in labels {
            let m: Vec<usize> = gold.iter().filter(|g| g.1 == l).map(|g| g.0).collect();
            let e: Vec<usize> = pred.iter().filter(|p| p.1 == l).map(|p| p.0).collect();
            let mut c = 0;
            for a in &m {
                for b in &e {
                    if a == b {
                        c += 1;
                    }
                }
            }
            if !e.is_empty() {
                pn += e.len() as f64 * (c as f64 / e.len() as f64);
            }
            if !m.is_empty() {
                rn += m.len() as f64 * (c as f64 / m.len() as f64);
            }
            pd += e.len();
            rd += m.len();
        }
        let p = if pd == 0 { 0.0 } else { pn / pd as f64 };
        let r = if rd == 0 { 0.0 } else { rn / rd as f64 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }

    fn to_map(pairs: &[(usize, u8)]) -> BTreeMap<String, BTreeSet<SpanKey>> {
        let mut m: BTreeMap<String, BTreeSet<SpanKey>> = BTreeMap::new();
        for &(k, l) in pairs {
            m.entry(format!("slot{l}")).or_default().insert(key(k));
        }
        m
    }

    fn dedup(v: Vec<(usize, u8)>) -> Vec<(usize, u8)> {
        let s: BTreeSet<(usize, u8)> = v.into_iter().collect();
        s.into_iter().collect()
    }

    proptest! {
        #[test]
        fn matches_counting_oracle(
            gold in prop::collection::vec((0usize..30, 0u8..4), 0..30),
            pred in prop::collection::vec((0usize..30, 0u8..4), 0..30),
        ) {
            let (gold, pred) = (dedup(gold), dedup(pred));
            let r = span_f1(&to_map(&gold), &to_map(&pred));
            let (p, rc, f) = counting_oracle(&gold, &pred);
            prop_assert_eq!(r.weighted_precision, p);
            prop_assert_eq!(r.weighted_recall, rc);
            prop_assert_eq!(r.span_f1, f);
        }

        #[test]
        fn weighted_average_bounds(
            gold in prop::collection::vec((0usize..30, 0u8..4), 1..30),
            pred in prop::collection::vec((0usize..30, 0u8..4), 1..30),
        ) {
            let r = span_f1(&to_map(&dedup(gold)), &to_map(&dedup(pred)));
            let ps: Vec<f64> = r.per_slot.values().filter(|s| s.predicted > 0).map(|s| s.precision).collect();
            let rs: Vec<f64> = r.per_slot.values().filter(|s| s.gold > 0).map(|s| s.recall).collect();
            let (lo, hi) = ps.iter().fold((1.0f64, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
            prop_assert!(r.weighted_precision >= lo - 1e-12 && r.weighted_precision <= hi + 1e-12);
            let (lo, hi) = rs.iter().fold((1.0f64, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
            prop_assert!(r.weighted_recall >= lo - 1e-12 && r.weighted_recall <= hi + 1e-12);
        }

        #[test]
        fn relabeling_is_invariant(
            gold in prop::collection::vec((0usize..30, 0u8..4), 0..30),
            pred in prop::collection::vec((0usize..30, 0u8..4), 0..30),
        ) {
            let (gold, pred) = (dedup(gold), dedup(pred));
            let perm = |v: &[(usize, u8)]| -> Vec<(usize, u8)> { v.iter().map(|&(k, l)| (k, 3 - l)).collect() };
            let a = span_f1(&to_map(&gold), &to_map(&pred)).span_f1;
            let b = span_f1(&to_map(&perm(&gold)), &to_map(&perm(&pred))).span_f1;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
