//! Fixtures shared by the criterion benches.

use ndarray::Array1;
use slotdisc::sampling::Candidate;
use slotdisc::SpanId;

/// Deterministic pseudo-random candidates with `n_slots`-way distributions
/// and `dim`-dimensional representations.
pub fn candidates(n: usize, n_slots: usize, dim: usize) -> Vec<Candidate> {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    (0..n)
        .map(|i| {
            let raw: Vec<f64> = (0..n_slots).map(|_| next() + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            Candidate {
                span_id: SpanId(format!("s{i:06}")),
                probs: raw.into_iter().map(|p| p / total).collect(),
                repr: Array1::from_iter((0..dim).map(|_| next() - 0.5)),
                weak_label: Some(format!("w{}", i % 6)),
                votes: Vec::new(),
            }
        })
        .collect()
}

pub fn reprs(n: usize, dim: usize) -> Vec<Array1<f64>> {
    candidates(n, 2, dim).into_iter().map(|c| c.repr).collect()
}
