//! Span representations over a pluggable contextual token encoder.
//!
//! For a span `x[i..=i+k]` of an utterance:
//!
//! * the inherent part is the mean of the encoder outputs computed on the
//!   span tokens alone;
//! * the context part is the mean of the encoder outputs at the span
//!   positions after every span token has been replaced by the mask token;
//! * the final representation is `r = tanh(W1 [inherent; context] + b1)`.
//!
//! [`ReferenceEncoder`] is a small trainable backend: hashed token
//! embeddings plus sinusoidal positions, one residual self-attention mixing
//! layer, and inverted dropout on the output.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::checkpoint::Tensor;
use crate::corpus::{CandidateSpan, Utterance};
use crate::error::{Error, Result};
use crate::util::{derive_seed, rng_for, str_hash};

pub const MASK_TOKEN: &str = "[MASK]";

/// Contextual token encoder, inference side.
///
/// Implementations must return one row per input token, be deterministic
/// for `dropout_seed = None`, and deterministic per seed otherwise.
pub trait EncoderBackend: Send + Sync {
    fn dim(&self) -> usize;
    fn mask_token(&self) -> &str;
    fn embed(&self, tokens: &[String], dropout_seed: Option<u64>) -> Result<Array2<f64>>;
}

/// Identifies one trainable slice of a backend (a whole tensor or one row).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub tensor: u32,
    pub row: u32,
}

/// Training side of a backend: explicit forward cache and backward pass.
pub trait TrainableBackend: EncoderBackend + Clone {
    type Cache: Send;
    type Grads: Send;

    fn forward(&self, tokens: &[String], dropout_seed: Option<u64>) -> Result<(Array2<f64>, Self::Cache)>;
    /// Accumulates parameter gradients given the gradient of the outputs.
    fn backward(&self, cache: &Self::Cache, d_out: ArrayView2<f64>, grads: &mut Self::Grads);
    fn zero_grads(&self) -> Self::Grads;
    fn add_grads(&self, into: &mut Self::Grads, other: &Self::Grads);
    /// Non-empty gradient slices, in a deterministic order.
    fn grad_entries<'a>(&self, grads: &'a Self::Grads) -> Vec<(ParamId, &'a [f64])>;
    fn param_mut(&mut self, id: ParamId) -> &mut [f64];
    fn param(&self, id: ParamId) -> &[f64];

    fn config_json(&self) -> serde_json::Value;
    fn export_tensors(&self) -> Vec<Tensor>;
    fn import(config: &serde_json::Value, tensors: Vec<Tensor>) -> Result<Self>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceEncoderConfig {
    /// Hash buckets for the token embedding table; the mask token gets its own extra row.
    pub buckets: usize,
    pub dim: usize,
    pub dropout: f64,
    /// Scale of the sinusoidal position signal added to embeddings.
    pub position_scale: f64,
    /// Standard deviation of the embedding initialization.
    pub embedding_std: f64,
    pub seed: u64,
}

impl Default for ReferenceEncoderConfig {
    fn default() -> Self {
        ReferenceEncoderConfig {
            buckets: 1 << 15,
            dim: 64,
            dropout: 0.1,
            position_scale: 0.5,
            embedding_std: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceEncoder {
    config: ReferenceEncoderConfig,
    embeddings: Array2<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
}

const T_EMB: u32 = 0;
const T_WQ: u32 = 1;
const T_WK: u32 = 2;
const T_WV: u32 = 3;

pub struct ReferenceCache {
    ids: Vec<usize>,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    /// Inverted-dropout multipliers, when dropout was active.
    drop: Option<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct ReferenceGrads {
    pub embeddings: BTreeMap<usize, Array1<f64>>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

impl ReferenceEncoder {
    pub fn new(config: ReferenceEncoderConfig) -> Result<Self> {
        if config.buckets == 0 || config.dim == 0 {
            return Err(Error::InvalidArgument("encoder buckets and dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {}",
                config.dropout
            )));
        }
        let mut rng = rng_for(config.seed, &[0xE1C0]);
        let d = config.dim;
        let att_std = 1.0 / (d as f64).sqrt();
        let embeddings = normal_matrix(config.buckets + 1, d, config.embedding_std, &mut rng);
        let wq = normal_matrix(d, d, att_std, &mut rng);
        let wk = normal_matrix(d, d, att_std, &mut rng);
        let wv = normal_matrix(d, d, att_std, &mut rng);
        Ok(ReferenceEncoder {
            config,
            embeddings,
            wq,
            wk,
            wv,
        })
    }

    pub fn config(&self) -> &ReferenceEncoderConfig {
        &self.config
    }

    fn bucket(&self, token: &str) -> usize {
        if token == MASK_TOKEN {
            self.config.buckets
        } else {
            (str_hash(token) % self.config.buckets as u64) as usize
        }
    }

    fn position_signal(&self, n: usize) -> Array2<f64> {
        let d = self.config.dim;
        Array2::from_shape_fn((n, d), |(p, j)| {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = p as f64 * freq;
            self.config.position_scale * if j % 2 == 0 { angle.sin() } else { angle.cos() }
        })
    }

    fn dropout_mask(&self, n: usize, seed: u64) -> Array2<f64> {
        let keep = 1.0 - self.config.dropout;
        let mut m = Array2::zeros((n, self.config.dim));
        for (p, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
            let mut rng = rng_for(seed, &[p as u64]);
            for x in row.iter_mut() {
                *x = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
            }
        }
        m
    }
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

impl EncoderBackend for ReferenceEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn mask_token(&self) -> &str {
        MASK_TOKEN
    }

    fn embed(&self, tokens: &[String], dropout_seed: Option<u64>) -> Result<Array2<f64>> {
        self.forward(tokens, dropout_seed).map(|(out, _)| out)
    }
}

impl TrainableBackend for ReferenceEncoder {
    type Cache = ReferenceCache;
    type Grads = ReferenceGrads;

    fn forward(&self, tokens: &[String], dropout_seed: Option<u64>) -> Result<(Array2<f64>, ReferenceCache)> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty token sequence".into()));
        }
        let n = tokens.len();
        let d = self.config.dim;
        let ids: Vec<usize> = tokens.iter().map(|t| self.bucket(t)).collect();
        let mut h = self.position_signal(n);
        for (mut row, &id) in h.axis_iter_mut(Axis(0)).zip(&ids) {
            row += &self.embeddings.row(id);
        }
        let q = h.dot(&self.wq.t());
        let k = h.dot(&self.wk.t());
        let v = h.dot(&self.wv.t());
        let mut attn = q.dot(&k.t()) / (d as f64).sqrt();
        softmax_rows(&mut attn);
        let mut out = &h + &attn.dot(&v);
        let drop = match dropout_seed {
            Some(seed) if self.config.dropout > 0.0 => {
                let m = self.dropout_mask(n, seed);
                out *= &m;
                Some(m)
            }
            _ => None,
        };
        Ok((
            out,
            ReferenceCache {
                ids,
                h,
                q,
                k,
                v,
                attn,
                drop,
            },
        ))
    }

    fn backward(&self, cache: &ReferenceCache, d_out: ArrayView2<f64>, grads: &mut ReferenceGrads) {
        let d = self.config.dim;
        let d_o = match &cache.drop {
            Some(m) => &d_out * m,
            None => d_out.to_owned(),
        };
        // O = H + A V (residual)
        let mut d_h = d_o.clone();
        let d_a = d_o.dot(&cache.v.t());
        let d_v = cache.attn.t().dot(&d_o);
        // row-wise softmax backward
        let row_dot = (&d_a * &cache.attn).sum_axis(Axis(1));
        let mut d_s = &cache.attn * &(&d_a - &row_dot.insert_axis(Axis(1)));
        d_s /= (d as f64).sqrt();
        let d_q = d_s.dot(&cache.k);
        let d_k = d_s.t().dot(&cache.q);

        grads.wq += &d_q.t().dot(&cache.h);
        grads.wk += &d_k.t().dot(&cache.h);
        grads.wv += &d_v.t().dot(&cache.h);
        d_h += &d_q.dot(&self.wq);
        d_h += &d_k.dot(&self.wk);
        d_h += &d_v.dot(&self.wv);

        for (row, &id) in d_h.axis_iter(Axis(0)).zip(&cache.ids) {
            *grads
                .embeddings
                .entry(id)
                .or_insert_with(|| Array1::zeros(d)) += &row;
        }
    }

    fn zero_grads(&self) -> ReferenceGrads {
        let d = self.config.dim;
        ReferenceGrads {
            embeddings: BTreeMap::new(),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
        }
    }

    fn add_grads(&self, into: &mut ReferenceGrads, other: &ReferenceGrads) {
        for (id, g) in &other.embeddings {
            match into.embeddings.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    into.embeddings.insert(*id, g.clone());
                }
            }
        }
        into.wq += &other.wq;
        into.wk += &other.wk;
        into.wv += &other.wv;
    }

    fn grad_entries<'a>(&self, grads: &'a ReferenceGrads) -> Vec<(ParamId, &'a [f64])> {
        let mut v: Vec<(ParamId, &[f64])> = grads
            .embeddings
            .iter()
            .map(|(id, g)| {
                (
                    ParamId {
                        tensor: T_EMB,
                        row: *id as u32,
                    },
                    g.as_slice().expect("contiguous"),
                )
            })
            .collect();
        for (t, m) in [(T_WQ, &grads.wq), (T_WK, &grads.wk), (T_WV, &grads.wv)] {
            v.push((ParamId { tensor: t, row: 0 }, m.as_slice().expect("contiguous")));
        }
        v
    }

    fn param_mut(&mut self, id: ParamId) -> &mut [f64] {
        match id.tensor {
            T_EMB => self
                .embeddings
                .row_mut(id.row as usize)
                .into_slice()
                .expect("contiguous row"),
            T_WQ => self.wq.as_slice_mut().expect("contiguous"),
            T_WK => self.wk.as_slice_mut().expect("contiguous"),
            T_WV => self.wv.as_slice_mut().expect("contiguous"),
            t => panic!("unknown reference encoder tensor {t}"),
        }
    }

    fn param(&self, id: ParamId) -> &[f64] {
        match id.tensor {
            T_EMB => {
                let d = self.config.dim;
                let start = id.row as usize * d;
                &self.embeddings.as_slice().expect("contiguous")[start..start + d]
            }
            T_WQ => self.wq.as_slice().expect("contiguous"),
            T_WK => self.wk.as_slice().expect("contiguous"),
            T_WV => self.wv.as_slice().expect("contiguous"),
            t => panic!("unknown reference encoder tensor {t}"),
        }
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    fn export_tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::from_array2("encoder.embeddings", &self.embeddings),
            Tensor::from_array2("encoder.wq", &self.wq),
            Tensor::from_array2("encoder.wk", &self.wk),
            Tensor::from_array2("encoder.wv", &self.wv),
        ]
    }

    fn import(config: &serde_json::Value, tensors: Vec<Tensor>) -> Result<Self> {
        let config: ReferenceEncoderConfig = serde_json::from_value(config.clone())?;
        let mut by_name: BTreeMap<String, Tensor> =
            tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?
                .into_array2(rows, cols)
        };
        let d = config.dim;
        Ok(ReferenceEncoder {
            embeddings: take("encoder.embeddings", config.buckets + 1, d)?,
            wq: take("encoder.wq", d, d)?,
            wk: take("encoder.wk", d, d)?,
            wv: take("encoder.wv", d, d)?,
            config,
        })
    }
}

/// `r = tanh(W1 [inherent; context] + b1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Projection {
    /// Xavier-normal weights, zero bias.
    pub fn new(out_dim: usize, in_dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0x9801]);
        let std = (2.0 / (out_dim + in_dim) as f64).sqrt();
        Projection {
            weight: normal_matrix(out_dim, in_dim, std, &mut rng),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        if z.len() != self.in_dim() || self.bias.len() != self.out_dim() {
            return Err(Error::Dimension(format!(
                "projection expects input {} (bias {}), got {}",
                self.in_dim(),
                self.bias.len(),
                z.len()
            )));
        }
        Ok((self.weight.dot(&z) + &self.bias).mapv(f64::tanh))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanRepresentation {
    pub r: Array1<f64>,
    pub r_inherent: Array1<f64>,
    pub r_context: Array1<f64>,
}

pub(crate) fn check_span(utterance: &Utterance, span: &CandidateSpan) -> Result<()> {
    if span.utterance_id != utterance.id {
        return Err(Error::InvalidArgument(format!(
            "span `{}` belongs to utterance `{}`, not `{}`",
            span.span_id, span.utterance_id, utterance.id
        )));
    }
    if span.length == 0 || span.end() > utterance.tokens.len() {
        return Err(Error::SpanOutOfBounds {
            line: 0,
            span_id: span.span_id.0.clone(),
            start: span.start,
            len: span.length,
            tokens: utterance.tokens.len(),
        });
    }
    Ok(())
}

/// The utterance with each span token replaced by the mask token.
pub fn masked_tokens(utterance: &Utterance, span: &CandidateSpan, mask_token: &str) -> Vec<String> {
    let mut toks = utterance.tokens.clone();
    for t in &mut toks[span.start..span.end()] {
        *t = mask_token.to_owned();
    }
    toks
}

/// Seeds for the two encoder calls of one span under one dropout seed.
pub(crate) fn sub_seeds(seed: Option<u64>) -> (Option<u64>, Option<u64>) {
    (
        seed.map(|s| derive_seed(s, &[1])),
        seed.map(|s| derive_seed(s, &[2])),
    )
}

pub fn inherent_representation<B: EncoderBackend + ?Sized>(
    backend: &B,
    utterance: &Utterance,
    span: &CandidateSpan,
    dropout_seed: Option<u64>,
) -> Result<Array1<f64>> {
    check_span(utterance, span)?;
    let out = backend.embed(&utterance.tokens[span.start..span.end()], sub_seeds(dropout_seed).0)?;
    Ok(out.mean_axis(Axis(0)).expect("non-empty span"))
}

pub fn context_representation<B: EncoderBackend + ?Sized>(
    backend: &B,
    utterance: &Utterance,
    span: &CandidateSpan,
    dropout_seed: Option<u64>,
) -> Result<Array1<f64>> {
    check_span(utterance, span)?;
    let toks = masked_tokens(utterance, span, backend.mask_token());
    let out = backend.embed(&toks, sub_seeds(dropout_seed).1)?;
    Ok(out
        .slice(s![span.start..span.end(), ..])
        .mean_axis(Axis(0))
        .expect("non-empty span"))
}

pub fn encode_span<B: EncoderBackend + ?Sized>(
    backend: &B,
    projection: &Projection,
    utterance: &Utterance,
    span: &CandidateSpan,
    dropout_seed: Option<u64>,
) -> Result<SpanRepresentation> {
    if projection.in_dim() != 2 * backend.dim() {
        return Err(Error::Dimension(format!(
            "projection input {} != 2 x encoder dim {}",
            projection.in_dim(),
            backend.dim()
        )));
    }
    let r_inherent = inherent_representation(backend, utterance, span, dropout_seed)?;
    let r_context = context_representation(backend, utterance, span, dropout_seed)?;
    let z = ndarray::concatenate(Axis(0), &[r_inherent.view(), r_context.view()]).expect("1-d concat");
    let r = projection.apply(z.view())?;
    Ok(SpanRepresentation {
        r,
        r_inherent,
        r_context,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SpanId;
    use approx::assert_abs_diff_eq;

    fn small() -> ReferenceEncoder {
        ReferenceEncoder::new(ReferenceEncoderConfig {
            buckets: 97,
            dim: 8,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn utt(text: &str) -> Utterance {
        Utterance {
            id: "u".into(),
            tokens: text.split_whitespace().map(str::to_owned).collect(),
            dialogue_id: "d".into(),
            turn_index: 0,
        }
    }

    fn span(start: usize, length: usize) -> CandidateSpan {
        CandidateSpan {
            span_id: SpanId("s".into()),
            utterance_id: "u".into(),
            start,
            length,
            weak_label: None,
            gold_label: None,
        }
    }

    #[test]
    fn single_token_inherent_equals_embedding() {
        let enc = small();
        let u = utt("book a cheap room");
        let r = inherent_representation(&enc, &u, &span(2, 1), None).unwrap();
        let e = enc.embed(&["cheap".to_owned()], None).unwrap();
        assert_eq!(r, e.row(0));
    }

    #[test]
    fn inherent_is_mean_of_span_outputs() {
        let enc = small();
        let u = utt("book a cheap room");
        let r = inherent_representation(&enc, &u, &span(2, 2), None).unwrap();
        let e = enc.embed(&u.tokens[2..4], None).unwrap();
        let expected = (&e.row(0) + &e.row(1)) / 2.0;
        for (a, b) in r.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        for len in 1..=4 {
            assert_eq!(inherent_representation(&enc, &u, &span(0, len), None).unwrap().len(), 8);
        }
    }

    #[test]
    fn masked_sequence_keeps_length() {
        let u = utt("a b c d e");
        let m = masked_tokens(&u, &span(1, 3), MASK_TOKEN);
        assert_eq!(m.len(), 5);
        assert_eq!(m, ["a", MASK_TOKEN, MASK_TOKEN, MASK_TOKEN, "e"]);
    }

    #[test]
    fn same_context_same_representation() {
        let enc = small();
        let a = context_representation(&enc, &utt("stay in the north please"), &span(3, 1), None).unwrap();
        let b = context_representation(&enc, &utt("stay in the south please"), &span(3, 1), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn whole_utterance_span_pools_all_masks() {
        let enc = small();
        let u = utt("x y z");
        let c = context_representation(&enc, &u, &span(0, 3), None).unwrap();
        let out = enc.embed(&vec![MASK_TOKEN.to_owned(); 3], None).unwrap();
        let mean = out.mean_axis(Axis(0)).unwrap();
        assert_eq!(c, mean);
    }

    #[test]
    fn zero_projection_gives_zero_vector() {
        let enc = small();
        let proj = Projection {
            weight: Array2::zeros((5, 16)),
            bias: Array1::zeros(5),
        };
        let rep = encode_span(&enc, &proj, &utt("a b c"), &span(1, 1), None).unwrap();
        assert!(rep.r.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn projection_dimension_mismatch() {
        let enc = small();
        let proj = Projection::new(4, 10, 0);
        assert!(matches!(
            encode_span(&enc, &proj, &utt("a b"), &span(0, 1), None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn invalid_span_is_rejected() {
        let enc = small();
        assert!(inherent_representation(&enc, &utt("a b"), &span(1, 2), None).is_err());
    }

    #[test]
    fn dropout_determinism() {
        let enc = small();
        let toks: Vec<String> = "a b c d".split(' ').map(str::to_owned).collect();
        assert_eq!(enc.embed(&toks, Some(5)).unwrap(), enc.embed(&toks, Some(5)).unwrap());
        assert_eq!(enc.embed(&toks, None).unwrap(), enc.embed(&toks, None).unwrap());
        let differs = (0..5u64)
            .map(|s| enc.embed(&toks, Some(s)).unwrap())
            .collect::<Vec<_>>()
            .windows(2)
            .any(|w| w[0] != w[1]);
        assert!(differs);
    }

    #[test]
    fn mask_token_has_dedicated_row() {
        let enc = small();
        assert_eq!(enc.bucket(MASK_TOKEN), 97);
        assert!(enc.bucket("anything") < 97);
    }

    #[test]
    fn tensors_round_trip() {
        let enc = small();
        let back = ReferenceEncoder::import(&enc.config_json(), enc.export_tensors()).unwrap();
        assert_eq!(enc, back);
    }

    fn loss_of(enc: &ReferenceEncoder, toks: &[String], weights: &Array2<f64>) -> f64 {
        let (out, _) = enc.forward(toks, Some(11)).unwrap();
        (&out * weights).sum() + 0.5 * out.mapv(|x| x * x).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut enc = small();
        let toks: Vec<String> = "a b a c".split(' ').map(str::to_owned).collect();
        let mut rng = rng_for(1, &[]);
        let weights = normal_matrix(4, 8, 1.0, &mut rng);
        let (out, cache) = enc.forward(&toks, Some(11)).unwrap();
        let d_out = &weights + &out;
        let mut grads = enc.zero_grads();
        enc.backward(&cache, d_out.view(), &mut grads);
        let entries: Vec<(ParamId, Vec<f64>)> = enc
            .grad_entries(&grads)
            .into_iter()
            .map(|(id, g)| (id, g.to_vec()))
            .collect();
        assert_eq!(entries.len(), 3 + 3);
        let eps = 1e-6;
        for (id, g) in entries {
            for j in 0..g.len() {
                let orig = enc.param(id)[j];
                enc.param_mut(id)[j] = orig + eps;
                let plus = loss_of(&enc, &toks, &weights);
                enc.param_mut(id)[j] = orig - eps;
                let minus = loss_of(&enc, &toks, &weights);
                enc.param_mut(id)[j] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                let rel = (fd - g[j]).abs() / fd.abs().max(g[j].abs()).max(1e-6);
                assert!(rel < 1e-5, "{id:?}[{j}]: analytic {} vs fd {fd}", g[j]);
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::corpus::SpanId;
    use proptest::prelude::*;

    fn enc() -> ReferenceEncoder {
        ReferenceEncoder::new(ReferenceEncoderConfig {
            buckets: 53,
            dim: 6,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn context_ignores_span_tokens(
            words in prop::collection::vec("[a-e]{1,3}", 2..9),
            replacement in prop::collection::vec("[f-k]{1,3}", 8),
            start_frac in 0.0f64..1.0,
            len_frac in 0.0f64..1.0,
        ) {
            let n = words.len();
            let start = ((n as f64) * start_frac) as usize % n;
            let len = 1 + ((n - start - 1) as f64 * len_frac) as usize;
            let u = Utterance { id: "u".into(), tokens: words.clone(), dialogue_id: "d".into(), turn_index: 0 };
            let mut changed = u.clone();
            for (i, t) in changed.tokens[start..start + len].iter_mut().enumerate() {
                *t = replacement[i].clone();
            }
            let sp = CandidateSpan { span_id: SpanId("s".into()), utterance_id: "u".into(), start, length: len, weak_label: None, gold_label: None };
            let e = enc();
            let a = context_representation(&e, &u, &sp, Some(4)).unwrap();
            let b = context_representation(&e, &changed, &sp, Some(4)).unwrap();
            prop_assert_eq!(a, b);

            let proj = Projection::new(5, 12, 2);
            let rep = encode_span(&e, &proj, &u, &sp, None).unwrap();
            prop_assert_eq!(rep.r.len(), 5);
            prop_assert!(rep.r.iter().all(|x| x.is_finite() && x.abs() <= 1.0));
        }
    }
}
