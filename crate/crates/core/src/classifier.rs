//! The multi-task span classifier: shared encoder and projection, a slot
//! head over the slot catalog and a weak-label head, trained with
//! `(1 - alpha) * CE(slot) + alpha * CE(weak)`.
//!
//! Slot probabilities are multiplied by the known-label mask and are not
//! renormalized, so undiscovered labels carry exactly zero mass.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, Tensor};
use crate::corpus::{CandidateSpan, Corpus, SlotCatalog, SpanId, Utterance};
use crate::encoder::{
    check_span, masked_tokens, sub_seeds, ParamId, Projection, ReferenceEncoder,
    ReferenceEncoderConfig, SpanRepresentation, TrainableBackend,
};
use crate::error::{Error, Result};
use crate::extraction::OTHER_LABEL;
use crate::util::{derive_seed, rng_for};

/// Probability floor inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;
/// Standard deviation of slot-head rows added by [`MultiTaskModel::expand_slot_head`].
pub const NEW_ROW_STD: f64 = 0.02;

const MODEL_KIND: &str = "MODEL";

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Head {
    fn new(rows: usize, cols: usize, seed: u64, tag: u64) -> Self {
        let mut rng = rng_for(seed, &[0x4EAD, tag]);
        let dist = Normal::new(0.0, NEW_ROW_STD).expect("finite std");
        Head {
            weight: Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng)),
            bias: Array1::zeros(rows),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn logits(&self, r: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(r) + &self.bias
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e / sum
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: ReferenceEncoderConfig,
    /// Output dimension of the projection, i.e. of `r`.
    pub repr_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: ReferenceEncoderConfig::default(),
            repr_dim: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiTaskModel<B = ReferenceEncoder> {
    pub backend: B,
    pub projection: Projection,
    pub slot_head: Head,
    pub weak_head: Head,
    catalog: SlotCatalog,
    weak_vocab: Vec<String>,
    weak_index: HashMap<String, usize>,
    seed: u64,
}

impl<B: PartialEq> PartialEq for MultiTaskModel<B> {
    fn eq(&self, other: &Self) -> bool {
        self.backend == other.backend
            && self.projection == other.projection
            && self.slot_head == other.slot_head
            && self.weak_head == other.weak_head
            && self.catalog == other.catalog
            && self.weak_vocab == other.weak_vocab
            && self.seed == other.seed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Softmax of the slot logits multiplied by the mask.
    pub slot: Vec<f64>,
    pub weak: Vec<f64>,
    pub slot_logits: Vec<f64>,
    pub repr: SpanRepresentation,
}

impl Prediction {
    pub fn best_slot(&self) -> usize {
        argmax(&self.slot)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub slot: f64,
    pub weak: f64,
    pub total: f64,
}

/// `(1 - alpha) * CE(y_slot_hat, slot_target) + alpha * CE(y_weak_hat, weak_target)`
/// with natural log and a probability floor of [`PROB_FLOOR`].
///
/// `mask` is the known-label mask; the slot target must be known. A missing
/// weak target contributes zero.
pub fn multi_task_loss(
    y_slot_hat: &[f64],
    y_weak_hat: &[f64],
    slot_target: usize,
    weak_target: Option<usize>,
    alpha: f64,
    mask: &[f64],
) -> Result<LossParts> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if mask.len() != y_slot_hat.len() || slot_target >= y_slot_hat.len() {
        return Err(Error::Dimension(format!(
            "slot distribution {} / mask {} / target {slot_target}",
            y_slot_hat.len(),
            mask.len()
        )));
    }
    if mask[slot_target] != 1.0 {
        return Err(Error::UnknownLabel(format!("slot index {slot_target} is not known")));
    }
    let slot = -y_slot_hat[slot_target].max(PROB_FLOOR).ln();
    let weak = match weak_target {
        Some(t) if t < y_weak_hat.len() => -y_weak_hat[t].max(PROB_FLOOR).ln(),
        Some(t) => {
            return Err(Error::Dimension(format!(
                "weak target {t} outside {} outputs",
                y_weak_hat.len()
            )))
        }
        None => 0.0,
    };
    Ok(LossParts {
        slot,
        weak,
        total: (1.0 - alpha) * slot + alpha * weak,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakMode {
    /// Slot loss only (alpha forced to 0).
    NoWeak,
    /// Blended loss throughout.
    Multitask,
    /// Weak head first, then slot head with alpha 0.
    Pretrain,
}

impl std::str::FromStr for WeakMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_weak" | "none" => Ok(WeakMode::NoWeak),
            "multitask" | "multi_task" => Ok(WeakMode::Multitask),
            "pretrain" => Ok(WeakMode::Pretrain),
            other => Err(Error::InvalidArgument(format!("unknown weak mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_initial_epochs: usize,
    pub epochs_per_iteration: usize,
    pub seed: u64,
    pub mode: WeakMode,
    /// Train only the two heads.
    pub freeze_encoder: bool,
    /// Apply encoder dropout during training forward passes.
    pub train_dropout: bool,
    /// Relative loss improvement below which weak pretraining counts as converged.
    pub pretrain_tolerance: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            alpha: 0.05,
            learning_rate: 5e-3,
            batch_size: 128,
            max_initial_epochs: 30,
            epochs_per_iteration: 2,
            seed: 0,
            mode: WeakMode::Multitask,
            freeze_encoder: false,
            train_dropout: true,
            pretrain_tolerance: 1e-4,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Initial,
    Incremental { iteration: u64 },
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Initial => 0,
            Phase::Incremental { iteration } => iteration + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub slot_loss: f64,
    pub weak_loss: f64,
    pub total_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// `epoch,slot_loss,weak_loss,total_loss,train_accuracy`; rows of a weak
    /// pretraining stage are numbered before the main stage.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,slot_loss,weak_loss,total_loss,train_accuracy\n");
        for (i, e) in self.epochs.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                i + 1,
                e.slot_loss,
                e.weak_loss,
                e.total_loss,
                e.train_accuracy
            )
            .expect("write to string");
        }
        out
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }
}

/// One labeled span, resolved to label indices.
#[derive(Clone, Copy, Debug)]
pub struct TrainingExample<'a> {
    pub utterance: &'a Utterance,
    pub span: &'a CandidateSpan,
    pub slot: usize,
    pub weak: Option<usize>,
}

pub struct ModelGrads<B: TrainableBackend> {
    pub backend: B::Grads,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub slot_loss: f64,
    pub weak_loss: f64,
    pub total_loss: f64,
    pub correct: usize,
    pub count: usize,
}

impl BatchStats {
    fn add(&mut self, o: &BatchStats) {
        self.slot_loss += o.slot_loss;
        self.weak_loss += o.weak_loss;
        self.total_loss += o.total_loss;
        self.correct += o.correct;
        self.count += o.count;
    }
}

struct ExampleForward<C> {
    inh_cache: C,
    ctx_cache: C,
    z: Array1<f64>,
    r: Array1<f64>,
    slot_p: Array1<f64>,
    weak_p: Array1<f64>,
    start: usize,
    len: usize,
    utt_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum ParamKey {
    Backend(ParamId),
    W1,
    B1,
    W2,
    B2,
    W3,
    B3,
}

struct Adam {
    state: BTreeMap<ParamKey, (Vec<f64>, Vec<f64>)>,
    t: i32,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(param: &mut [f64], grad: Option<&[f64]>, scale: f64, m: &mut [f64], v: &mut [f64], lr: f64, t: i32) {
    let c1 = 1.0 - ADAM_B1.powi(t);
    let c2 = 1.0 - ADAM_B2.powi(t);
    for j in 0..param.len() {
        let g = grad.map_or(0.0, |g| g[j] * scale);
        m[j] = ADAM_B1 * m[j] + (1.0 - ADAM_B1) * g;
        v[j] = ADAM_B2 * v[j] + (1.0 - ADAM_B2) * g * g;
        let mhat = m[j] / c1;
        let vhat = v[j] / c2;
        param[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

impl Adam {
    fn new() -> Self {
        Adam {
            state: BTreeMap::new(),
            t: 0,
        }
    }

    /// One step on `grads * scale`. Slices that have optimizer state but no
    /// gradient this step are updated with a zero gradient, which makes the
    /// sparse embedding update identical to a dense one.
    fn step<B: TrainableBackend>(
        &mut self,
        model: &mut MultiTaskModel<B>,
        grads: &ModelGrads<B>,
        scale: f64,
        lr: f64,
        freeze_encoder: bool,
    ) {
        self.t += 1;
        let t = self.t;
        let mut entries: BTreeMap<ParamKey, &[f64]> = BTreeMap::new();
        if !freeze_encoder {
            for (id, g) in model.backend.grad_entries(&grads.backend) {
                entries.insert(ParamKey::Backend(id), g);
            }
            entries.insert(ParamKey::W1, grads.w1.as_slice().expect("contiguous"));
            entries.insert(ParamKey::B1, grads.b1.as_slice().expect("contiguous"));
        }
        entries.insert(ParamKey::W2, grads.w2.as_slice().expect("contiguous"));
        entries.insert(ParamKey::B2, grads.b2.as_slice().expect("contiguous"));
        entries.insert(ParamKey::W3, grads.w3.as_slice().expect("contiguous"));
        entries.insert(ParamKey::B3, grads.b3.as_slice().expect("contiguous"));

        let mut keys: Vec<ParamKey> = entries.keys().copied().collect();
        keys.extend(self.state.keys().filter(|k| !entries.contains_key(k)).copied());
        keys.sort();
        for key in keys {
            let grad = entries.get(&key).copied();
            let param: &mut [f64] = match key {
                ParamKey::Backend(id) => model.backend.param_mut(id),
                ParamKey::W1 => model.projection.weight.as_slice_mut().expect("contiguous"),
                ParamKey::B1 => model.projection.bias.as_slice_mut().expect("contiguous"),
                ParamKey::W2 => model.slot_head.weight.as_slice_mut().expect("contiguous"),
                ParamKey::B2 => model.slot_head.bias.as_slice_mut().expect("contiguous"),
                ParamKey::W3 => model.weak_head.weight.as_slice_mut().expect("contiguous"),
                ParamKey::B3 => model.weak_head.bias.as_slice_mut().expect("contiguous"),
            };
            let (m, v) = self
                .state
                .entry(key)
                .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
            adam_update(param, grad, scale, m, v, lr, t);
        }
    }
}

/// Examples are processed in fixed-size chunks whose gradients are summed in
/// order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

impl MultiTaskModel<ReferenceEncoder> {
    /// Model over the reference encoder. `"other"` is always part of the weak vocabulary.
    pub fn reference(config: &ModelConfig, catalog: SlotCatalog, weak_vocab: &[String]) -> Result<Self> {
        let backend = ReferenceEncoder::new(ReferenceEncoderConfig {
            seed: derive_seed(config.seed, &[0xBAC]),
            ..config.encoder.clone()
        })?;
        MultiTaskModel::new(backend, config.repr_dim, catalog, weak_vocab, config.seed)
    }
}

impl<B: TrainableBackend> MultiTaskModel<B> {
    pub fn new(backend: B, repr_dim: usize, catalog: SlotCatalog, weak_vocab: &[String], seed: u64) -> Result<Self> {
        if repr_dim == 0 {
            return Err(Error::InvalidArgument("representation dimension must be positive".into()));
        }
        let mut vocab: Vec<String> = weak_vocab.to_vec();
        if !vocab.iter().any(|w| w == OTHER_LABEL) {
            vocab.push(OTHER_LABEL.to_owned());
        }
        let weak_index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if weak_index_len(&vocab) != vocab.len() {
            return Err(Error::DuplicateLabel("weak vocabulary contains duplicates".into()));
        }
        let projection = Projection::new(repr_dim, 2 * backend.dim(), seed);
        Ok(MultiTaskModel {
            slot_head: Head::new(catalog.len(), repr_dim, seed, 2),
            weak_head: Head::new(vocab.len(), repr_dim, seed, 3),
            backend,
            projection,
            catalog,
            weak_vocab: vocab,
            weak_index,
            seed,
        })
    }

    pub fn catalog(&self) -> &SlotCatalog {
        &self.catalog
    }

    /// Marks a catalog label known (no head change).
    pub fn mark_known(&mut self, label: &str) -> Result<bool> {
        self.catalog.mark_known(label)
    }

    pub fn weak_vocab(&self) -> &[String] {
        &self.weak_vocab
    }

    /// Index of a weak label; unseen labels map to `"other"`.
    pub fn weak_index(&self, label: &str) -> usize {
        self.weak_index
            .get(label)
            .or_else(|| self.weak_index.get(OTHER_LABEL))
            .copied()
            .expect("`other` always in vocabulary")
    }

    pub fn mask(&self) -> Vec<f64> {
        self.catalog.mask()
    }

    pub fn repr_dim(&self) -> usize {
        self.projection.out_dim()
    }

    /// Appends one slot-head row per new label (seeded normal, std 0.02, zero
    /// bias) and marks the labels known. Existing rows are untouched.
    pub fn expand_slot_head(&mut self, labels: &[String]) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for l in labels {
            if l.is_empty() {
                return Err(Error::InvalidArgument("empty slot label".into()));
            }
            if self.catalog.contains(l) || !seen.insert(l) {
                return Err(Error::DuplicateLabel(l.clone()));
            }
        }
        if labels.is_empty() {
            return Ok(());
        }
        let d = self.repr_dim();
        let old = self.slot_head.outputs();
        let mut rows = Array2::zeros((old + labels.len(), d));
        rows.slice_mut(s![..old, ..]).assign(&self.slot_head.weight);
        let mut bias = Array1::zeros(old + labels.len());
        bias.slice_mut(s![..old]).assign(&self.slot_head.bias);
        let dist = Normal::new(0.0, NEW_ROW_STD).expect("finite std");
        for (k, label) in labels.iter().enumerate() {
            let idx = old + k;
            let mut rng = rng_for(self.seed, &[0x0E3A, idx as u64]);
            for x in rows.row_mut(idx).iter_mut() {
                *x = dist.sample(&mut rng);
            }
            self.catalog.push(label.clone(), true)?;
        }
        self.slot_head = Head { weight: rows, bias };
        Ok(())
    }

    fn forward_example(
        &self,
        utterance: &Utterance,
        span: &CandidateSpan,
        dropout_seed: Option<u64>,
    ) -> Result<ExampleForward<B::Cache>> {
        check_span(utterance, span)?;
        let (inh_seed, ctx_seed) = sub_seeds(dropout_seed);
        let (inh_out, inh_cache) = self.backend.forward(&utterance.tokens[span.start..span.end()], inh_seed)?;
        let masked = masked_tokens(utterance, span, self.backend.mask_token());
        let (ctx_out, ctx_cache) = self.backend.forward(&masked, ctx_seed)?;
        let r_inh = inh_out.mean_axis(Axis(0)).expect("non-empty");
        let r_ctx = ctx_out
            .slice(s![span.start..span.end(), ..])
            .mean_axis(Axis(0))
            .expect("non-empty");
        let z = ndarray::concatenate(Axis(0), &[r_inh.view(), r_ctx.view()]).expect("concat");
        let r = self.projection.apply(z.view())?;
        let slot_p = softmax(&self.slot_head.logits(&r));
        let weak_p = softmax(&self.weak_head.logits(&r));
        Ok(ExampleForward {
            inh_cache,
            ctx_cache,
            z,
            r,
            slot_p,
            weak_p,
            start: span.start,
            len: span.length,
            utt_len: utterance.tokens.len(),
        })
    }

    fn backward_example(
        &self,
        fwd: &ExampleForward<B::Cache>,
        d_slot: &Array1<f64>,
        d_weak: &Array1<f64>,
        grads: &mut ModelGrads<B>,
        freeze_encoder: bool,
    ) {
        let r = &fwd.r;
        grads.w2 += &outer(d_slot, r);
        grads.b2 += d_slot;
        grads.w3 += &outer(d_weak, r);
        grads.b3 += d_weak;
        if freeze_encoder {
            return;
        }
        let d_r = self.slot_head.weight.t().dot(d_slot) + self.weak_head.weight.t().dot(d_weak);
        let d_a = &d_r * &r.mapv(|x| 1.0 - x * x);
        grads.w1 += &outer(&d_a, &fwd.z);
        grads.b1 += &d_a;
        let d_z = self.projection.weight.t().dot(&d_a);
        let d_enc = self.backend.dim();
        let scale = 1.0 / fwd.len as f64;
        let d_inh = d_z.slice(s![..d_enc]).mapv(|x| x * scale);
        let d_ctx = d_z.slice(s![d_enc..]).mapv(|x| x * scale);

        let mut d_inh_out = Array2::zeros((fwd.len, d_enc));
        for mut row in d_inh_out.axis_iter_mut(Axis(0)) {
            row.assign(&d_inh);
        }
        self.backend.backward(&fwd.inh_cache, d_inh_out.view(), &mut grads.backend);

        let mut d_ctx_out = Array2::zeros((fwd.utt_len, d_enc));
        for mut row in d_ctx_out.slice_mut(s![fwd.start..fwd.start + fwd.len, ..]).axis_iter_mut(Axis(0)) {
            row.assign(&d_ctx);
        }
        self.backend.backward(&fwd.ctx_cache, d_ctx_out.view(), &mut grads.backend);
    }

    pub fn zero_grads(&self) -> ModelGrads<B> {
        ModelGrads {
            backend: self.backend.zero_grads(),
            w1: Array2::zeros(self.projection.weight.raw_dim()),
            b1: Array1::zeros(self.projection.bias.len()),
            w2: Array2::zeros(self.slot_head.weight.raw_dim()),
            b2: Array1::zeros(self.slot_head.bias.len()),
            w3: Array2::zeros(self.weak_head.weight.raw_dim()),
            b3: Array1::zeros(self.weak_head.bias.len()),
        }
    }

    fn add_grads(&self, into: &mut ModelGrads<B>, other: &ModelGrads<B>) {
        self.backend.add_grads(&mut into.backend, &other.backend);
        into.w1 += &other.w1;
        into.b1 += &other.b1;
        into.w2 += &other.w2;
        into.b2 += &other.b2;
        into.w3 += &other.w3;
        into.b3 += &other.b3;
    }

    /// Loss of one example under the current mask.
    pub fn example_loss(&self, ex: &TrainingExample<'_>, alpha: f64, dropout_seed: Option<u64>) -> Result<LossParts> {
        let fwd = self.forward_example(ex.utterance, ex.span, dropout_seed)?;
        let mask = self.mask();
        let masked: Vec<f64> = fwd.slot_p.iter().zip(&mask).map(|(p, m)| p * m).collect();
        multi_task_loss(
            &masked,
            fwd.weak_p.as_slice().expect("contiguous"),
            ex.slot,
            ex.weak,
            alpha,
            &mask,
        )
    }

    /// Summed (not averaged) gradients of the blended loss over `examples`.
    ///
    /// `dropout_seeds`, when given, holds one seed per example.
    pub fn batch_gradients(
        &self,
        examples: &[TrainingExample<'_>],
        alpha: f64,
        dropout_seeds: Option<&[u64]>,
        freeze_encoder: bool,
    ) -> Result<(ModelGrads<B>, BatchStats)> {
        let mask = self.mask();
        let idx: Vec<usize> = (0..examples.len()).collect();
        let partials: Vec<Result<(ModelGrads<B>, BatchStats)>> = idx
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = self.zero_grads();
                let mut stats = BatchStats::default();
                for &i in chunk {
                    let ex = &examples[i];
                    let seed = dropout_seeds.map(|s| s[i]);
                    let fwd = self.forward_example(ex.utterance, ex.span, seed)?;
                    let masked: Vec<f64> = fwd.slot_p.iter().zip(&mask).map(|(p, m)| p * m).collect();
                    let loss = multi_task_loss(
                        &masked,
                        fwd.weak_p.as_slice().expect("contiguous"),
                        ex.slot,
                        ex.weak,
                        alpha,
                        &mask,
                    )?;
                    let mut d_slot = fwd.slot_p.clone();
                    if masked[ex.slot] > PROB_FLOOR {
                        d_slot[ex.slot] -= 1.0;
                        d_slot *= 1.0 - alpha;
                    } else {
                        d_slot.fill(0.0);
                    }
                    let mut d_weak = fwd.weak_p.clone();
                    match ex.weak {
                        Some(w) if fwd.weak_p[w] > PROB_FLOOR => {
                            d_weak[w] -= 1.0;
                            d_weak *= alpha;
                        }
                        _ => d_weak.fill(0.0),
                    }
                    self.backward_example(&fwd, &d_slot, &d_weak, &mut g, freeze_encoder);
                    stats.slot_loss += loss.slot;
                    stats.weak_loss += loss.weak;
                    stats.total_loss += loss.total;
                    stats.correct += usize::from(argmax(&masked) == ex.slot);
                    stats.count += 1;
                }
                Ok((g, stats))
            })
            .collect();
        let mut total = self.zero_grads();
        let mut stats = BatchStats::default();
        for p in partials {
            let (g, s) = p?;
            self.add_grads(&mut total, &g);
            stats.add(&s);
        }
        Ok((total, stats))
    }

    /// Masked slot distribution, weak distribution and representation.
    /// Dropout is active iff `dropout_seed` is given.
    pub fn predict(
        &self,
        utterance: &Utterance,
        span: &CandidateSpan,
        mask: &[f64],
        dropout_seed: Option<u64>,
    ) -> Result<Prediction> {
        if mask.len() != self.slot_head.outputs() {
            return Err(Error::Dimension(format!(
                "mask has {} entries, slot head has {}",
                mask.len(),
                self.slot_head.outputs()
            )));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        let fwd = self.forward_example(utterance, span, dropout_seed)?;
        let slot_logits = self.slot_head.logits(&fwd.r);
        let slot = fwd.slot_p.iter().zip(mask).map(|(p, m)| p * m).collect();
        let d_enc = self.backend.dim();
        Ok(Prediction {
            slot,
            weak: fwd.weak_p.to_vec(),
            slot_logits: slot_logits.to_vec(),
            repr: SpanRepresentation {
                r: fwd.r,
                r_inherent: fwd.z.slice(s![..d_enc]).to_owned(),
                r_context: fwd.z.slice(s![d_enc..]).to_owned(),
            },
        })
    }

    /// [`predict`](Self::predict) over many spans in parallel, order preserved.
    pub fn predict_many(
        &self,
        items: &[(&Utterance, &CandidateSpan)],
        mask: &[f64],
        dropout_seed: Option<u64>,
    ) -> Result<Vec<Prediction>> {
        items
            .par_iter()
            .map(|(u, s)| self.predict(u, s, mask, dropout_seed))
            .collect()
    }

    /// Resolves labeled spans into training examples; every label must be known.
    pub fn examples<'a>(
        &self,
        corpus: &'a Corpus,
        labels: &BTreeMap<SpanId, String>,
    ) -> Result<Vec<TrainingExample<'a>>> {
        labels
            .iter()
            .map(|(id, label)| {
                let (span, utterance) = corpus.span_with_utterance(id)?;
                let slot = self
                    .catalog
                    .index_of(label)
                    .filter(|&i| self.catalog.is_known_index(i))
                    .ok_or_else(|| Error::UnknownLabel(label.clone()))?;
                let weak = span.weak_label.as_deref().map(|w| self.weak_index(w));
                Ok(TrainingExample {
                    utterance,
                    span,
                    slot,
                    weak,
                })
            })
            .collect()
    }

    fn run_epochs(
        &mut self,
        examples: &[TrainingExample<'_>],
        config: &TrainingConfig,
        alpha: f64,
        epochs: usize,
        stage: &str,
        stage_tag: u64,
        converge_tol: Option<f64>,
        log: &mut TrainingLog,
    ) -> Result<()> {
        let n = examples.len();
        let batches_per_epoch = n.div_ceil(config.batch_size);
        let total_steps = (epochs * batches_per_epoch).max(1);
        let mut adam = Adam::new();
        let mut step = 0usize;
        let mut prev_loss: Option<f64> = None;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_for(config.seed, &[stage_tag, epoch as u64, 0x5F]));
            let mut epoch_stats = BatchStats::default();
            for (b, batch_idx) in order.chunks(config.batch_size).enumerate() {
                let batch: Vec<TrainingExample<'_>> = batch_idx.iter().map(|&i| examples[i]).collect();
                let seeds: Option<Vec<u64>> = config.train_dropout.then(|| {
                    batch_idx
                        .iter()
                        .map(|&i| derive_seed(config.seed, &[stage_tag, epoch as u64, i as u64, 0xD0]))
                        .collect()
                });
                let (grads, stats) = self.batch_gradients(&batch, alpha, seeds.as_deref(), config.freeze_encoder)?;
                if !stats.total_loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b,
                        slot_loss: stats.slot_loss,
                        weak_loss: stats.weak_loss,
                    });
                }
                let lr = config.learning_rate * (1.0 - step as f64 / total_steps as f64);
                adam.step(self, &grads, 1.0 / batch.len() as f64, lr, config.freeze_encoder);
                step += 1;
                epoch_stats.add(&stats);
            }
            let c = epoch_stats.count.max(1) as f64;
            let entry = EpochLog {
                stage: stage.to_owned(),
                epoch: epoch + 1,
                slot_loss: epoch_stats.slot_loss / c,
                weak_loss: epoch_stats.weak_loss / c,
                total_loss: epoch_stats.total_loss / c,
                train_accuracy: epoch_stats.correct as f64 / c,
            };
            let loss = entry.total_loss;
            log.epochs.push(entry);
            if let (Some(tol), Some(prev)) = (converge_tol, prev_loss) {
                if (prev - loss).abs() <= tol * prev.abs().max(1e-12) {
                    break;
                }
            }
            prev_loss = Some(loss);
        }
        Ok(())
    }

    /// Trains on the labeled examples.
    ///
    /// The initial phase runs `max_initial_epochs`, an incremental phase
    /// `epochs_per_iteration`, both continuing from the current parameters
    /// with fresh Adam moments and a learning rate decayed linearly to zero
    /// over the phase. In pretrain mode the initial phase first fits the weak
    /// head (alpha = 1) until the epoch loss stops improving.
    pub fn train(&mut self, examples: &[TrainingExample<'_>], config: &TrainingConfig, phase: Phase) -> Result<TrainingLog> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty labeled pool".into()));
        }
        let mask = self.mask();
        if let Some(ex) = examples.iter().find(|e| e.slot >= mask.len() || mask[e.slot] != 1.0) {
            return Err(Error::UnknownLabel(format!(
                "span `{}` is labeled with a slot that is not known",
                ex.span.span_id
            )));
        }
        let mut log = TrainingLog::default();
        let tag = phase.tag() * 4;
        let epochs = match phase {
            Phase::Initial => config.max_initial_epochs,
            Phase::Incremental { .. } => config.epochs_per_iteration,
        };
        match (config.mode, phase) {
            (WeakMode::NoWeak, _) => self.run_epochs(examples, config, 0.0, epochs, "main", tag, None, &mut log)?,
            (WeakMode::Multitask, _) => {
                self.run_epochs(examples, config, config.alpha, epochs, "main", tag, None, &mut log)?
            }
            (WeakMode::Pretrain, Phase::Initial) => {
                self.run_epochs(
                    examples,
                    config,
                    1.0,
                    config.max_initial_epochs,
                    "weak-pretrain",
                    tag + 1,
                    Some(config.pretrain_tolerance),
                    &mut log,
                )?;
                self.run_epochs(examples, config, 0.0, epochs, "main", tag, None, &mut log)?;
            }
            (WeakMode::Pretrain, Phase::Incremental { .. }) => {
                self.run_epochs(examples, config, 0.0, epochs, "main", tag, None, &mut log)?
            }
        }
        Ok(log)
    }

    pub fn to_container(&self) -> Container {
        let header = serde_json::json!({
            "backend": self.backend.config_json(),
            "repr_dim": self.repr_dim(),
            "catalog": self.catalog,
            "weak_vocab": self.weak_vocab,
            "seed": self.seed,
        });
        let mut tensors = self.backend.export_tensors();
        tensors.push(Tensor::from_array2("projection.weight", &self.projection.weight));
        tensors.push(Tensor::from_array1("projection.bias", &self.projection.bias));
        tensors.push(Tensor::from_array2("slot_head.weight", &self.slot_head.weight));
        tensors.push(Tensor::from_array1("slot_head.bias", &self.slot_head.bias));
        tensors.push(Tensor::from_array2("weak_head.weight", &self.weak_head.weight));
        tensors.push(Tensor::from_array1("weak_head.bias", &self.weak_head.bias));
        Container {
            kind: MODEL_KIND.to_owned(),
            header,
            tensors,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            backend: serde_json::Value,
            repr_dim: usize,
            catalog: SlotCatalog,
            weak_vocab: Vec<String>,
            seed: u64,
        }
        let h: Header = serde_json::from_value(c.header)?;
        let (head_tensors, backend_tensors): (Vec<Tensor>, Vec<Tensor>) = c
            .tensors
            .into_iter()
            .partition(|t| !t.name.starts_with("encoder."));
        let backend = B::import(&h.backend, backend_tensors)?;
        let mut by_name: BTreeMap<String, Tensor> = head_tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut take = |name: &str| {
            by_name
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let d = h.repr_dim;
        let (k, v) = (h.catalog.len(), h.weak_vocab.len());
        let projection = Projection {
            weight: take("projection.weight")?.into_array2(d, 2 * backend.dim())?,
            bias: take("projection.bias")?.into_array1(d)?,
        };
        let slot_head = Head {
            weight: take("slot_head.weight")?.into_array2(k, d)?,
            bias: take("slot_head.bias")?.into_array1(k)?,
        };
        let weak_head = Head {
            weight: take("weak_head.weight")?.into_array2(v, d)?,
            bias: take("weak_head.bias")?.into_array1(v)?,
        };
        let weak_index = h.weak_vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(MultiTaskModel {
            backend,
            projection,
            slot_head,
            weak_head,
            catalog: h.catalog,
            weak_vocab: h.weak_vocab,
            weak_index,
            seed: h.seed,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(Container::load(path, MODEL_KIND)?)
    }
}

fn weak_index_len(vocab: &[String]) -> usize {
    vocab.iter().collect::<std::collections::HashSet<_>>().len()
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SpanId;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: ReferenceEncoderConfig {
                buckets: 64,
                dim: 4,
                ..Default::default()
            },
            repr_dim: 4,
            seed: 1,
        }
    }

    fn toy() -> (Vec<Utterance>, Vec<CandidateSpan>) {
        let texts = [
            ("u0", "book a cheap hotel", 2, "price", "other"),
            ("u1", "find an expensive room", 2, "price", "other"),
            ("u2", "stay in the north", 3, "area", "other"),
            ("u3", "somewhere in the south", 3, "area", "other"),
        ];
        let mut us = Vec::new();
        let mut ss = Vec::new();
        for (id, text, start, gold, weak) in texts {
            us.push(Utterance {
                id: id.into(),
                tokens: text.split(' ').map(str::to_owned).collect(),
                dialogue_id: "d".into(),
                turn_index: 0,
            });
            ss.push(CandidateSpan {
                span_id: SpanId(format!("{id}-s")),
                utterance_id: id.into(),
                start,
                length: 1,
                weak_label: Some(weak.into()),
                gold_label: Some(gold.into()),
            });
        }
        (us, ss)
    }

    fn known_catalog(labels: &[&str]) -> SlotCatalog {
        let mut c = SlotCatalog::new(labels.iter().copied()).unwrap();
        for l in labels {
            c.mark_known(l).unwrap();
        }
        c
    }

    fn fd_check(alpha: f64) {
        let (us, ss) = toy();
        let mut model = MultiTaskModel::reference(
            &tiny_config(),
            known_catalog(&["area", "price", "x"]),
            &["other".to_owned(), "w".to_owned()],
        )
        .unwrap();
        model.mark_known("x").unwrap();
        let ex = TrainingExample {
            utterance: &us[2],
            span: &ss[2],
            slot: 0,
            weak: Some(1),
        };
        let (g, _) = model.batch_gradients(&[ex], alpha, None, false).unwrap();
        let h = 1e-6;
        let loss = |m: &MultiTaskModel| m.example_loss(&ex, alpha, None).unwrap().total;
        let check = |name: &str, analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-3 || (analytic - numeric).abs() < 1e-9,
                "{name}: analytic {analytic} numeric {numeric}"
            );
        };
        for (i, j) in [(0, 0), (1, 3), (3, 7)] {
            let mut p = model.clone();
            p.projection.weight[[i, j]] += h;
            let mut m = model.clone();
            m.projection.weight[[i, j]] -= h;
            check("w1", g.w1[[i, j]], loss(&p), loss(&m));
        }
        for (i, j) in [(0, 0), (2, 3)] {
            let mut p = model.clone();
            p.slot_head.weight[[i, j]] += h;
            let mut m = model.clone();
            m.slot_head.weight[[i, j]] -= h;
            check("w2", g.w2[[i, j]], loss(&p), loss(&m));
            let mut p = model.clone();
            p.weak_head.weight[[i % 2, j]] += h;
            let mut m = model.clone();
            m.weak_head.weight[[i % 2, j]] -= h;
            check("w3", g.w3[[i % 2, j]], loss(&p), loss(&m));
        }
        let entries: Vec<(ParamId, Vec<f64>)> = model
            .backend
            .grad_entries(&g.backend)
            .into_iter()
            .map(|(id, v)| (id, v.to_vec()))
            .collect();
        assert!(!entries.is_empty());
        for (id, grad) in entries.iter().take(6) {
            for k in [0, grad.len() - 1] {
                let mut p = model.clone();
                p.backend.param_mut(*id)[k] += h;
                let mut m = model.clone();
                m.backend.param_mut(*id)[k] -= h;
                check(&format!("{id:?}"), grad[k], loss(&p), loss(&m));
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(0.0);
        fd_check(0.4);
        fd_check(1.0);
    }

    #[test]
    fn masking_is_elementwise_product() {
        let p = [0.5, 0.3, 0.2];
        let m = [1.0, 1.0, 0.0];
        let masked: Vec<f64> = p.iter().zip(&m).map(|(a, b)| a * b).collect();
        assert_eq!(masked, [0.5, 0.3, 0.0]);
    }

    #[test]
    fn predict_contracts() {
        let (us, ss) = toy();
        let model = MultiTaskModel::reference(&tiny_config(), known_catalog(&["area", "price", "x"]), &[]).unwrap();
        let ones = [1.0, 1.0, 1.0];
        let p = model.predict(&us[0], &ss[0], &ones, None).unwrap();
        assert!((p.slot.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((p.weak.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let masked = model.predict(&us[0], &ss[0], &[1.0, 1.0, 0.0], None).unwrap();
        assert_eq!(masked.slot[2], 0.0);
        assert_eq!(masked.slot[..2], p.slot[..2]);
        assert_eq!(
            model.predict(&us[0], &ss[0], &ones, Some(3)).unwrap(),
            model.predict(&us[0], &ss[0], &ones, Some(3)).unwrap()
        );
        assert!(matches!(
            model.predict(&us[0], &ss[0], &[1.0, 1.0], None),
            Err(Error::Dimension(_))
        ));
        assert!(model.predict(&us[0], &ss[0], &[1.0, 0.5, 1.0], None).is_err());
    }

    #[test]
    fn loss_boundaries() {
        let ys = [0.7, 0.2, 0.1];
        let yw = [0.25, 0.75];
        let mask = [1.0, 1.0, 0.0];
        let l0 = multi_task_loss(&ys, &yw, 0, Some(1), 0.0, &mask).unwrap();
        assert_eq!(l0.total, -(0.7f64).ln());
        let l1 = multi_task_loss(&ys, &yw, 0, Some(1), 1.0, &mask).unwrap();
        assert_eq!(l1.total, -(0.75f64).ln());
        let perfect = multi_task_loss(&[1.0, 0.0, 0.0], &yw, 0, Some(0), 0.0, &mask).unwrap();
        assert_eq!(perfect.total, 0.0);
        assert!(matches!(
            multi_task_loss(&ys, &yw, 2, None, 0.5, &mask),
            Err(Error::UnknownLabel(_))
        ));
        let floor = multi_task_loss(&[0.0, 1.0, 0.0], &yw, 0, None, 0.0, &mask).unwrap();
        assert!((floor.slot - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn expand_head_keeps_old_logits() {
        let (us, ss) = toy();
        let mut model =
            MultiTaskModel::reference(&tiny_config(), known_catalog(&["a", "b", "c", "d"]), &[]).unwrap();
        let before = model.predict(&us[1], &ss[1], &model.mask(), None).unwrap();
        model.expand_slot_head(&[]).unwrap();
        assert_eq!(model.slot_head.outputs(), 4);
        model.expand_slot_head(&["e".to_owned()]).unwrap();
        assert_eq!(model.slot_head.outputs(), 5);
        assert!(model.catalog().is_known("e"));
        let after = model.predict(&us[1], &ss[1], &model.mask(), None).unwrap();
        assert_eq!(after.slot_logits[..4], before.slot_logits[..]);
        assert!(matches!(
            model.expand_slot_head(&["a".to_owned()]),
            Err(Error::DuplicateLabel(_))
        ));
        assert!(model.expand_slot_head(&["f".to_owned(), "f".to_owned()]).is_err());
        assert_eq!(model.slot_head.outputs(), 5);
    }

    #[test]
    fn training_is_deterministic_and_modes_agree() {
        let (us, ss) = toy();
        let catalog = known_catalog(&["area", "price"]);
        let corpus = Corpus::from_parts(us, ss.clone()).unwrap();
        let labels: BTreeMap<SpanId, String> = ss
            .iter()
            .map(|s| (s.span_id.clone(), s.gold_label.clone().unwrap()))
            .collect();
        let base = MultiTaskModel::reference(&tiny_config(), catalog, &["other".to_owned()]).unwrap();
        let ex = base.examples(&corpus, &labels).unwrap();
        let cfg = TrainingConfig {
            batch_size: 2,
            max_initial_epochs: 5,
            learning_rate: 1e-2,
            alpha: 0.0,
            ..Default::default()
        };
        let mut a = base.clone();
        let mut b = base.clone();
        let la = a.train(&ex, &cfg, Phase::Initial).unwrap();
        let lb = b.train(&ex, &cfg, Phase::Initial).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a, base);

        let mut c = base.clone();
        c.train(
            &ex,
            &TrainingConfig {
                mode: WeakMode::NoWeak,
                alpha: 0.3,
                ..cfg.clone()
            },
            Phase::Initial,
        )
        .unwrap();
        assert_eq!(a, c);
        assert_eq!(c.weak_head, base.weak_head);
    }

    #[test]
    fn pretrain_mode_logs_both_stages() {
        let (us, ss) = toy();
        let corpus = Corpus::from_parts(us, ss.clone()).unwrap();
        let labels: BTreeMap<SpanId, String> = ss
            .iter()
            .map(|s| (s.span_id.clone(), s.gold_label.clone().unwrap()))
            .collect();
        let mut model =
            MultiTaskModel::reference(&tiny_config(), known_catalog(&["area", "price"]), &["other".to_owned()])
                .unwrap();
        let ex = model.examples(&corpus, &labels).unwrap();
        let cfg = TrainingConfig {
            mode: WeakMode::Pretrain,
            max_initial_epochs: 4,
            ..Default::default()
        };
        let log = model.train(&ex, &cfg, Phase::Initial).unwrap();
        assert!(log.epochs.iter().any(|e| e.stage == "weak-pretrain"));
        assert_eq!(log.epochs.iter().filter(|e| e.stage == "main").count(), 4);
        assert!(log.to_csv().starts_with("epoch,slot_loss,weak_loss,total_loss,train_accuracy\n"));
    }

    #[test]
    fn empty_pool_and_unknown_labels_rejected() {
        let (us, ss) = toy();
        let corpus = Corpus::from_parts(us, ss.clone()).unwrap();
        let mut catalog = SlotCatalog::new(["area", "price"]).unwrap();
        catalog.mark_known("area").unwrap();
        let mut model = MultiTaskModel::reference(&tiny_config(), catalog, &[]).unwrap();
        assert!(model.train(&[], &TrainingConfig::default(), Phase::Initial).is_err());
        let labels: BTreeMap<SpanId, String> = [(ss[0].span_id.clone(), "price".to_owned())].into();
        assert!(matches!(model.examples(&corpus, &labels), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let mut model =
            MultiTaskModel::reference(&tiny_config(), known_catalog(&["a", "b"]), &["w".to_owned()]).unwrap();
        model.expand_slot_head(&["c".to_owned()]).unwrap();
        model.save(&path).unwrap();
        let back = MultiTaskModel::<ReferenceEncoder>::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.weak_index("w"), model.weak_index("w"));
        assert_eq!(back.weak_index("zzz"), model.weak_index(OTHER_LABEL));
    }

    #[test]
    fn weak_mode_parses() {
        assert_eq!("no_weak".parse::<WeakMode>().unwrap(), WeakMode::NoWeak);
        assert_eq!("pretrain".parse::<WeakMode>().unwrap(), WeakMode::Pretrain);
        assert!("bogus".parse::<WeakMode>().is_err());
    }
}
