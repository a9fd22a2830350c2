//! Deterministic synthetic hotel-booking corpora with a controllable split
//! between frequent slots and rare ones.
//!
//! Slots beyond the nine built-in hotel slots get generated names, cues and
//! values. Numbers are shared between the numeric slots and `free`/`paid`
//! between the amenity slots, so several values are only resolvable from
//! context. Rare slots are mostly mentioned late in a dialogue.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CandidateSpan, Corpus, SpanId, Utterance};
use crate::error::{Error, Result};
use crate::util::{rng_for, round_count};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_slots: usize,
    /// The last `n_new_slots` slots are the rare ones.
    pub n_new_slots: usize,
    pub n_utterances: usize,
    pub vocab_per_slot: usize,
    /// Context templates per slot.
    pub templates: usize,
    /// Probability that a weak label is replaced by a different weak type.
    pub noise_rate: f64,
    pub seed: u64,
    /// Share of all mentions that belong to the rare slots.
    pub new_slot_share: f64,
    pub min_mentions: usize,
    pub max_mentions: usize,
    pub turns_per_dialogue: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_slots: 9,
            n_new_slots: 5,
            n_utterances: 2000,
            vocab_per_slot: 10,
            templates: 6,
            noise_rate: 0.1,
            seed: 0,
            new_slot_share: 0.15,
            min_mentions: 1,
            max_mentions: 2,
            turns_per_dialogue: 6,
        }
    }
}

impl SynthSpec {
    /// Exactly `n` single-mention utterances, hence `n` spans.
    pub fn with_spans(n: usize) -> Self {
        SynthSpec {
            n_utterances: n,
            min_mentions: 1,
            max_mentions: 1,
            ..SynthSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_slots == 0 || self.n_new_slots >= self.n_slots {
            return bad(format!(
                "need 0 <= n_new_slots < n_slots, got {} / {}",
                self.n_new_slots, self.n_slots
            ));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return bad(format!("noise_rate must be in [0, 0.5), got {}", self.noise_rate));
        }
        if self.n_new_slots > 0 && !(self.new_slot_share > 0.0 && self.new_slot_share < 1.0) {
            return bad(format!("new_slot_share must be in (0, 1), got {}", self.new_slot_share));
        }
        if self.min_mentions == 0 || self.min_mentions > self.max_mentions {
            return bad("need 1 <= min_mentions <= max_mentions".into());
        }
        if self.turns_per_dialogue == 0 || self.templates == 0 {
            return bad("turns_per_dialogue and templates must be positive".into());
        }
        if self.vocab_per_slot < 2 {
            return bad(format!("vocab_per_slot must be at least 2, got {}", self.vocab_per_slot));
        }
        let least = self.n_utterances * self.min_mentions;
        if least < 2 * self.n_slots {
            return bad(format!(
                "{} utterances cannot cover {} slots with two mentions each",
                self.n_utterances, self.n_slots
            ));
        }
        Ok(())
    }
}

struct SlotDef {
    name: String,
    weak: &'static str,
    pre: Vec<String>,
    post: Vec<String>,
    values: Vec<String>,
}

const NUMBERS: &[&str] = &["1", "2", "3", "4", "5", "6", "two", "three", "four", "five"];
const AMENITY: &[&str] = &["free", "paid", "included"];
const WEAK_TYPES: &[&str] = &["location", "quality", "number", "facility", "date", "category"];

const FILLER_OPENERS: &[&str] = &[
    "i need",
    "i am looking for",
    "please find me",
    "can you help me with",
    "we would like",
    "i want",
    "could you book",
    "yes ,",
    "okay ,",
];
const CONNECTORS: &[&str] = &["and", ", also", "and also", ", plus", "as well as"];
const CLOSERS: &[&str] = &["please", "thanks", "if possible", "", "", ""];

fn words(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const ON: &[&str] = &["b", "d", "k", "l", "m", "n", "r", "s", "t", "v", "z", "gr", "st"];
    const NU: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    let n = rng.random_range(2..4);
    (0..n)
        .map(|_| format!("{}{}", ON.choose(rng).expect("non-empty"), NU.choose(rng).expect("non-empty")))
        .collect()
}

fn builtin(i: usize) -> Option<SlotDef> {
    let (name, weak, pre, post, values): (&str, &str, &[&str], &[&str], &[&str]) = match i {
        0 => (
            "area",
            "location",
            &["in the", "located in the", "around the", "near the", "somewhere in the"],
            &["area", "part of town", "side", "of the city", "district"],
            &["north", "south", "east", "west", "centre", "riverside", "old town", "harbour", "university", "station"],
        ),
        1 => (
            "pricerange",
            "quality",
            &["something", "a", "looking for a", "in the", "a fairly"],
            &["price range", "place", "hotel", "priced room", "option"],
            &["cheap", "moderate", "expensive", "budget", "affordable", "pricey", "mid range", "luxury", "economical", "upscale"],
        ),
        2 => (
            "stars",
            "number",
            &["rated", "with", "at least", "a", "no less than"],
            &["stars", "star rating", "star", "star hotel", "star reviews"],
            NUMBERS,
        ),
        3 => (
            "parking",
            "facility",
            &["with", "that has", "offering", "we need", "must have"],
            &["parking", "car park", "garage", "parking space", "parking lot"],
            AMENITY,
        ),
        4 => (
            "bookday",
            "date",
            &["from", "arriving on", "starting", "check in on", "beginning"],
            &["please", "onwards", "morning", "evening", "if available"],
            &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday", "tomorrow", "today", "weekend"],
        ),
        5 => (
            "bookpeople",
            "number",
            &["for", "room for", "party of", "a group of", "booking for"],
            &["people", "guests", "adults", "persons", "of us"],
            NUMBERS,
        ),
        6 => (
            "bookstay",
            "number",
            &["for", "staying", "a stay of", "lasting", "booked for"],
            &["nights", "days", "night stay", "evenings", "nights in total"],
            NUMBERS,
        ),
        7 => (
            "type",
            "category",
            &["a", "prefer a", "book a", "any", "ideally a"],
            &["please", "type", "style", "kind of place", "accommodation"],
            &["guesthouse", "hotel", "hostel", "inn", "lodge", "bnb", "motel", "apartment", "cottage", "resort"],
        ),
        8 => (
            "internet",
            "facility",
            &["with", "that has", "offering", "we need", "must have"],
            &["internet", "wifi", "connection", "wireless", "broadband"],
            AMENITY,
        ),
        _ => return None,
    };
    Some(SlotDef {
        name: name.into(),
        weak: WEAK_TYPES.iter().find(|w| **w == weak).expect("known weak type"),
        pre: words(pre),
        post: words(post),
        values: words(values),
    })
}

fn slot_defs(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<SlotDef> {
    (0..spec.n_slots)
        .map(|i| {
            let mut def = builtin(i).unwrap_or_else(|| SlotDef {
                name: format!("slot_{i}"),
                weak: WEAK_TYPES[i % WEAK_TYPES.len()],
                pre: (0..3).map(|_| pseudo_word(rng)).collect(),
                post: (0..3).map(|_| pseudo_word(rng)).collect(),
                values: Vec::new(),
            });
            def.values.truncate(spec.vocab_per_slot);
            while def.values.len() < spec.vocab_per_slot {
                def.values.push(pseudo_word(rng));
            }
            def
        })
        .collect()
}

/// Mention counts per slot: rare slots share `new_slot_share`, the rest
/// split the remainder evenly.
fn slot_counts(spec: &SynthSpec, total: usize) -> Vec<usize> {
    let n_known = spec.n_slots - spec.n_new_slots;
    let new_total = if spec.n_new_slots == 0 {
        0
    } else {
        round_count(spec.new_slot_share, total).clamp(2 * spec.n_new_slots, total - 2 * n_known)
    };
    let split = |amount: usize, parts: usize| -> Vec<usize> {
        (0..parts).map(|i| amount / parts + usize::from(i < amount % parts)).collect()
    };
    let mut counts = split(total - new_total, n_known);
    counts.extend(split(new_total, spec.n_new_slots));
    counts
}

/// Generates a corpus with gold and weak labels for every span.
pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[0x5E7]);
    let defs = slot_defs(spec, &mut rng);

    let mentions: Vec<usize> = (0..spec.n_utterances)
        .map(|_| rng.random_range(spec.min_mentions..=spec.max_mentions))
        .collect();
    let total: usize = mentions.iter().sum();
    let counts = slot_counts(spec, total);

    let mut positions: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (u, &m) in mentions.iter().enumerate() {
        for k in 0..m {
            positions.push((u, k));
        }
    }
    let late = |u: usize| u % spec.turns_per_dialogue >= spec.turns_per_dialogue / 2;
    positions.shuffle(&mut rng);
    let mut slot_of: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let n_known = spec.n_slots - spec.n_new_slots;
    let mut new_pool: Vec<usize> = (n_known..spec.n_slots).flat_map(|s| std::iter::repeat_n(s, counts[s])).collect();
    let mut known_pool: Vec<usize> = (0..n_known).flat_map(|s| std::iter::repeat_n(s, counts[s])).collect();
    new_pool.shuffle(&mut rng);
    known_pool.shuffle(&mut rng);
    // Late positions first take 80% of the rare mentions, the rest is mixed.
    let late_quota = (new_pool.len() * 4) / 5;
    let (late_new, rest_new) = new_pool.split_at(late_quota);
    let mut late_positions: Vec<(usize, usize)> = Vec::new();
    let mut other_positions: Vec<(usize, usize)> = Vec::new();
    for p in positions {
        if late(p.0) && late_positions.len() < late_new.len() {
            late_positions.push(p);
        } else {
            other_positions.push(p);
        }
    }
    for (p, &s) in late_positions.iter().zip(late_new) {
        slot_of.insert(*p, s);
    }
    let mut rest: Vec<usize> = rest_new.iter().copied().chain(known_pool).collect();
    rest.shuffle(&mut rng);
    other_positions.sort();
    for (p, s) in other_positions.into_iter().zip(rest) {
        slot_of.insert(p, s);
    }

    let templates: Vec<Vec<(usize, usize)>> = defs
        .iter()
        .map(|d| {
            let mut all: Vec<(usize, usize)> = (0..d.pre.len())
                .flat_map(|a| (0..d.post.len()).map(move |b| (a, b)))
                .collect();
            all.shuffle(&mut rng);
            all.truncate(spec.templates);
            all
        })
        .collect();

    let mut utterances = Vec::with_capacity(spec.n_utterances);
    let mut spans = Vec::with_capacity(total);
    for (u, &m) in mentions.iter().enumerate() {
        let id = format!("syn{:05}", u);
        let mut tokens: Vec<String> = Vec::new();
        let opener = FILLER_OPENERS.choose(&mut rng).expect("non-empty");
        tokens.extend(opener.split(' ').map(str::to_owned));
        for k in 0..m {
            if k > 0 {
                let c = CONNECTORS.choose(&mut rng).expect("non-empty");
                tokens.extend(c.split(' ').map(str::to_owned));
            }
            let s = slot_of[&(u, k)];
            let def = &defs[s];
            let &(a, b) = templates[s].choose(&mut rng).expect("non-empty");
            tokens.extend(def.pre[a].split(' ').map(str::to_owned));
            let value = def.values.choose(&mut rng).expect("non-empty");
            let start = tokens.len();
            let vtoks: Vec<String> = value.split(' ').map(str::to_owned).collect();
            let length = vtoks.len();
            tokens.extend(vtoks);
            tokens.extend(def.post[b].split(' ').filter(|t| !t.is_empty()).map(str::to_owned));
            let weak = if rng.random::<f64>() < spec.noise_rate {
                let others: Vec<&&str> = WEAK_TYPES.iter().filter(|w| **w != def.weak).collect();
                **others.choose(&mut rng).expect("non-empty")
            } else {
                def.weak
            };
            spans.push(CandidateSpan {
                span_id: SpanId(format!("{id}-s{k}")),
                utterance_id: id.clone(),
                start,
                length,
                weak_label: Some(weak.to_owned()),
                gold_label: Some(def.name.clone()),
            });
        }
        let closer = CLOSERS.choose(&mut rng).expect("non-empty");
        tokens.extend(closer.split(' ').filter(|t| !t.is_empty()).map(str::to_owned));
        utterances.push(Utterance {
            id,
            tokens,
            dialogue_id: format!("dlg{:04}", u / spec.turns_per_dialogue),
            turn_index: (u % spec.turns_per_dialogue) as u32,
        });
    }
    Corpus::from_parts(utterances, spans)
}

/// Names of the rare slots of `spec`, in slot order.
pub fn new_slot_names(spec: &SynthSpec) -> Result<Vec<String>> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[0x5E7]);
    let defs = slot_defs(spec, &mut rng);
    Ok(defs[spec.n_slots - spec.n_new_slots..].iter().map(|d| d.name.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_dataset;

    fn counts(c: &Corpus) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for s in c.spans() {
            *m.entry(s.gold_label.clone().unwrap()).or_default() += 1;
        }
        m
    }

    #[test]
    fn hotel_shape() {
        let spec = SynthSpec::default();
        let c = generate(&spec).unwrap();
        assert_eq!(c.utterances().len(), 2000);
        assert_eq!(c.slot_catalog().len(), 9);
        let names = new_slot_names(&spec).unwrap();
        assert_eq!(names, ["bookday", "bookpeople", "bookstay", "type", "internet"]);
        let n = counts(&c);
        let known: Vec<usize> = n.iter().filter(|(k, _)| !names.contains(k)).map(|(_, v)| *v).collect();
        let new: Vec<usize> = n.iter().filter(|(k, _)| names.contains(k)).map(|(_, v)| *v).collect();
        for group in [known, new] {
            let mean = group.iter().sum::<usize>() as f64 / group.len() as f64;
            assert!(group.iter().all(|&x| (x as f64 - mean).abs() <= 0.2 * mean), "{n:?}");
        }
    }

    #[test]
    fn deterministic_and_loadable() {
        let spec = SynthSpec {
            n_utterances: 300,
            ..SynthSpec::default()
        };
        let write = |c: &Corpus| {
            let mut buf = Vec::new();
            c.write_jsonl(&mut buf).unwrap();
            buf
        };
        let a = write(&generate(&spec).unwrap());
        assert_eq!(a, write(&generate(&spec).unwrap()));
        let back = parse_dataset(a.as_slice(), crate::SCHEMA_VERSION).unwrap();
        assert_eq!(write(&back), a);
        assert_ne!(a, write(&generate(&SynthSpec { seed: 1, ..spec }).unwrap()));
    }

    #[test]
    fn zero_noise_is_a_function_of_gold() {
        let c = generate(&SynthSpec {
            noise_rate: 0.0,
            n_utterances: 400,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for s in c.spans() {
            let g = s.gold_label.clone().unwrap();
            let w = s.weak_label.clone().unwrap();
            assert_eq!(map.entry(g).or_insert_with(|| w.clone()), &w);
        }
        let noisy = generate(&SynthSpec {
            noise_rate: 0.3,
            n_utterances: 400,
            ..SynthSpec::default()
        })
        .unwrap();
        let flipped = noisy
            .spans()
            .iter()
            .filter(|s| map[s.gold_label.as_ref().unwrap()] != *s.weak_label.as_ref().unwrap())
            .count();
        assert!(flipped > 0);
    }

    #[test]
    fn exact_span_count_and_extra_slots() {
        assert_eq!(generate(&SynthSpec::with_spans(1250)).unwrap().spans().len(), 1250);
        let c = generate(&SynthSpec {
            n_slots: 12,
            n_new_slots: 3,
            n_utterances: 200,
            ..SynthSpec::default()
        })
        .unwrap();
        assert_eq!(c.slot_catalog().len(), 12);
    }

    #[test]
    fn infeasible_specs_rejected() {
        for spec in [
            SynthSpec { n_new_slots: 9, ..SynthSpec::default() },
            SynthSpec { noise_rate: 0.5, ..SynthSpec::default() },
            SynthSpec { n_utterances: 5, ..SynthSpec::default() },
            SynthSpec { vocab_per_slot: 1, ..SynthSpec::default() },
        ] {
            assert!(generate(&spec).is_err(), "{spec:?}");
        }
    }
}
