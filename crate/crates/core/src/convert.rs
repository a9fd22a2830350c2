//! BIO two-column text to the corpus format.
//!
//! Input: one `token TAG` pair per line (whitespace separated, the tag is the
//! last column), utterances separated by blank lines. A comment line
//! `# dialogue_id = <id>` sets the dialogue for following utterances; other
//! `#` lines are ignored. `I-x` without a preceding `B-x`/`I-x` opens a new
//! span, matching conlleval's lenient chunking.

use std::io::BufRead;

use crate::corpus::{CandidateSpan, Corpus, SpanId, Utterance};
use crate::error::{Error, Result};

pub fn bio_to_corpus<R: BufRead>(reader: R, id_prefix: &str) -> Result<Corpus> {
    let mut utterances = Vec::new();
    let mut spans = Vec::new();
    let mut dialogue = String::from("d0");
    let mut turn = 0u32;
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();

    let mut flush = |tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     dialogue: &str,
                     turn: &mut u32| {
        if tokens.is_empty() {
            return;
        }
        let id = format!("{id_prefix}{:06}", utterances.len());
        for (k, (start, len, label)) in chunks(tags).into_iter().enumerate() {
            spans.push(CandidateSpan {
                span_id: SpanId(format!("{id}-s{k}")),
                utterance_id: id.clone(),
                start,
                length: len,
                weak_label: None,
                gold_label: Some(label),
            });
        }
        utterances.push(Utterance {
            id,
            tokens: std::mem::take(tokens),
            dialogue_id: dialogue.to_owned(),
            turn_index: *turn,
        });
        tags.clear();
        *turn += 1;
    };

    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags, &dialogue, &mut turn);
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                if key.trim() == "dialogue_id" {
                    flush(&mut tokens, &mut tags, &dialogue, &mut turn);
                    dialogue = value.trim().to_owned();
                    turn = 0;
                }
            }
            continue;
        }
        let mut cols: Vec<&str> = trimmed.split_whitespace().collect();
        if cols.len() < 2 {
            return Err(Error::Malformed {
                line: i + 1,
                message: "expected `token TAG`".into(),
            });
        }
        let tag = cols.pop().expect("len >= 2");
        if !(tag == "O" || tag.starts_with("B-") || tag.starts_with("I-")) || tag.len() == 2 {
            return Err(Error::Malformed {
                line: i + 1,
                message: format!("invalid BIO tag `{tag}`"),
            });
        }
        tokens.push(cols[0].to_owned());
        tags.push(tag.to_owned());
    }
    flush(&mut tokens, &mut tags, &dialogue, &mut turn);
    Corpus::from_parts(utterances, spans)
}

/// `(start, len, label)` chunks of a BIO tag sequence.
fn chunks(tags: &[String]) -> Vec<(usize, usize, String)> {
    let mut out: Vec<(usize, usize, String)> = Vec::new();
    let mut open = false;
    for (i, tag) in tags.iter().enumerate() {
        if tag == "O" {
            open = false;
            continue;
        }
        let (prefix, label) = tag.split_at(2);
        let continues = prefix == "I-"
            && open
            && out.last().is_some_and(|(s, l, lab)| lab == label && s + l == i);
        if continues {
            out.last_mut().expect("open chunk").1 += 1;
        } else {
            out.push((i, 1, label.to_owned()));
        }
        open = true;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_chunks() {
        let text = "# dialogue_id = flights\nshow O\nflights O\nto O\nnew B-toloc\nyork I-toloc\nat O\n7 B-time\npm I-time\n\nfrom O\nboston B-fromloc\n";
        let corpus = bio_to_corpus(text.as_bytes(), "atis-").unwrap();
        assert_eq!(corpus.utterances().len(), 2);
        let texts: Vec<(String, String)> = corpus
            .spans()
            .iter()
            .map(|s| (corpus.span_text(s), s.gold_label.clone().unwrap()))
            .collect();
        assert_eq!(
            texts,
            [
                ("new york".to_owned(), "toloc".to_owned()),
                ("7 pm".to_owned(), "time".to_owned()),
                ("boston".to_owned(), "fromloc".to_owned()),
            ]
        );
        assert_eq!(corpus.utterances()[1].dialogue_id, "flights");
        assert_eq!(corpus.utterances()[1].turn_index, 1);
    }

    #[test]
    fn lenient_inside_tags() {
        let tags: Vec<String> = ["I-a", "I-a", "B-a", "I-b", "O", "I-b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            chunks(&tags),
            vec![
                (0, 2, "a".into()),
                (2, 1, "a".into()),
                (3, 1, "b".into()),
                (5, 1, "b".into())
            ]
        );
    }

    #[test]
    fn rejects_bad_tag() {
        assert!(bio_to_corpus("x Q-a\n".as_bytes(), "u").is_err());
        assert!(bio_to_corpus("x\n".as_bytes(), "u").is_err());
    }

    #[test]
    fn catalog_counts_distinct_labels() {
        // 79 distinct slot types, one chunk each, as in a converted ATIS file.
        let mut text = String::new();
        for i in 0..79 {
            text.push_str(&format!("w{i} B-slot_{i}\nx O\n\n"));
        }
        text.push_str("y B-slot_0\n");
        let corpus = bio_to_corpus(text.as_bytes(), "u").unwrap();
        assert_eq!(corpus.slot_catalog().len(), 79);
    }
}
