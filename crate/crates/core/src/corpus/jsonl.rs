//! One conversation per line:
//!
//! ```json
//! {"id": "c1", "turns": [{"speaker": "alice", "text": "hi all"},
//!                        {"speaker": "bob", "text": "hey", "addressee": "alice", "reply_to": 0}]}
//! ```
//!
//! `reply_to` is a 0-based index into `turns`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::conversation::{validate_structure, Conversation, Turn};
use super::vocab::{build_vocab, split_words, Vocabulary};
use crate::error::{MpcError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub speaker: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addressee: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_to: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub turns: Vec<TurnRecord>,
}

/// A validated conversation whose utterances are still words.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConversation {
    pub id: String,
    pub speaker_names: Vec<String>,
    pub turns: Vec<RawTurn>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTurn {
    pub speaker: usize,
    pub words: Vec<String>,
    pub addressee: Option<usize>,
    pub reply_to: Option<usize>,
}

impl RawConversation {
    pub fn encode(&self, vocab: &Vocabulary) -> Conversation {
        Conversation {
            id: self.id.clone(),
            turns: self
                .turns
                .iter()
                .map(|t| Turn {
                    speaker: t.speaker,
                    tokens: vocab.encode_words(&t.words),
                    addressee: t.addressee,
                    reply_to: t.reply_to,
                })
                .collect(),
        }
    }
}

impl ConversationRecord {
    /// Renames speakers to first-appearance indices and enforces the
    /// conversation invariants.
    pub fn into_raw(self) -> std::result::Result<RawConversation, String> {
        let mut names: Vec<String> = Vec::new();
        let mut ids: HashMap<String, usize> = HashMap::new();
        let mut turns = Vec::with_capacity(self.turns.len());
        for (i, t) in self.turns.into_iter().enumerate() {
            // Resolve the addressee against earlier speakers only.
            let addressee = match &t.addressee {
                Some(a) => Some(
                    *ids.get(a)
                        .ok_or_else(|| format!("turn {i}: addressee {a:?} has no earlier turn"))?,
                ),
                None => None,
            };
            let speaker = *ids.entry(t.speaker.clone()).or_insert_with(|| {
                names.push(t.speaker.clone());
                names.len() - 1
            });
            turns.push(RawTurn {
                speaker,
                words: split_words(&t.text).collect(),
                addressee,
                reply_to: t.reply_to,
            });
        }
        validate_structure(turns.iter().map(|t| (t.speaker, t.addressee, t.reply_to)))
            .map_err(|(i, reason)| format!("turn {i}: {reason}"))?;
        Ok(RawConversation {
            id: self.id,
            speaker_names: names,
            turns,
        })
    }

    /// Speakers are written as `I.1`, `I.2`, ...
    pub fn from_conversation(c: &Conversation, vocab: &Vocabulary) -> Self {
        let name = |s: usize| format!("I.{}", s + 1);
        ConversationRecord {
            id: c.id.clone(),
            turns: c
                .turns
                .iter()
                .map(|t| TurnRecord {
                    speaker: name(t.speaker),
                    text: vocab.decode(&t.tokens),
                    addressee: t.addressee.map(name),
                    reply_to: t.reply_to,
                })
                .collect(),
        }
    }
}

pub fn parse_jsonl_str(text: &str) -> Result<Vec<RawConversation>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ConversationRecord = serde_json::from_str(line).map_err(|e| MpcError::Record {
            line: n + 1,
            reason: e.to_string(),
        })?;
        let raw = record.into_raw().map_err(|reason| MpcError::Record { line: n + 1, reason })?;
        out.push(raw);
    }
    Ok(out)
}

pub fn parse_jsonl(path: &Path) -> Result<Vec<RawConversation>> {
    let text = fs::read_to_string(path).map_err(|e| MpcError::io(path, e))?;
    parse_jsonl_str(&text)
}

pub fn to_jsonl_string(convs: &[Conversation], vocab: &Vocabulary) -> Result<String> {
    let mut s = String::new();
    for c in convs {
        s.push_str(&serde_json::to_string(&ConversationRecord::from_conversation(c, vocab))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl(path: &Path, convs: &[Conversation], vocab: &Vocabulary) -> Result<()> {
    let body = to_jsonl_string(convs, vocab)?;
    let mut f = fs::File::create(path).map_err(|e| MpcError::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| MpcError::io(path, e))
}

/// Parses a corpus and tokenizes it, building a vocabulary of at most
/// `max_vocab` entries unless one is supplied.
pub fn load_corpus(path: &Path, vocab: Option<&Vocabulary>, max_vocab: usize) -> Result<(Vec<Conversation>, Vocabulary)> {
    let raw = parse_jsonl(path)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_vocab(raw.iter().flat_map(|c| c.turns.iter().map(|t| t.words.as_slice())), max_vocab)?,
    };
    let convs = raw.iter().map(|r| r.encode(&vocab)).collect();
    Ok((convs, vocab))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::synthetic::{generate_synthetic, SyntheticSpec};

    const TABLE1: &str = r#"{"id":"t1","turns":[{"speaker":"I.1","text":"How can I setup if I want add new server at xchat?"},{"speaker":"I.2","text":"From places, network servers, work group, his computer, and then I clicked on the shared folder.","addressee":"I.1"},{"speaker":"I.3","text":"It did not allow you to see the files?","addressee":"I.2"},{"speaker":"I.2","text":"It prompts for authentication and I don't know what to put. I tried guest with no password.","addressee":"I.3"},{"speaker":"I.4","text":"Put proper authentication in, then?","addressee":"I.2"},{"speaker":"I.3","text":"I think you had kde on suse?","addressee":"I.2"}]}"#;

    #[test]
    fn table1_speakers_and_addressees() {
        let convs = parse_jsonl_str(TABLE1).unwrap();
        let c = &convs[0];
        let speakers: Vec<_> = c.turns.iter().map(|t| t.speaker).collect();
        let addressees: Vec<_> = c.turns.iter().map(|t| t.addressee).collect();
        assert_eq!(speakers, vec![0, 1, 2, 1, 3, 2]);
        assert_eq!(addressees, vec![None, Some(0), Some(1), Some(2), Some(1), Some(1)]);
        assert_eq!(c.turns[0].words[0], "how");
    }

    #[test]
    fn addressee_without_earlier_turn_reports_line() {
        let text = format!(
            "{TABLE1}\n{}\n",
            r#"{"id":"bad","turns":[{"speaker":"I.1","text":"a"},{"speaker":"I.2","text":"b","addressee":"I.5"}]}"#
        );
        match parse_jsonl_str(&text) {
            Err(MpcError::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected record error, got {other:?}"),
        }
    }

    #[test]
    fn self_reply_link_is_rejected() {
        let text = r#"{"id":"x","turns":[{"speaker":"a","text":"a"},{"speaker":"b","text":"b","reply_to":1}]}"#;
        assert!(matches!(parse_jsonl_str(text), Err(MpcError::Record { line: 1, .. })));
    }

    #[test]
    fn single_turn_without_addressee_is_valid() {
        let convs = parse_jsonl_str(r#"{"id":"s","turns":[{"speaker":"z","text":"alone"}]}"#).unwrap();
        assert_eq!(convs[0].turns.len(), 1);
    }

    #[test]
    fn load_corpus_builds_capped_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        fs::write(&p, TABLE1).unwrap();
        let (convs, vocab) = load_corpus(&p, None, 12).unwrap();
        assert_eq!(vocab.len(), 12);
        assert!(convs[0].turns.iter().flat_map(|t| &t.tokens).all(|&id| (id as usize) < vocab.len()));
        assert!(load_corpus(&dir.path().join("missing.jsonl"), None, 12).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn serialize_then_parse_is_identity(seed in 0u64..10_000) {
            let spec = SyntheticSpec { num_conversations: 4, seed, ..SyntheticSpec::default() };
            let convs = generate_synthetic(&spec).unwrap();
            let vocab = spec.vocabulary();
            let text = to_jsonl_string(&convs, &vocab).unwrap();
            let back: Vec<Conversation> = parse_jsonl_str(&text).unwrap().iter().map(|r| r.encode(&vocab)).collect();
            prop_assert_eq!(back, convs);
        }
    }
}
