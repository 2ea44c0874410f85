use serde::{Deserialize, Serialize};

use crate::error::{MpcError, Result};

/// One utterance. Indices are 0-based: `speaker` indexes interlocutors in
/// order of first appearance, `reply_to` indexes earlier turns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: usize,
    pub tokens: Vec<u32>,
    pub addressee: Option<usize>,
    pub reply_to: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, turns: Vec<Turn>) -> Result<Self> {
        let c = Conversation { id: id.into(), turns };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        validate_structure(
            self.turns
                .iter()
                .map(|t| (t.speaker, t.addressee, t.reply_to)),
        )
        .map_err(|(i, reason)| MpcError::invalid(format!("conversation {}: turn {}: {}", self.id, i, reason)))
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn speaker(&self, i: usize) -> usize {
        self.turns[i].speaker
    }

    pub fn num_speakers(&self) -> usize {
        self.turns.iter().map(|t| t.speaker + 1).max().unwrap_or(0)
    }

    /// Reply parents: explicit links where present, otherwise derived from
    /// addressees.
    pub fn replies(&self) -> Vec<Option<usize>> {
        derive_reply_to(self)
    }

    /// The suffix starting at `start`, re-indexed as a conversation of its
    /// own. Links and addressees that point before the window are dropped.
    pub fn window(&self, start: usize) -> Conversation {
        let replies = self.replies();
        let mut remap: Vec<Option<usize>> = vec![None; self.num_speakers()];
        let mut next = 0;
        let mut turns = Vec::with_capacity(self.len().saturating_sub(start));
        for (i, t) in self.turns.iter().enumerate().skip(start) {
            let addressee = t.addressee.and_then(|a| remap[a]);
            let speaker = *remap[t.speaker].get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            let reply_to = replies[i].and_then(|j| j.checked_sub(start));
            turns.push(Turn {
                speaker,
                tokens: t.tokens.clone(),
                addressee,
                reply_to,
            });
        }
        Conversation {
            id: self.id.clone(),
            turns,
        }
    }

    /// The window holding at most the last `max_turns` turns.
    pub fn last_turns(&self, max_turns: usize) -> Conversation {
        if self.len() <= max_turns {
            return self.clone();
        }
        self.window(self.len() - max_turns)
    }
}

/// Checks the first-appearance, addressee and reply-link rules. On failure
/// returns the offending turn index and a reason.
pub(crate) fn validate_structure(
    turns: impl Iterator<Item = (usize, Option<usize>, Option<usize>)>,
) -> std::result::Result<(), (usize, String)> {
    let mut seen = 0usize;
    let mut count = 0;
    for (i, (speaker, addressee, reply_to)) in turns.enumerate() {
        count += 1;
        if let Some(a) = addressee {
            if a >= seen {
                return Err((i, format!("addressee {a} has no earlier turn")));
            }
        }
        if speaker > seen {
            return Err((i, format!("speaker {speaker} skips first-appearance order")));
        }
        if speaker == seen {
            seen += 1;
        }
        if let Some(r) = reply_to {
            if r >= i {
                return Err((i, format!("reply_to {r} is not an earlier turn")));
            }
        }
    }
    if count == 0 {
        return Err((0, "conversation has no turns".into()));
    }
    Ok(())
}

/// reply_to(i) = explicit link if present, else the latest j < i spoken by
/// addressee(i). Turns with neither stay unlinked.
pub fn derive_reply_to(conv: &Conversation) -> Vec<Option<usize>> {
    conv.turns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.reply_to.or_else(|| {
                let a = t.addressee?;
                (0..i).rev().find(|&j| conv.turns[j].speaker == a)
            })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// The six-turn Ubuntu IRC example: speakers I.1..I.4, addressees only.
    pub fn table1() -> Conversation {
        let spk = [0, 1, 2, 1, 3, 2];
        let adr = [None, Some(0), Some(1), Some(2), Some(1), Some(1)];
        let turns = spk
            .iter()
            .zip(adr)
            .enumerate()
            .map(|(i, (&s, a))| Turn {
                speaker: s,
                tokens: vec![10 + i as u32, 20 + s as u32],
                addressee: a,
                reply_to: None,
            })
            .collect();
        Conversation::new("table1", turns).unwrap()
    }

    /// Conversation from explicit parents; speakers alternate along edges.
    pub fn from_parents(parents: &[Option<usize>], speakers: &[usize]) -> Conversation {
        let turns = parents
            .iter()
            .zip(speakers)
            .enumerate()
            .map(|(i, (p, &s))| Turn {
                speaker: s,
                tokens: vec![5 + i as u32],
                addressee: p.map(|j| speakers[j]),
                reply_to: *p,
            })
            .collect();
        Conversation::new("fixture", turns).unwrap()
    }

    pub fn chain(n: usize) -> Conversation {
        let parents: Vec<_> = (0..n).map(|i| i.checked_sub(1)).collect();
        let speakers: Vec<_> = (0..n).map(|i| i % 2).collect();
        from_parents(&parents, &speakers)
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn table1_derived_links_follow_latest_addressee_turn() {
        let c = table1();
        let r = derive_reply_to(&c);
        // turn 5 (index 4) addresses I.2, whose latest prior turn is 4 (index 3)
        assert_eq!(r[4], Some(3));
        assert_eq!(r[1], Some(0));
        assert_eq!(r, vec![None, Some(0), Some(1), Some(2), Some(3), Some(3)]);
    }

    #[test]
    fn explicit_links_are_never_overwritten() {
        let mut c = table1();
        c.turns[4].reply_to = Some(1);
        assert_eq!(derive_reply_to(&c)[4], Some(1));
    }

    #[test]
    fn chain_links_to_previous_turn() {
        let c = chain(5);
        let r = derive_reply_to(&c);
        assert_eq!(r, vec![None, Some(0), Some(1), Some(2), Some(3)]);
    }

    #[test]
    fn single_turn_is_valid() {
        let c = Conversation::new(
            "one",
            vec![Turn {
                speaker: 0,
                tokens: vec![7],
                addressee: None,
                reply_to: None,
            }],
        )
        .unwrap();
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let t = |speaker, addressee, reply_to| Turn {
            speaker,
            tokens: vec![],
            addressee,
            reply_to,
        };
        assert!(Conversation::new("e", vec![]).is_err());
        assert!(Conversation::new("a", vec![t(0, Some(0), None)]).is_err());
        assert!(Conversation::new("b", vec![t(1, None, None)]).is_err());
        assert!(Conversation::new("c", vec![t(0, None, None), t(1, Some(1), None)]).is_err());
        assert!(Conversation::new("d", vec![t(0, None, None), t(1, Some(0), Some(1))]).is_err());
    }

    #[test]
    fn window_reindexes_speakers_and_links() {
        let c = table1();
        let w = c.window(2);
        w.validate().unwrap();
        assert_eq!(w.turns.iter().map(|t| t.speaker).collect::<Vec<_>>(), vec![0, 1, 2, 0]);
        // I.2 speaks at window index 1, so the later addressees to I.2 survive
        assert_eq!(w.turns[0].addressee, None);
        assert_eq!(w.turns[1].addressee, Some(0));
        assert_eq!(w.turns[2].addressee, Some(1));
        assert_eq!(w.turns[2].reply_to, Some(1));
        assert_eq!(w.turns[0].reply_to, None);
    }
}
