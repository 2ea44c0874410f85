//! Seeded generator of multi-party conversations with recoverable structure.
//!
//! Every utterance that receives replies carries a topic key `kN`; each reply
//! carries the matching reference token `rN` of its parent's key. Each
//! interlocutor gets a persona token `pN` that dominates its filler words;
//! the remaining filler is uniform noise `wN`. Reply links, addressees and
//! speakers are therefore all learnable from text.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conversation::{Conversation, Turn};
use super::vocab::{Vocabulary, NUM_SPECIAL};
use crate::error::{MpcError, Result};
use crate::seed::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_conversations: usize,
    /// Inclusive range of turns per conversation.
    pub turns: [usize; 2],
    /// Inclusive range of distinct interlocutors per conversation.
    pub interlocutors: [usize; 2],
    /// Inclusive range of filler tokens per utterance (key and reference
    /// tokens come on top).
    pub filler_tokens: [usize; 2],
    pub vocab_size: usize,
    /// Probability that turn i ≥ 3 replies to a random earlier turn instead
    /// of its predecessor.
    pub branching: f64,
    /// Probability that a filler token is the speaker's persona token.
    pub speaker_bias: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_conversations: 100,
            turns: [4, 8],
            interlocutors: [2, 4],
            filler_tokens: [2, 4],
            vocab_size: 128,
            branching: 0.35,
            speaker_bias: 0.9,
            seed: 7,
        }
    }
}

const MIN_KEYS: usize = 24;
const MIN_PERSONAS: usize = 16;
const MIN_NOISE: usize = 8;

/// Id ranges of the synthetic token classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub keys: Range<u32>,
    pub refs: Range<u32>,
    pub personas: Range<u32>,
    pub noise: Range<u32>,
}

impl TokenLayout {
    pub fn ref_of(&self, key: u32) -> u32 {
        self.refs.start + (key - self.keys.start)
    }
}

fn check_range(name: &str, r: [usize; 2]) -> Result<()> {
    if r[0] > r[1] {
        return Err(MpcError::invalid(format!("{name} range {:?} is empty", r)));
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        check_range("turns", self.turns)?;
        check_range("interlocutors", self.interlocutors)?;
        check_range("filler_tokens", self.filler_tokens)?;
        if self.num_conversations == 0 || self.turns[0] == 0 || self.interlocutors[0] == 0 {
            return Err(MpcError::invalid("counts must be positive"));
        }
        if self.interlocutors[0] > self.turns[0] {
            return Err(MpcError::invalid(format!(
                "{} interlocutors cannot fit in {} turns",
                self.interlocutors[0], self.turns[0]
            )));
        }
        if self.turns[1] >= 2 && self.interlocutors[1] < 2 {
            return Err(MpcError::invalid("replies need at least two interlocutors"));
        }
        if !(0.0..=1.0).contains(&self.branching) || !(0.0..=1.0).contains(&self.speaker_bias) {
            return Err(MpcError::invalid("probabilities must lie in [0, 1]"));
        }
        self.layout().map(|_| ())
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        let keys = MIN_KEYS.max(self.turns[1]);
        let personas = MIN_PERSONAS.max(self.interlocutors[1]);
        let fixed = NUM_SPECIAL + 2 * keys + personas;
        if self.vocab_size < fixed + MIN_NOISE {
            return Err(MpcError::invalid(format!(
                "vocab_size {} is below the minimum {}",
                self.vocab_size,
                fixed + MIN_NOISE
            )));
        }
        let k0 = NUM_SPECIAL as u32;
        let r0 = k0 + keys as u32;
        let p0 = r0 + keys as u32;
        let w0 = p0 + personas as u32;
        Ok(TokenLayout {
            keys: k0..r0,
            refs: r0..p0,
            personas: p0..w0,
            noise: w0..self.vocab_size as u32,
        })
    }

    /// The id ↔ word table used by generated corpora.
    pub fn vocabulary(&self) -> Vocabulary {
        let l = self.layout().expect("valid synthetic spec");
        let words = l
            .keys
            .clone()
            .map(|i| format!("k{}", i - l.keys.start))
            .chain(l.refs.clone().map(|i| format!("r{}", i - l.refs.start)))
            .chain(l.personas.clone().map(|i| format!("p{}", i - l.personas.start)))
            .chain(l.noise.clone().map(|i| format!("w{}", i - l.noise.start)));
        Vocabulary::from_words(words).expect("distinct words")
    }
}

fn uniform_incl<R: Rng>(rng: &mut R, r: [usize; 2]) -> usize {
    rng.gen_range(r[0]..=r[1])
}

fn one_conversation<R: Rng>(spec: &SyntheticSpec, layout: &TokenLayout, id: String, rng: &mut R) -> Conversation {
    let n = uniform_incl(rng, spec.turns);
    let mut k = uniform_incl(rng, spec.interlocutors).min(n);
    if n >= 2 {
        k = k.max(2);
    }

    let mut parent: Vec<Option<usize>> = vec![None; n];
    for (i, p) in parent.iter_mut().enumerate().skip(1) {
        *p = Some(if i >= 2 && rng.gen::<f64>() < spec.branching {
            rng.gen_range(0..i - 1)
        } else {
            i - 1
        });
    }

    let mut speaker = vec![0usize; n];
    let mut used = 1;
    for i in 1..n {
        let ps = speaker[parent[i].expect("linked")];
        let need = k - used;
        let remaining = n - i;
        let fresh = need > 0 && (need >= remaining || rng.gen::<f64>() < need as f64 / remaining as f64);
        speaker[i] = if fresh || used == 1 {
            used += 1;
            used - 1
        } else {
            let others: Vec<usize> = (0..used).filter(|&s| s != ps).collect();
            *others.choose(rng).expect("another speaker")
        };
    }

    let mut has_children = vec![false; n];
    for p in parent.iter().flatten() {
        has_children[*p] = true;
    }
    let mut persona_pool: Vec<u32> = layout.personas.clone().collect();
    persona_pool.shuffle(rng);
    let mut key_pool: Vec<u32> = layout.keys.clone().collect();
    key_pool.shuffle(rng);
    let mut keys = key_pool.into_iter();
    let key: Vec<Option<u32>> = has_children.iter().map(|&h| if h { keys.next() } else { None }).collect();

    let turns = (0..n)
        .map(|i| {
            let mut tokens = Vec::new();
            if let Some(kk) = key[i] {
                tokens.push(kk);
            }
            if let Some(p) = parent[i] {
                tokens.push(layout.ref_of(key[p].expect("parents carry keys")));
            }
            for _ in 0..uniform_incl(rng, spec.filler_tokens) {
                tokens.push(if rng.gen::<f64>() < spec.speaker_bias {
                    persona_pool[speaker[i]]
                } else {
                    rng.gen_range(layout.noise.clone())
                });
            }
            Turn {
                speaker: speaker[i],
                tokens,
                addressee: parent[i].map(|p| speaker[p]),
                reply_to: parent[i],
            }
        })
        .collect();
    Conversation { id, turns }
}

/// Pure function of `spec`: conversation `c` draws from its own substream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Conversation>> {
    spec.validate()?;
    let layout = spec.layout()?;
    Ok((0..spec.num_conversations)
        .map(|c| {
            let mut rng = substream(spec.seed, "synthetic", &[c as u64]);
            one_conversation(spec, &layout, format!("syn-{}-{}", spec.seed, c), &mut rng)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::conversation::derive_reply_to;

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec { seed: 7, ..Default::default() };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..Default::default() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn zero_branching_gives_chains() {
        let spec = SyntheticSpec {
            branching: 0.0,
            num_conversations: 50,
            ..Default::default()
        };
        for c in generate_synthetic(&spec).unwrap() {
            for (i, t) in c.turns.iter().enumerate() {
                assert_eq!(t.reply_to, i.checked_sub(1));
            }
        }
    }

    #[test]
    fn validator_sweep_over_many_conversations() {
        let spec = SyntheticSpec {
            num_conversations: 1000,
            turns: [5, 8],
            ..Default::default()
        };
        let convs = generate_synthetic(&spec).unwrap();
        assert_eq!(convs.len(), 1000);
        for c in &convs {
            c.validate().unwrap();
            assert!((5..=8).contains(&c.len()));
            assert!(c.num_speakers() >= spec.interlocutors[0] && c.num_speakers() <= spec.interlocutors[1]);
            let derived = derive_reply_to(c);
            for (i, t) in c.turns.iter().enumerate().skip(1) {
                let p = t.reply_to.unwrap();
                assert_eq!(t.addressee, Some(c.speaker(p)));
                assert_ne!(t.speaker, c.speaker(p));
                assert_eq!(derived[i], Some(p));
            }
            assert!(c.turns.iter().flat_map(|t| &t.tokens).all(|&id| (id as usize) < spec.vocab_size));
        }
    }

    #[test]
    fn persona_tokens_identify_speakers() {
        let spec = SyntheticSpec {
            speaker_bias: 1.0,
            ..Default::default()
        };
        let l = spec.layout().unwrap();
        for c in generate_synthetic(&spec).unwrap() {
            let mut persona = vec![None; c.num_speakers()];
            for t in &c.turns {
                for &tok in t.tokens.iter().filter(|x| l.personas.contains(x)) {
                    let p = persona[t.speaker].get_or_insert(tok);
                    assert_eq!(*p, tok);
                }
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let bad = SyntheticSpec {
            turns: [2, 4],
            interlocutors: [3, 4],
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec {
            turns: [5, 4],
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticSpec {
            vocab_size: 40,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }
}
