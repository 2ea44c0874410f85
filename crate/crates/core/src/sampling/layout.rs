use std::ops::Range;

use serde::Serialize;

use crate::corpus::{Conversation, CLS, MASK, SEP};
use crate::error::{MpcError, Result};

/// Speaker lane of a masked interlocutor. Real interlocutor `s` uses lane
/// `s + 1`.
pub const MASK_SPEAKER: usize = 0;

pub fn speaker_lane(speaker: usize) -> usize {
    speaker + 1
}

/// Encoder input lanes. All vectors have the same length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InputLanes {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub speaker_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    /// CLS position of each utterance in per-utterance-CLS segments; a
    /// single leading CLS otherwise.
    pub cls_positions: Vec<usize>,
    /// Content-token positions of each utterance, in input order.
    pub spans: Vec<Range<usize>>,
}

impl InputLanes {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Appends `n` PAD positions that attention ignores.
    pub fn pad_to(&mut self, n: usize) {
        while self.token_ids.len() < n {
            let p = self.token_ids.len();
            self.token_ids.push(crate::corpus::PAD);
            self.position_ids.push(p);
            self.segment_ids.push(0);
            self.speaker_ids.push(MASK_SPEAKER);
            self.attention_mask.push(false);
        }
    }
}

/// One utterance headed into a segment.
#[derive(Clone, Debug)]
pub struct UtteranceSlot<'a> {
    pub lane: usize,
    pub tokens: &'a [u32],
    /// Replace every content token with MASK.
    pub mask_content: bool,
}

#[derive(Clone, Debug)]
pub struct Segment<'a> {
    pub utterances: Vec<UtteranceSlot<'a>>,
    /// Put a CLS before every utterance (the first doubles as the leading
    /// CLS). Otherwise only segment 0 gets one leading CLS.
    pub cls_per_utterance: bool,
}

/// Trims one token at a time from the end of the longest utterance (the
/// earliest among equals) until `overhead + Σ lengths ≤ budget`.
pub fn fit_lengths(lengths: &[usize], overhead: usize, budget: usize) -> Result<Vec<usize>> {
    if overhead > budget {
        return Err(MpcError::invalid(format!(
            "{overhead} structural tokens exceed the sequence budget {budget}"
        )));
    }
    let mut kept = lengths.to_vec();
    let mut total: usize = kept.iter().sum::<usize>() + overhead;
    while total > budget {
        let (idx, _) = kept
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("nonempty");
        kept[idx] -= 1;
        total -= 1;
    }
    Ok(kept)
}

/// Generic layout: `[CLS] seg0 [SEP] seg1 [SEP] ...` with segment ids
/// 0, 1, ... and absolute positions from 0.
pub fn assemble_segments(segments: &[Segment<'_>], max_seq_len: usize) -> Result<InputLanes> {
    let n_utts: usize = segments.iter().map(|s| s.utterances.len()).sum();
    if n_utts == 0 {
        return Err(MpcError::invalid("cannot assemble an empty input"));
    }
    let mut overhead = segments.len();
    for (k, s) in segments.iter().enumerate() {
        if s.cls_per_utterance {
            overhead += s.utterances.len();
        } else if k == 0 {
            overhead += 1;
        }
    }
    let lengths: Vec<usize> = segments.iter().flat_map(|s| s.utterances.iter().map(|u| u.tokens.len())).collect();
    let kept = fit_lengths(&lengths, overhead, max_seq_len)?;

    let mut lanes = InputLanes {
        token_ids: Vec::new(),
        position_ids: Vec::new(),
        segment_ids: Vec::new(),
        speaker_ids: Vec::new(),
        attention_mask: Vec::new(),
        cls_positions: Vec::new(),
        spans: Vec::new(),
    };
    let push = |lanes: &mut InputLanes, tok: u32, seg: usize, lane: usize| {
        lanes.position_ids.push(lanes.token_ids.len());
        lanes.token_ids.push(tok);
        lanes.segment_ids.push(seg);
        lanes.speaker_ids.push(lane);
        lanes.attention_mask.push(true);
    };
    let mut u = 0;
    for (k, s) in segments.iter().enumerate() {
        let first_lane = s.utterances.first().map(|x| x.lane).unwrap_or(MASK_SPEAKER);
        if !s.cls_per_utterance && k == 0 {
            lanes.cls_positions.push(0);
            push(&mut lanes, CLS, k, first_lane);
        }
        let mut last_lane = first_lane;
        for slot in &s.utterances {
            if s.cls_per_utterance {
                lanes.cls_positions.push(lanes.token_ids.len());
                push(&mut lanes, CLS, k, slot.lane);
            }
            let start = lanes.token_ids.len();
            for &t in &slot.tokens[..kept[u]] {
                push(&mut lanes, if slot.mask_content { MASK } else { t }, k, slot.lane);
            }
            lanes.spans.push(start..lanes.token_ids.len());
            last_lane = slot.lane;
            u += 1;
        }
        push(&mut lanes, SEP, k, last_lane);
    }
    Ok(lanes)
}

/// Single-stream layout of a (windowed) conversation: a CLS before each
/// utterance, one terminal SEP, segment 0 throughout. Utterances in
/// `speaker_mask` get [`MASK_SPEAKER`]; `masked_utterance` has its content
/// replaced by MASK.
pub fn assemble_conversation(
    conv: &Conversation,
    speaker_mask: &[usize],
    masked_utterance: Option<usize>,
    max_seq_len: usize,
) -> Result<InputLanes> {
    if conv.is_empty() {
        return Err(MpcError::invalid("empty conversation"));
    }
    let seg = Segment {
        utterances: conv
            .turns
            .iter()
            .enumerate()
            .map(|(i, t)| UtteranceSlot {
                lane: if speaker_mask.contains(&i) {
                    MASK_SPEAKER
                } else {
                    speaker_lane(t.speaker)
                },
                tokens: &t.tokens,
                mask_content: masked_utterance == Some(i),
            })
            .collect(),
        cls_per_utterance: true,
    };
    assemble_segments(&[seg], max_seq_len)
}
