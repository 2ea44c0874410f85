use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::{assemble_conversation, assemble_segments, speaker_lane, InputLanes, Segment, UtteranceSlot};
use crate::corpus::{Conversation, MASK, NUM_SPECIAL};
use crate::error::{MpcError, Result};
use crate::seed::{fnv1a, substream};
use crate::structure::{
    build_reply_graph, pointer_tuples, same_speaker_predecessors, shared_utterances, sub_conversations,
    top_shared_node, PointerTuple, ReplyGraph, SubConversation,
};

/// The seven pre-training objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rur,
    Iss,
    Pcd,
    Msur,
    Snd,
    Mlm,
    Nsp,
}

impl Task {
    pub const ALL: [Task; 7] = [Task::Rur, Task::Iss, Task::Pcd, Task::Msur, Task::Snd, Task::Mlm, Task::Nsp];

    pub fn name(self) -> &'static str {
        match self {
            Task::Rur => "rur",
            Task::Iss => "iss",
            Task::Pcd => "pcd",
            Task::Msur => "msur",
            Task::Snd => "snd",
            Task::Mlm => "mlm",
            Task::Nsp => "nsp",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| MpcError::invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub max_rur: usize,
    pub max_iss: usize,
    pub max_pcd: usize,
    pub mlm_rate: f64,
    /// Of the chosen MLM positions: share replaced by MASK, share replaced
    /// by a random token; the rest stay unchanged.
    pub mlm_mask_share: f64,
    pub mlm_random_share: f64,
    pub max_utterances: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            max_rur: 4,
            max_iss: 2,
            max_pcd: 2,
            mlm_rate: 0.15,
            mlm_mask_share: 0.8,
            mlm_random_share: 0.1,
            max_utterances: 7,
            max_seq_len: 230,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rur == 0 || self.max_iss == 0 || self.max_pcd == 0 || self.max_utterances == 0 || self.max_seq_len == 0
        {
            return Err(MpcError::invalid("sampler limits must be positive"));
        }
        if !(self.mlm_rate > 0.0 && self.mlm_rate < 1.0) {
            return Err(MpcError::invalid("mlm_rate must lie in (0, 1)"));
        }
        if self.mlm_mask_share < 0.0 || self.mlm_random_share < 0.0 || self.mlm_mask_share + self.mlm_random_share > 1.0 {
            return Err(MpcError::invalid("MLM replacement shares must be non-negative and sum to at most 1"));
        }
        Ok(())
    }
}

/// Two replies from the same speaker to the same addressee, and one pointer
/// in a different direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PcdTriple {
    pub anchor: PointerTuple,
    pub positive: PointerTuple,
    pub negative: PointerTuple,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum TaskTargets {
    /// (anchor, gold parent)
    Rur(Vec<(usize, usize)>),
    /// (anchor, all earlier utterances by the same speaker)
    Iss(Vec<(usize, Vec<usize>)>),
    Pcd(Vec<PcdTriple>),
    Msur {
        utterance: usize,
        positions: Vec<usize>,
        original: Vec<u32>,
    },
    Snd(bool),
    Mlm {
        positions: Vec<usize>,
        original: Vec<u32>,
    },
    Nsp(bool),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PretrainSample {
    pub lanes: InputLanes,
    pub targets: Vec<TaskTargets>,
    /// Utterances whose speaker lane is masked.
    pub speaker_mask: Vec<usize>,
}

/// Uniform sample without replacement of up to `k` items, in input order.
fn choose_up_to<T: Clone, R: Rng>(items: &[T], k: usize, rng: &mut R) -> Vec<T> {
    if items.len() <= k {
        return items.to_vec();
    }
    let mut idx = index::sample(rng, items.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

pub fn sample_rur<R: Rng>(graph: &ReplyGraph, rng: &mut R, cfg: &SamplerConfig) -> Vec<(usize, usize)> {
    let eligible: Vec<(usize, usize)> = graph
        .parent
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|j| (i, j)))
        .collect();
    choose_up_to(&eligible, cfg.max_rur, rng)
}

/// Anchors with at least one earlier same-speaker utterance; the anchors
/// double as the speaker-mask set.
pub fn sample_iss<R: Rng>(conv: &Conversation, rng: &mut R, cfg: &SamplerConfig) -> Vec<(usize, Vec<usize>)> {
    let eligible: Vec<(usize, Vec<usize>)> = (0..conv.len())
        .map(|i| (i, same_speaker_predecessors(conv, i)))
        .filter(|(_, g)| !g.is_empty())
        .collect();
    choose_up_to(&eligible, cfg.max_iss, rng)
}

pub fn sample_pcd<R: Rng>(conv: &Conversation, graph: &ReplyGraph, rng: &mut R, cfg: &SamplerConfig) -> Vec<PcdTriple> {
    let tuples = pointer_tuples(conv, graph);
    let mut pairs = Vec::new();
    for a in 0..tuples.len() {
        for b in a + 1..tuples.len() {
            if tuples[a].direction() == tuples[b].direction()
                && tuples.iter().any(|t| t.direction() != tuples[a].direction())
            {
                pairs.push((a, b));
            }
        }
    }
    choose_up_to(&pairs, cfg.max_pcd, rng)
        .into_iter()
        .map(|(a, b)| {
            let negatives: Vec<&PointerTuple> =
                tuples.iter().filter(|t| t.direction() != tuples[a].direction()).collect();
            PcdTriple {
                anchor: tuples[a],
                positive: tuples[b],
                negative: **negatives.choose(rng).expect("checked nonempty"),
            }
        })
        .collect()
}

pub fn sample_msur<R: Rng>(graph: &ReplyGraph, rng: &mut R) -> Option<usize> {
    shared_utterances(graph).choose(rng).copied()
}

/// Chooses MLM positions among content tokens and corrupts them in place.
pub fn sample_mlm<R: Rng>(lanes: &mut InputLanes, vocab_size: usize, rng: &mut R, cfg: &SamplerConfig) -> TaskTargets {
    let candidates: Vec<usize> = lanes.spans.iter().flat_map(|s| s.clone()).collect();
    let count = if candidates.is_empty() {
        0
    } else {
        ((cfg.mlm_rate * candidates.len() as f64).round() as usize).max(1)
    };
    let positions = choose_up_to(&candidates, count, rng);
    let original: Vec<u32> = positions.iter().map(|&p| lanes.token_ids[p]).collect();
    for &p in &positions {
        let r: f64 = rng.gen();
        if r < cfg.mlm_mask_share {
            lanes.token_ids[p] = MASK;
        } else if r < cfg.mlm_mask_share + cfg.mlm_random_share {
            lanes.token_ids[p] = rng.gen_range(NUM_SPECIAL as u32..vocab_size as u32);
        }
    }
    TaskTargets::Mlm { positions, original }
}

/// Windowed conversations and reply graphs of a corpus, built once.
#[derive(Clone, Debug)]
pub struct CorpusIndex {
    pub windows: Vec<Conversation>,
    pub graphs: Vec<ReplyGraph>,
    /// Conversations with a top shared node.
    pub snd_eligible: Vec<usize>,
    pub vocab_size: usize,
}

impl CorpusIndex {
    pub fn new(corpus: &[Conversation], cfg: &SamplerConfig, vocab_size: usize) -> Self {
        let windows: Vec<Conversation> = corpus.iter().map(|c| c.last_turns(cfg.max_utterances)).collect();
        let graphs: Vec<ReplyGraph> = windows.iter().map(build_reply_graph).collect();
        let snd_eligible = graphs
            .iter()
            .enumerate()
            .filter(|(_, g)| top_shared_node(g).is_some())
            .map(|(i, _)| i)
            .collect();
        CorpusIndex {
            windows,
            graphs,
            snd_eligible,
            vocab_size,
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// The two largest sub-conversations under the top shared node.
    pub fn snd_pair(&self, conv: usize) -> Option<(SubConversation, SubConversation)> {
        let g = &self.graphs[conv];
        let top = top_shared_node(g)?;
        let mut subs = sub_conversations(g, top).ok()?.into_iter();
        Some((subs.next()?, subs.next()?))
    }
}

fn sub_slots<'a>(conv: &'a Conversation, sub: &SubConversation) -> Vec<UtteranceSlot<'a>> {
    sub.members
        .iter()
        .map(|&i| UtteranceSlot {
            lane: speaker_lane(conv.speaker(i)),
            tokens: &conv.turns[i].tokens,
            mask_content: false,
        })
        .collect()
}

/// A two-segment SND sample for corpus conversation `conv`. Positive with
/// probability 1/2; a negative swaps one side for a sub-conversation of
/// another eligible conversation.
pub fn sample_snd<R: Rng>(
    index: &CorpusIndex,
    conv: usize,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Result<Option<PretrainSample>> {
    let Some((a, b)) = index.snd_pair(conv) else {
        return Ok(None);
    };
    let others: Vec<usize> = index.snd_eligible.iter().copied().filter(|&o| o != conv).collect();
    if others.is_empty() {
        return Err(MpcError::invalid(
            "shared node detection needs at least two eligible conversations to build negatives",
        ));
    }
    let own = &index.windows[conv];
    let mut left = sub_slots(own, &a);
    let mut right = sub_slots(own, &b);
    let positive = rng.gen_bool(0.5);
    if !positive {
        let o = *others.choose(rng).expect("nonempty");
        let og = &index.graphs[o];
        let subs = sub_conversations(og, top_shared_node(og).expect("eligible")).expect("shared");
        let replacement = subs.choose(rng).expect("two or more");
        let slots = sub_slots(&index.windows[o], replacement);
        if rng.gen_bool(0.5) {
            left = slots;
        } else {
            right = slots;
        }
    }
    let lanes = assemble_segments(
        &[
            Segment {
                utterances: left,
                cls_per_utterance: false,
            },
            Segment {
                utterances: right,
                cls_per_utterance: false,
            },
        ],
        cfg.max_seq_len,
    )?;
    Ok(Some(PretrainSample {
        lanes,
        targets: vec![TaskTargets::Snd(positive)],
        speaker_mask: vec![],
    }))
}

/// Adjacent utterance pair (label 1) or the second replaced by a random
/// utterance from another conversation (label 0), 50/50.
pub fn sample_nsp<R: Rng>(index: &CorpusIndex, conv: usize, rng: &mut R, cfg: &SamplerConfig) -> Result<Option<PretrainSample>> {
    let c = &index.windows[conv];
    if c.len() < 2 || index.len() < 2 {
        return Ok(None);
    }
    let i = rng.gen_range(0..c.len() - 1);
    let positive = rng.gen_bool(0.5);
    let second: &[u32] = if positive {
        &c.turns[i + 1].tokens
    } else {
        let mut o = rng.gen_range(0..index.len() - 1);
        if o >= conv {
            o += 1;
        }
        let oc = &index.windows[o];
        &oc.turns[rng.gen_range(0..oc.len())].tokens
    };
    let lanes = assemble_segments(
        &[
            Segment {
                utterances: vec![UtteranceSlot {
                    lane: speaker_lane(0),
                    tokens: &c.turns[i].tokens,
                    mask_content: false,
                }],
                cls_per_utterance: false,
            },
            Segment {
                utterances: vec![UtteranceSlot {
                    lane: speaker_lane(1),
                    tokens: second,
                    mask_content: false,
                }],
                cls_per_utterance: false,
            },
        ],
        cfg.max_seq_len,
    )?;
    Ok(Some(PretrainSample {
        lanes,
        targets: vec![TaskTargets::Nsp(positive)],
        speaker_mask: vec![],
    }))
}

/// All pre-training samples drawn from one conversation in one epoch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SampleBundle {
    /// Shared input for RUR, ISS and PCD.
    pub structure: Option<PretrainSample>,
    pub msur: Option<PretrainSample>,
    pub snd: Option<PretrainSample>,
    pub mlm: Option<PretrainSample>,
    pub nsp: Option<PretrainSample>,
}

impl SampleBundle {
    pub fn is_empty(&self) -> bool {
        self.structure.is_none() && self.msur.is_none() && self.snd.is_none() && self.mlm.is_none() && self.nsp.is_none()
    }

    pub fn samples(&self) -> impl Iterator<Item = &PretrainSample> {
        [&self.structure, &self.msur, &self.snd, &self.mlm, &self.nsp]
            .into_iter()
            .flatten()
    }

    pub fn targets(&self, task: Task) -> Option<&TaskTargets> {
        self.samples().flat_map(|s| s.targets.iter()).find(|t| {
            matches!(
                (task, t),
                (Task::Rur, TaskTargets::Rur(_))
                    | (Task::Iss, TaskTargets::Iss(_))
                    | (Task::Pcd, TaskTargets::Pcd(_))
                    | (Task::Msur, TaskTargets::Msur { .. })
                    | (Task::Snd, TaskTargets::Snd(_))
                    | (Task::Mlm, TaskTargets::Mlm { .. })
                    | (Task::Nsp, TaskTargets::Nsp(_))
            )
        })
    }
}

/// Draws fresh samples for every task. Each task has its own RNG substream
/// keyed by (seed, task, epoch, conversation id), so anchors change across
/// epochs and one task's draws never shift another's.
pub fn build_bundle(index: &CorpusIndex, conv: usize, epoch: u64, cfg: &SamplerConfig) -> Result<SampleBundle> {
    let c = &index.windows[conv];
    let g = &index.graphs[conv];
    let id = fnv1a(&c.id);
    let rng = |t: Task| substream(cfg.seed, t.name(), &[epoch, id]);

    let rur = sample_rur(g, &mut rng(Task::Rur), cfg);
    let iss = sample_iss(c, &mut rng(Task::Iss), cfg);
    let pcd = sample_pcd(c, g, &mut rng(Task::Pcd), cfg);
    let mut bundle = SampleBundle::default();

    let mut targets = Vec::new();
    if !rur.is_empty() {
        targets.push(TaskTargets::Rur(rur));
    }
    let speaker_mask: Vec<usize> = iss.iter().map(|(i, _)| *i).collect();
    if !iss.is_empty() {
        targets.push(TaskTargets::Iss(iss));
    }
    if !pcd.is_empty() {
        targets.push(TaskTargets::Pcd(pcd));
    }
    if !targets.is_empty() {
        bundle.structure = Some(PretrainSample {
            lanes: assemble_conversation(c, &speaker_mask, None, cfg.max_seq_len)?,
            targets,
            speaker_mask,
        });
    }

    if let Some(u) = sample_msur(g, &mut rng(Task::Msur)) {
        let lanes = assemble_conversation(c, &[], Some(u), cfg.max_seq_len)?;
        let positions: Vec<usize> = lanes.spans[u].clone().collect();
        if !positions.is_empty() {
            let original = c.turns[u].tokens[..positions.len()].to_vec();
            bundle.msur = Some(PretrainSample {
                lanes,
                targets: vec![TaskTargets::Msur {
                    utterance: u,
                    positions,
                    original,
                }],
                speaker_mask: vec![],
            });
        }
    }

    if index.snd_eligible.len() >= 2 {
        bundle.snd = sample_snd(index, conv, &mut rng(Task::Snd), cfg)?;
    }

    let mut lanes = assemble_conversation(c, &[], None, cfg.max_seq_len)?;
    let mlm = sample_mlm(&mut lanes, index.vocab_size, &mut rng(Task::Mlm), cfg);
    if matches!(&mlm, TaskTargets::Mlm { positions, .. } if !positions.is_empty()) {
        bundle.mlm = Some(PretrainSample {
            lanes,
            targets: vec![mlm],
            speaker_mask: vec![],
        });
    }

    bundle.nsp = sample_nsp(index, conv, &mut rng(Task::Nsp), cfg)?;
    Ok(bundle)
}
