use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{argmax_first, precision_at_1, recall_at_k, session_metrics, MetricReport};
use crate::autodiff::{Graph, Var};
use crate::corpus::Conversation;
use crate::error::{MpcError, Result};
use crate::model::{gold_nll, EncoderParams, Forward};
use crate::sampling::{assemble_conversation, assemble_segments, speaker_lane, InputLanes, SamplerConfig, Segment, UtteranceSlot};
use crate::seed::{fnv1a, substream};
use crate::structure::same_speaker_predecessors;

/// Fine-tuning tasks: addressee recognition, speaker identification,
/// response selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Downstream {
    Ar,
    Si,
    Rs,
}

impl Downstream {
    pub const ALL: [Downstream; 3] = [Downstream::Ar, Downstream::Si, Downstream::Rs];

    pub fn name(self) -> &'static str {
        match self {
            Downstream::Ar => "ar",
            Downstream::Si => "si",
            Downstream::Rs => "rs",
        }
    }
}

impl fmt::Display for Downstream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Downstream {
    type Err = MpcError;

    fn from_str(s: &str) -> Result<Self> {
        Downstream::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| MpcError::invalid(format!("unknown downstream task {s:?}")))
    }
}

/// For each utterance, the earlier utterances by its addressee; `None` for
/// the first utterance and for utterances without an addressee.
pub fn ar_gold(conv: &Conversation) -> Vec<Option<Vec<usize>>> {
    conv.turns
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let a = t.addressee?;
            let js: Vec<usize> = (0..i).filter(|&j| conv.speaker(j) == a).collect();
            (!js.is_empty()).then_some(js)
        })
        .collect()
}

/// Earlier utterances sharing the last utterance's speaker.
pub fn si_gold(conv: &Conversation) -> Result<Vec<usize>> {
    if conv.len() < 2 {
        return Err(MpcError::invalid("speaker identification needs at least two utterances"));
    }
    Ok(same_speaker_predecessors(conv, conv.len() - 1))
}

/// Input for speaker identification: the last utterance's speaker lane is
/// masked.
pub fn si_lanes(conv: &Conversation, max_seq_len: usize) -> Result<InputLanes> {
    assemble_conversation(conv, &[conv.len().saturating_sub(1)], None, max_seq_len)
}

/// Context utterances with per-utterance CLS as segment 0, the response as
/// segment 1 on the responder's lane.
pub fn rs_lanes(context: &Conversation, response: &[u32], speaker: usize, max_seq_len: usize) -> Result<InputLanes> {
    let ctx = Segment {
        utterances: context
            .turns
            .iter()
            .map(|t| UtteranceSlot {
                lane: speaker_lane(t.speaker),
                tokens: &t.tokens,
                mask_content: false,
            })
            .collect(),
        cls_per_utterance: true,
    };
    let resp = Segment {
        utterances: vec![UtteranceSlot {
            lane: speaker_lane(speaker),
            tokens: response,
            mask_content: false,
        }],
        cls_per_utterance: false,
    };
    assemble_segments(&[ctx, resp], max_seq_len)
}

/// `−Σ_i Σ_{j∈gold(i)} log m_ij` over every labeled utterance.
pub fn ar_loss(fwd: &mut Forward<'_>, g: &mut Graph, conv: &Conversation, max_seq_len: usize) -> Result<Option<Var>> {
    if conv.len() < 2 {
        return Ok(None);
    }
    let gold = ar_gold(conv);
    let (anchors, golds): (Vec<usize>, Vec<Vec<usize>>) =
        gold.into_iter().enumerate().filter_map(|(i, g)| g.map(|g| (i, g))).unzip();
    if anchors.is_empty() {
        return Err(MpcError::invalid(format!("conversation {} has no addressee labels", conv.id)));
    }
    let lanes = assemble_conversation(conv, &[], None, max_seq_len)?;
    let h = fwd.encode(g, &lanes)?;
    let ids = fwd.params.ids();
    let u = fwd.utterance_vectors(g, h, &lanes, &ids.rur)?;
    let logp = fwd.matching_log_probs(g, u, &anchors, ids.a_rur)?;
    Ok(Some(gold_nll(g, logp, conv.len(), &golds)?))
}

/// `−Σ_j y_Nj log m_Nj` with the ISS head; `None` when the last speaker has
/// no earlier utterance.
pub fn si_loss(fwd: &mut Forward<'_>, g: &mut Graph, conv: &Conversation, max_seq_len: usize) -> Result<Option<Var>> {
    let gold = si_gold(conv)?;
    if gold.is_empty() {
        return Ok(None);
    }
    let lanes = si_lanes(conv, max_seq_len)?;
    let h = fwd.encode(g, &lanes)?;
    let ids = fwd.params.ids();
    let u = fwd.utterance_vectors(g, h, &lanes, &ids.iss)?;
    let logp = fwd.matching_log_probs(g, u, &[conv.len() - 1], ids.a_iss)?;
    Ok(Some(gold_nll(g, logp, conv.len(), &[gold])?))
}

pub fn rs_logit(fwd: &mut Forward<'_>, g: &mut Graph, lanes: &InputLanes) -> Result<Var> {
    let h = fwd.encode(g, lanes)?;
    let head = &fwd.params.ids().rs;
    fwd.cls_logit(g, h, lanes, head)
}

/// Binary cross-entropy of one (context, response) pair.
pub fn rs_loss(fwd: &mut Forward<'_>, g: &mut Graph, lanes: &InputLanes, label: bool) -> Result<Var> {
    let z = rs_logit(fwd, g, lanes)?;
    fwd.binary_loss(g, z, label)
}

/// Splits a conversation into its context and final utterance.
pub fn split_response(conv: &Conversation) -> Result<(Conversation, &[u32], usize)> {
    let n = conv.len();
    if n < 2 {
        return Err(MpcError::invalid(format!("conversation {} has no context before its response", conv.id)));
    }
    let context = Conversation {
        id: conv.id.clone(),
        turns: conv.turns[..n - 1].to_vec(),
    };
    Ok((context, &conv.turns[n - 1].tokens, conv.speaker(n - 1)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CandidateSet {
    pub context: Conversation,
    /// Speaker of the true response.
    pub speaker: usize,
    pub candidates: Vec<Vec<u32>>,
    pub gold: usize,
}

/// One set per conversation with at least two turns: the true final
/// utterance plus n − 1 final utterances of distinct other conversations,
/// the gold at a seeded random position.
pub fn build_candidate_sets(convs: &[Conversation], n: usize, seed: u64) -> Result<Vec<CandidateSet>> {
    if n != 2 && n != 10 {
        return Err(MpcError::invalid(format!("candidate sets have 2 or 10 entries, not {n}")));
    }
    if convs.len() < n {
        return Err(MpcError::invalid(format!("{} conversations cannot supply {n} candidates", convs.len())));
    }
    let mut out = Vec::new();
    for (c, conv) in convs.iter().enumerate() {
        if conv.len() < 2 {
            continue;
        }
        let mut rng = substream(seed, "rs-candidates", &[c as u64, fnv1a(&conv.id)]);
        let (context, response, speaker) = split_response(conv)?;
        let mut others: Vec<usize> = index::sample(&mut rng, convs.len() - 1, n - 1)
            .into_iter()
            .map(|o| if o >= c { o + 1 } else { o })
            .collect();
        others.sort_unstable();
        let gold = rng.gen_range(0..n);
        let mut negatives = others.into_iter().map(|o| convs[o].turns.last().expect("nonempty").tokens.clone());
        let candidates = (0..n)
            .map(|k| if k == gold { response.to_vec() } else { negatives.next().expect("n - 1 negatives") })
            .collect();
        out.push(CandidateSet {
            context,
            speaker,
            candidates,
            gold,
        });
    }
    Ok(out)
}

/// Source of matching scores for the three downstream tasks.
pub trait Scorer {
    /// Row i holds scores over j < i (row 0 is empty).
    fn ar_scores(&self, conv: &Conversation) -> Result<Vec<Vec<f64>>>;
    /// Scores over j < N−1 for the last utterance.
    fn si_scores(&self, conv: &Conversation) -> Result<Vec<f64>>;
    fn rs_scores(&self, set: &CandidateSet) -> Result<Vec<f64>>;
}

pub struct ModelScorer<'a> {
    pub params: &'a EncoderParams,
    pub max_seq_len: usize,
}

impl ModelScorer<'_> {
    fn matching_rows(&self, lanes: &InputLanes, anchors: &[usize], iss: bool) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let mut fwd = Forward::new(&mut g, self.params);
        let h = fwd.encode(&mut g, lanes)?;
        let ids = self.params.ids();
        let (t, a) = if iss { (&ids.iss, ids.a_iss) } else { (&ids.rur, ids.a_rur) };
        let u = fwd.utterance_vectors(&mut g, h, lanes, t)?;
        let s = fwd.bilinear_scores(&mut g, u, anchors, a)?;
        let v = g.value(s);
        Ok(anchors.iter().enumerate().map(|(r, &i)| v.row(r)[..i].to_vec()).collect())
    }
}

impl Scorer for ModelScorer<'_> {
    fn ar_scores(&self, conv: &Conversation) -> Result<Vec<Vec<f64>>> {
        if conv.len() < 2 {
            return Ok(vec![Vec::new(); conv.len()]);
        }
        let lanes = assemble_conversation(conv, &[], None, self.max_seq_len)?;
        let anchors: Vec<usize> = (1..conv.len()).collect();
        let mut rows = vec![Vec::new()];
        rows.extend(self.matching_rows(&lanes, &anchors, false)?);
        Ok(rows)
    }

    fn si_scores(&self, conv: &Conversation) -> Result<Vec<f64>> {
        if conv.len() < 2 {
            return Err(MpcError::invalid("speaker identification needs at least two utterances"));
        }
        let lanes = si_lanes(conv, self.max_seq_len)?;
        Ok(self.matching_rows(&lanes, &[conv.len() - 1], true)?.remove(0))
    }

    fn rs_scores(&self, set: &CandidateSet) -> Result<Vec<f64>> {
        set.candidates
            .iter()
            .map(|cand| {
                let lanes = rs_lanes(&set.context, cand, set.speaker, self.max_seq_len)?;
                let mut g = Graph::new();
                let mut fwd = Forward::new(&mut g, self.params);
                let z = rs_logit(&mut fwd, &mut g, &lanes)?;
                Ok(crate::autodiff::sigmoid(g.value(z).item()))
            })
            .collect()
    }
}

/// Scores straight from the labels: the reply link for AR, the latest
/// same-speaker utterance for SI. Response selection has no label-only
/// oracle.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn ar_scores(&self, conv: &Conversation) -> Result<Vec<Vec<f64>>> {
        let links = conv.replies();
        Ok((0..conv.len())
            .map(|i| (0..i).map(|j| if links[i] == Some(j) { 1.0 } else { 0.0 }).collect())
            .collect())
    }

    fn si_scores(&self, conv: &Conversation) -> Result<Vec<f64>> {
        let gold = si_gold(conv)?;
        let last = gold.last().copied();
        Ok((0..conv.len() - 1).map(|j| if Some(j) == last { 1.0 } else { 0.0 }).collect())
    }

    fn rs_scores(&self, _set: &CandidateSet) -> Result<Vec<f64>> {
        Err(MpcError::invalid("the oracle scorer covers ar and si only"))
    }
}

/// Predicted addressee per utterance: the speaker of the best-matching
/// earlier utterance (`None` for the first).
pub fn ar_predict(scores: &[Vec<f64>], conv: &Conversation) -> Vec<Option<usize>> {
    scores.iter().map(|row| argmax_first(row).map(|j| conv.speaker(j))).collect()
}

pub fn si_predict(scores: &[f64], conv: &Conversation) -> Option<usize> {
    argmax_first(scores).map(|j| conv.speaker(j))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub task: Downstream,
    pub reports: Vec<MetricReport>,
    /// Reports per session length N.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub by_length: BTreeMap<usize, Vec<MetricReport>>,
}

impl EvalOutcome {
    pub fn get(&self, metric: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.metric == metric)
    }
}

pub fn windows(convs: &[Conversation], cfg: &SamplerConfig) -> Vec<Conversation> {
    convs.iter().map(|c| c.last_turns(cfg.max_utterances)).collect()
}

/// Correctness of every labeled utterance, per session.
fn ar_correctness(scorer: &dyn Scorer, conv: &Conversation) -> Result<Vec<bool>> {
    let pred = ar_predict(&scorer.ar_scores(conv)?, conv);
    Ok(conv
        .turns
        .iter()
        .zip(pred)
        .skip(1)
        .filter_map(|(t, p)| t.addressee.map(|a| p == Some(a)))
        .collect())
}

fn by_length<T>(
    items: &[(usize, T)],
    f: impl Fn(&[&T]) -> Result<Vec<MetricReport>>,
) -> Result<BTreeMap<usize, Vec<MetricReport>>> {
    let mut buckets: BTreeMap<usize, Vec<&T>> = BTreeMap::new();
    for (n, t) in items {
        buckets.entry(*n).or_default().push(t);
    }
    let mut out = BTreeMap::new();
    for (n, ts) in buckets {
        if let Ok(r) = f(&ts) {
            out.insert(n, r);
        }
    }
    Ok(out)
}

/// P@1 and session accuracy of addressee recognition on windowed
/// conversations.
pub fn evaluate_ar(scorer: &dyn Scorer, convs: &[Conversation], lengths: bool) -> Result<EvalOutcome> {
    let sessions: Vec<(usize, Vec<bool>)> = convs
        .iter()
        .map(|c| Ok((c.len(), ar_correctness(scorer, c)?)))
        .collect::<Result<_>>()?;
    let all: Vec<Vec<bool>> = sessions.iter().map(|s| s.1.clone()).collect();
    let reports = session_metrics(&all)?.to_vec();
    let by_length = if lengths {
        by_length(&sessions, |s| Ok(session_metrics(&s.iter().map(|v| (*v).clone()).collect::<Vec<_>>())?.to_vec()))?
    } else {
        BTreeMap::new()
    };
    Ok(EvalOutcome {
        task: Downstream::Ar,
        reports,
        by_length,
    })
}

/// P@1 of speaker identification of the last utterance. Instances whose
/// speaker never spoke before are counted (and are necessarily wrong).
pub fn evaluate_si(scorer: &dyn Scorer, convs: &[Conversation], lengths: bool) -> Result<EvalOutcome> {
    let mut items = Vec::new();
    for c in convs.iter().filter(|c| c.len() >= 2) {
        let pred = si_predict(&scorer.si_scores(c)?, c);
        items.push((c.len(), pred == Some(c.speaker(c.len() - 1))));
    }
    let reports = vec![precision_at_1(items.iter().map(|x| x.1))?];
    let by_length = if lengths {
        by_length(&items, |b| Ok(vec![precision_at_1(b.iter().map(|&&x| x))?]))?
    } else {
        BTreeMap::new()
    };
    Ok(EvalOutcome {
        task: Downstream::Si,
        reports,
        by_length,
    })
}

/// R_n@1 over prepared candidate sets.
pub fn evaluate_rs(scorer: &dyn Scorer, sets: &[CandidateSet], lengths: bool) -> Result<EvalOutcome> {
    let scored: Vec<(usize, (Vec<f64>, usize))> = sets
        .iter()
        .map(|s| Ok((s.context.len() + 1, (scorer.rs_scores(s)?, s.gold))))
        .collect::<Result<_>>()?;
    let plain: Vec<(Vec<f64>, usize)> = scored.iter().map(|x| x.1.clone()).collect();
    let reports = vec![recall_at_k(&plain, 1)?];
    let by_length = if lengths {
        by_length(&scored, |b| Ok(vec![recall_at_k(&b.iter().map(|&x| x.clone()).collect::<Vec<_>>(), 1)?]))?
    } else {
        BTreeMap::new()
    };
    Ok(EvalOutcome {
        task: Downstream::Rs,
        reports,
        by_length,
    })
}
