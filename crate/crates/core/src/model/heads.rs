//! Task heads and their losses. Utterance vectors are CLS outputs passed
//! through the head's own transform.

use std::collections::BTreeMap;

use super::encoder::Forward;
use super::params::{ClassifierIds, TransformIds};
use crate::autodiff::{Graph, Var};
use crate::error::{MpcError, Result};
use crate::sampling::{InputLanes, PcdTriple, Task, MASK_SPEAKER};

/// Mask over `[anchors, n]` admitting only j < i in row i.
pub fn preceding_mask(anchors: &[usize], n: usize) -> Result<Vec<bool>> {
    if let Some(&i) = anchors.iter().find(|&&i| i == 0 || i >= n) {
        return Err(MpcError::invalid(format!("anchor {i} has no preceding utterance among {n}")));
    }
    Ok(anchors.iter().flat_map(|&i| (0..n).map(move |j| j < i)).collect())
}

/// Per-anchor loss `−Σ_{j∈gold} log m_ij` from log-probabilities `[k, n]`.
pub fn gold_nll(g: &mut Graph, logp: Var, n: usize, gold: &[Vec<usize>]) -> Result<Var> {
    let flat: Vec<usize> = gold
        .iter()
        .enumerate()
        .flat_map(|(r, js)| js.iter().map(move |&j| r * n + j))
        .collect();
    let picked = g.pick(logp, &flat)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

fn check_gold(anchors: &[usize], gold: &[Vec<usize>]) -> Result<()> {
    for (&i, js) in anchors.iter().zip(gold) {
        if js.is_empty() || js.iter().any(|&j| j >= i) {
            return Err(MpcError::invalid(format!("anchor {i}: gold {js:?} must be nonempty and precede it")));
        }
    }
    Ok(())
}

impl Forward<'_> {
    /// Transformed CLS vectors of every utterance, `[n, d]`.
    pub fn utterance_vectors(&self, g: &mut Graph, h: Var, lanes: &InputLanes, t: &TransformIds) -> Result<Var> {
        self.rows_through(g, h, &lanes.cls_positions, t)
    }

    /// Raw bilinear scores `u_iᵀ A u_j`, `[anchors, n]`.
    pub fn bilinear_scores(&self, g: &mut Graph, u: Var, anchors: &[usize], a: usize) -> Result<Var> {
        let ua = g.gather_rows(u, anchors)?;
        let ua = g.matmul(ua, self.var(a))?;
        g.matmul_nt(ua, u)
    }

    /// Log of the matching distribution over j < i for each anchor.
    pub fn matching_log_probs(&self, g: &mut Graph, u: Var, anchors: &[usize], a: usize) -> Result<Var> {
        let n = g.shape(u)[0];
        let mask = preceding_mask(anchors, n)?;
        let s = self.bilinear_scores(g, u, anchors, a)?;
        g.masked_log_softmax(s, &mask)
    }

    /// The matching distribution itself (zeros at j ≥ i).
    pub fn matching_probs(&self, g: &mut Graph, u: Var, anchors: &[usize], a: usize) -> Result<Var> {
        let n = g.shape(u)[0];
        let mask = preceding_mask(anchors, n)?;
        let s = self.bilinear_scores(g, u, anchors, a)?;
        g.masked_softmax(s, &mask)
    }

    /// Cross-entropy against one gold parent per anchor, averaged over
    /// anchors.
    pub fn rur_loss(&self, g: &mut Graph, h: Var, lanes: &InputLanes, targets: &[(usize, usize)]) -> Result<Option<Var>> {
        if targets.is_empty() {
            return Ok(None);
        }
        let ids = self.params.ids();
        let u = self.utterance_vectors(g, h, lanes, &ids.rur)?;
        let anchors: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let gold: Vec<Vec<usize>> = targets.iter().map(|t| vec![t.1]).collect();
        check_gold(&anchors, &gold)?;
        let logp = self.matching_log_probs(g, u, &anchors, ids.a_rur)?;
        let n = g.shape(u)[0];
        let l = gold_nll(g, logp, n, &gold)?;
        Ok(Some(g.scale(l, 1.0 / anchors.len() as f64)))
    }

    /// Multi-positive cross-entropy, unnormalized over each gold set and
    /// averaged over anchors. Every anchor's speaker lane must be masked.
    pub fn iss_loss(&self, g: &mut Graph, h: Var, lanes: &InputLanes, targets: &[(usize, Vec<usize>)]) -> Result<Option<Var>> {
        if targets.is_empty() {
            return Ok(None);
        }
        for (i, _) in targets {
            let cls = *lanes
                .cls_positions
                .get(*i)
                .ok_or_else(|| MpcError::invalid(format!("anchor {i} beyond the input")))?;
            if lanes.speaker_ids[cls] != MASK_SPEAKER {
                return Err(MpcError::invalid(format!("speaker of anchor {i} is visible to its own search")));
            }
        }
        let ids = self.params.ids();
        let u = self.utterance_vectors(g, h, lanes, &ids.iss)?;
        let anchors: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let gold: Vec<Vec<usize>> = targets.iter().map(|t| t.1.clone()).collect();
        check_gold(&anchors, &gold)?;
        let logp = self.matching_log_probs(g, u, &anchors, ids.a_iss)?;
        let n = g.shape(u)[0];
        let l = gold_nll(g, logp, n, &gold)?;
        Ok(Some(g.scale(l, 1.0 / anchors.len() as f64)))
    }

    /// Pointer representations `ReLU([u_i − u_i' ; u_i ⊙ u_i'] W + b)` for
    /// each (i, i') pair, `[k, d]`.
    pub fn pointer_reps(&self, g: &mut Graph, u: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let ids = self.params.ids();
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let ua = g.gather_rows(u, &a)?;
        let ub = g.gather_rows(u, &b)?;
        let diff = g.sub(ua, ub)?;
        let prod = g.mul(ua, ub)?;
        let p = g.concat(&[diff, prod])?;
        let z = self.dense(g, p, ids.w_pcd, ids.b_pcd)?;
        Ok(g.relu(z))
    }

    /// `sigmoid(p_rowᵀ A q_row)` per row, `[k]`.
    pub fn pointer_similarity(&self, g: &mut Graph, p: Var, q: Var) -> Result<Var> {
        let pa = g.matmul(p, self.var(self.params.ids().a_pcd))?;
        let pq = g.mul(pa, q)?;
        let s = g.sum_last_axis(pq);
        Ok(g.sigmoid(s))
    }

    /// Margin hinge `max(0, Δ − m_ij + m_ik)`, averaged over triples.
    pub fn pcd_loss(&self, g: &mut Graph, h: Var, lanes: &InputLanes, triples: &[PcdTriple]) -> Result<Option<Var>> {
        if triples.is_empty() {
            return Ok(None);
        }
        let u = self.utterance_vectors(g, h, lanes, &self.params.ids().pcd)?;
        let part = |f: fn(&PcdTriple) -> (usize, usize)| triples.iter().map(f).collect::<Vec<_>>();
        let anchor = self.pointer_reps(g, u, &part(|t| (t.anchor.i, t.anchor.i_prime)))?;
        let pos = self.pointer_reps(g, u, &part(|t| (t.positive.i, t.positive.i_prime)))?;
        let neg = self.pointer_reps(g, u, &part(|t| (t.negative.i, t.negative.i_prime)))?;
        let m_pos = self.pointer_similarity(g, anchor, pos)?;
        let m_neg = self.pointer_similarity(g, anchor, neg)?;
        Ok(Some(self.margin_hinge(g, m_pos, m_neg)?))
    }

    pub fn margin_hinge(&self, g: &mut Graph, m_pos: Var, m_neg: Var) -> Result<Var> {
        let d = g.sub(m_neg, m_pos)?;
        let d = g.add_scalar(d, self.params.config.pcd_margin);
        let r = g.relu(d);
        Ok(g.mean(r))
    }

    /// Logits over the vocabulary with the tied token table, `[k, V]`.
    pub fn vocab_logits(&self, g: &mut Graph, h: Var, positions: &[usize], t: &TransformIds, bias: usize) -> Result<Var> {
        let x = self.rows_through(g, h, positions, t)?;
        let z = g.matmul_nt(x, self.var(self.params.ids().tok))?;
        g.add_row(z, self.var(bias))
    }

    /// Mean NLL of the original tokens at `positions`.
    pub fn restoration_loss(&self, g: &mut Graph, h: Var, positions: &[usize], original: &[u32], task: Task) -> Result<Option<Var>> {
        if positions.is_empty() {
            return Ok(None);
        }
        if positions.len() != original.len() {
            return Err(MpcError::invalid("restoration targets misaligned"));
        }
        let ids = self.params.ids();
        let (t, b) = match task {
            Task::Msur => (&ids.msur, ids.b_msur),
            Task::Mlm => (&ids.mlm, ids.b_mlm),
            other => return Err(MpcError::invalid(format!("{other} is not a restoration task"))),
        };
        let z = self.vocab_logits(g, h, positions, t, b)?;
        let targets: Vec<usize> = original.iter().map(|&o| o as usize).collect();
        Ok(Some(g.cross_entropy(z, &targets)?))
    }

    /// Pre-sigmoid score of the leading CLS, `[1, 1]`.
    pub fn cls_logit(&self, g: &mut Graph, h: Var, lanes: &InputLanes, c: &ClassifierIds) -> Result<Var> {
        let first = *lanes
            .cls_positions
            .first()
            .ok_or_else(|| MpcError::invalid("input has no CLS"))?;
        let x = self.rows_through(g, h, &[first], &c.transform)?;
        self.dense(g, x, c.w, c.b)
    }

    pub fn binary_loss(&self, g: &mut Graph, logit: Var, label: bool) -> Result<Var> {
        let l = g.bce_with_logits(logit, &[if label { 1.0 } else { 0.0 }])?;
        Ok(g.sum(l))
    }
}

/// Per-task scalar losses of one step; absent tasks are simply missing.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub terms: BTreeMap<Task, Var>,
}

impl LossTerms {
    pub fn insert(&mut self, task: Task, v: Option<Var>) {
        if let Some(v) = v {
            self.terms.insert(task, v);
        }
    }

    pub fn values(&self, g: &Graph) -> BTreeMap<Task, f64> {
        self.terms.iter().map(|(&t, &v)| (t, g.value(v).item())).collect()
    }
}

/// Unweighted sum of the present terms.
pub fn total_loss(g: &mut Graph, terms: &LossTerms) -> Result<Var> {
    let mut it = terms.terms.values().copied();
    let first = it.next().ok_or_else(|| MpcError::invalid("no loss component is present"))?;
    it.try_fold(first, |acc, v| g.add(acc, v))
}

/// Sum of scalar loss values with the same absent-component rule.
pub fn total_loss_value(values: &BTreeMap<Task, f64>) -> Result<f64> {
    if values.is_empty() {
        return Err(MpcError::invalid("no loss component is present"));
    }
    Ok(values.values().sum())
}
