use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::Serialize;
use serde_json::json;

use super::adam::{adam_step, StepOutcome};
use super::config::TrainConfig;
use super::schedule::lr_at;
use crate::autodiff::{Graph, Tensor};
use crate::corpus::{Conversation, Vocabulary};
use crate::error::{MpcError, Result};
use crate::model::{pretrain_terms, total_loss, Checkpoint, EncoderConfig, EncoderParams, Forward, OptimizerMoments};
use crate::eval::{argmax_first, MetricReport};
use crate::sampling::{build_bundle, CorpusIndex, SamplerConfig, Task, TaskTargets};
use crate::seed::{derive_seed, substream};

/// Everything a pre-training run depends on.
#[derive(Clone, Debug)]
pub struct PretrainJob<'a> {
    pub corpus: &'a [Conversation],
    pub vocab: &'a Vocabulary,
    pub encoder: EncoderConfig,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    /// Tasks left out of the loss sum.
    pub drop: BTreeSet<Task>,
}

impl PretrainJob<'_> {
    /// Configuration snapshot stored in checkpoints; a resumed run must
    /// match it.
    pub fn meta(&self) -> serde_json::Value {
        json!({
            "kind": "pretrain",
            "sampler": self.sampler,
            "train": self.train,
            "drop": self.drop,
            "conversations": self.corpus.len(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.corpus.is_empty() {
            return Err(MpcError::invalid("pre-training corpus is empty"));
        }
        if self.encoder.vocab_size != self.vocab.len() {
            return Err(MpcError::invalid(format!(
                "encoder vocab_size {} but the vocabulary has {} entries",
                self.encoder.vocab_size,
                self.vocab.len()
            )));
        }
        if self.drop.len() == Task::ALL.len() {
            return Err(MpcError::invalid("every task is dropped"));
        }
        self.encoder.validate()?;
        self.sampler.validate()?;
        self.train.validate()
    }
}

/// Losses of one optimizer step. Each term is summed over the batch and
/// divided by the number of contributing conversations, so `total` is the
/// sum of `terms`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub terms: BTreeMap<Task, f64>,
    /// Conversations that contributed at least one term.
    pub used: usize,
    pub grad_norm: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    /// Conversations that yielded no task at all.
    pub skipped: usize,
}

/// Gradient of the mean per-conversation loss over a batch, with the
/// batch's loss terms. All zeros when no conversation yields a term.
pub struct BatchGradient {
    pub grads: Vec<Tensor>,
    pub terms: BTreeMap<Task, f64>,
    pub used: usize,
    pub skipped: usize,
}

pub fn batch_gradient(
    job: &PretrainJob<'_>,
    params: &EncoderParams,
    index: &CorpusIndex,
    convs: &[usize],
    epoch: u64,
    step: u64,
) -> Result<BatchGradient> {
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut terms: BTreeMap<Task, f64> = BTreeMap::new();
    let (mut used, mut skipped) = (0, 0);
    let dropout = params.config.dropout > 0.0;
    for &c in convs {
        let bundle = build_bundle(index, c, epoch, &job.sampler)?;
        let mut g = if dropout { Graph::training() } else { Graph::new() };
        let mut fwd = Forward::new(&mut g, params);
        if dropout {
            fwd = fwd.with_dropout(derive_seed(job.train.seed, "dropout", &[step, c as u64]));
        }
        let t = pretrain_terms(&mut fwd, &mut g, &bundle, &job.drop)?;
        if t.terms.is_empty() {
            skipped += 1;
            continue;
        }
        used += 1;
        let total = total_loss(&mut g, &t)?;
        for (task, v) in t.values(&g) {
            *terms.entry(task).or_default() += v;
        }
        let back = g.backward(total)?;
        for (k, acc) in grads.iter_mut().enumerate() {
            if let Some(d) = back.get(fwd.bound[k]) {
                for (a, &x) in acc.data_mut().iter_mut().zip(d) {
                    *a += x;
                }
            }
        }
    }
    if used > 0 {
        let inv = 1.0 / used as f64;
        for t in &mut grads {
            t.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        terms.values_mut().for_each(|v| *v *= inv);
    }
    Ok(BatchGradient {
        grads,
        terms,
        used,
        skipped,
    })
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, "shuffle", &[epoch]));
    order
}

/// Multi-task pre-training: every step builds all task samples for a batch
/// of conversations and minimizes the unweighted sum of the present terms.
/// `resume` continues a checkpoint written by the same job.
pub fn pretrain(job: &PretrainJob<'_>, resume: Option<Checkpoint>) -> Result<PretrainRun> {
    pretrain_until(job, resume, None)
}

/// [`pretrain`] that stops after optimizer step `until` of the full
/// schedule; the checkpoint then resumes from there.
pub fn pretrain_until(job: &PretrainJob<'_>, resume: Option<Checkpoint>, until: Option<usize>) -> Result<PretrainRun> {
    job.validate()?;
    let meta = job.meta();
    let index = CorpusIndex::new(job.corpus, &job.sampler, job.vocab.len());
    let n = index.len();
    let per_epoch = n.div_ceil(job.train.batch_size);
    let total = job.train.total_steps(n);

    let (mut params, mut moments, start) = match resume {
        Some(ck) => {
            if ck.meta != meta || ck.params.config != job.encoder {
                return Err(MpcError::Checkpoint("resumed checkpoint was written by a different job".into()));
            }
            let moments = ck.moments.ok_or_else(|| MpcError::Checkpoint("no optimizer state to resume".into()))?;
            (ck.params, moments, ck.step as usize)
        }
        None => {
            let p = EncoderParams::init(&job.encoder, job.train.seed)?;
            let m = OptimizerMoments::zeros_like(&p);
            (p, m, 0)
        }
    };
    let end = until.unwrap_or(total);
    if start > end || end > total {
        return Err(MpcError::invalid(format!("cannot run steps {start}..{end} of a {total}-step schedule")));
    }

    let mut log = Vec::with_capacity(end - start);
    let mut skipped = 0;
    let mut order = (usize::MAX, Vec::new());
    let mut epoch_sums: BTreeMap<Task, (f64, usize)> = BTreeMap::new();
    for step in start..end {
        let epoch = step / per_epoch;
        if order.0 != epoch {
            order = (epoch, epoch_order(n, job.train.seed, epoch as u64));
        }
        let b = step % per_epoch;
        let batch = &order.1[b * job.train.batch_size..((b + 1) * job.train.batch_size).min(n)];
        let lr = lr_at(step, total, &job.train)?;

        let bg = batch_gradient(job, &params, &index, batch, epoch as u64, step as u64)?;
        skipped += bg.skipped;
        let grad_norm = if bg.used == 0 {
            warn!("step {step}: no conversation in the batch yields a task");
            None
        } else {
            match adam_step(params.tensors_mut(), &bg.grads, &mut moments, lr, &job.train)? {
                StepOutcome::Applied { grad_norm } => Some(grad_norm),
                StepOutcome::Skipped => None,
            }
        };
        let rec = StepRecord {
            step: step + 1,
            epoch,
            lr,
            total: bg.terms.values().sum(),
            terms: bg.terms,
            used: bg.used,
            grad_norm,
        };
        debug!("step {} loss {:.4}", rec.step, rec.total);
        for (&t, &v) in &rec.terms {
            let e = epoch_sums.entry(t).or_default();
            e.0 += v;
            e.1 += 1;
        }
        let epoch_done = (step + 1) % per_epoch == 0 || step + 1 == end;
        if epoch_done {
            let means: Vec<String> = epoch_sums
                .iter()
                .map(|(t, (s, k))| format!("{t}={:.4}", s / *k as f64))
                .collect();
            info!("epoch {} done at step {}: {}", epoch + 1, step + 1, means.join(" "));
            epoch_sums.clear();
        }
        log.push(rec);
    }
    if skipped > 0 {
        info!("{skipped} conversation visits yielded no task");
    }

    let mut checkpoint = Checkpoint::new(params, job.vocab.clone());
    checkpoint.moments = Some(moments);
    checkpoint.step = end as u64;
    checkpoint.meta = meta;
    Ok(PretrainRun {
        checkpoint,
        log,
        skipped,
    })
}

/// Top-1 accuracy of the MLM head on the masked positions drawn for
/// `epoch` across the whole corpus.
pub fn mlm_top1(params: &EncoderParams, index: &CorpusIndex, sampler: &SamplerConfig, epoch: u64) -> Result<MetricReport> {
    let (mut hit, mut n) = (0, 0);
    for c in 0..index.len() {
        let bundle = build_bundle(index, c, epoch, sampler)?;
        let Some(s) = &bundle.mlm else { continue };
        let TaskTargets::Mlm { positions, original } = &s.targets[0] else { continue };
        let mut g = Graph::new();
        let mut fwd = Forward::new(&mut g, params);
        let h = fwd.encode(&mut g, &s.lanes)?;
        let ids = params.ids();
        let z = fwd.vocab_logits(&mut g, h, positions, &ids.mlm, ids.b_mlm)?;
        let z = g.value(z);
        for (r, &o) in original.iter().enumerate() {
            n += 1;
            hit += (argmax_first(z.row(r)) == Some(o as usize)) as usize;
        }
    }
    MetricReport::new("MLM@1", hit, n)
}
