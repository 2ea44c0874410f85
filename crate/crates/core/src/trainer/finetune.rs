use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use super::adam::adam_step;
use super::config::TrainConfig;
use super::schedule::lr_at;
use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{Conversation, Vocabulary};
use crate::error::{MpcError, Result};
use crate::eval::{
    ar_gold, ar_loss, build_candidate_sets, evaluate_ar, evaluate_rs, evaluate_si, rs_lanes, rs_loss, si_gold,
    si_loss, split_response, Downstream, MetricReport, ModelScorer,
};
use crate::model::{Checkpoint, EncoderConfig, EncoderParams, Forward, OptimizerMoments};
use crate::seed::substream;

/// Where fine-tuning starts.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum FinetuneInit {
    Pretrained(Checkpoint),
    /// Fresh parameters drawn from `seed`.
    Random {
        encoder: EncoderConfig,
        vocab: Vocabulary,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct FinetuneJob<'a> {
    pub task: Downstream,
    pub train: &'a [Conversation],
    pub valid: &'a [Conversation],
    pub config: TrainConfig,
    /// Conversations are cut to their last `max_utterances` turns.
    pub max_utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: MetricReport,
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    /// Parameters of the best validation epoch.
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Validation score used for model selection: Acc for AR, P@1 for SI and
/// R_10@1 for RS (R_2@1 when fewer than ten validation conversations
/// exist).
pub fn selection_metric(params: &EncoderParams, task: Downstream, valid: &[Conversation], seed: u64) -> Result<MetricReport> {
    let scorer = ModelScorer {
        params,
        max_seq_len: params.config.max_seq_len,
    };
    let (out, name) = match task {
        Downstream::Ar => (evaluate_ar(&scorer, valid, false)?, "Acc"),
        Downstream::Si => (evaluate_si(&scorer, valid, false)?, "P@1"),
        Downstream::Rs => {
            let n = if valid.len() >= 10 { 10 } else { 2 };
            let sets = build_candidate_sets(valid, n, seed)?;
            (evaluate_rs(&scorer, &sets, false)?, if n == 10 { "R_10@1" } else { "R_2@1" })
        }
    };
    out.get(name)
        .cloned()
        .ok_or_else(|| MpcError::invalid(format!("evaluation produced no {name}")))
}

fn check_labels(task: Downstream, train: &[Conversation]) -> Result<Vec<usize>> {
    let mut usable = Vec::new();
    for (k, c) in train.iter().enumerate() {
        let ok = match task {
            Downstream::Ar => {
                if c.len() >= 2 && ar_gold(c).iter().all(Option::is_none) {
                    return Err(MpcError::invalid(format!("conversation {} has no addressee labels", c.id)));
                }
                c.len() >= 2
            }
            Downstream::Si => c.len() >= 2 && !si_gold(c)?.is_empty(),
            Downstream::Rs => c.len() >= 2,
        };
        if ok {
            usable.push(k);
        }
    }
    if usable.is_empty() {
        return Err(MpcError::invalid(format!("no training conversation is usable for {task}")));
    }
    if task == Downstream::Rs && train.len() < 2 {
        return Err(MpcError::invalid("response selection needs negatives from a second conversation"));
    }
    Ok(usable)
}

/// Loss of one training instance. RS pairs the true response (label 1)
/// with the final utterance of another random conversation (label 0).
fn instance_loss(
    fwd: &mut Forward<'_>,
    g: &mut Graph,
    task: Downstream,
    train: &[Conversation],
    k: usize,
    epoch: u64,
    seed: u64,
) -> Result<Option<Var>> {
    let conv = &train[k];
    let max_len = fwd.params.config.max_seq_len;
    match task {
        Downstream::Ar => ar_loss(fwd, g, conv, max_len),
        Downstream::Si => si_loss(fwd, g, conv, max_len),
        Downstream::Rs => {
            let (context, response, speaker) = split_response(conv)?;
            let mut rng = substream(seed, "rs-train", &[epoch, k as u64]);
            let mut other = rng.gen_range(0..train.len() - 1);
            if other >= k {
                other += 1;
            }
            let negative = &train[other].turns.last().expect("nonempty").tokens;
            let pos = rs_lanes(&context, response, speaker, max_len)?;
            let neg = rs_lanes(&context, negative, speaker, max_len)?;
            let lp = rs_loss(fwd, g, &pos, true)?;
            let ln = rs_loss(fwd, g, &neg, false)?;
            Ok(Some(g.add(lp, ln)?))
        }
    }
}

/// Optimizes the downstream loss of `job.task` over all parameters and
/// keeps the epoch with the best validation score (earliest on ties).
pub fn finetune(job: &FinetuneJob<'_>, init: FinetuneInit) -> Result<FinetuneRun> {
    let cfg = &job.config;
    cfg.validate()?;
    if job.max_utterances == 0 {
        return Err(MpcError::invalid("max_utterances must be positive"));
    }
    let (mut params, vocab) = match init {
        FinetuneInit::Pretrained(ck) => (ck.params, ck.vocab),
        FinetuneInit::Random { encoder, vocab, seed } => (EncoderParams::init(&encoder, seed)?, vocab),
    };
    if params.config.vocab_size != vocab.len() {
        return Err(MpcError::invalid("checkpoint vocabulary does not match its encoder"));
    }
    let train: Vec<Conversation> = job.train.iter().map(|c| c.last_turns(job.max_utterances)).collect();
    let valid: Vec<Conversation> = job.valid.iter().map(|c| c.last_turns(job.max_utterances)).collect();
    if valid.is_empty() {
        return Err(MpcError::invalid("validation set is empty"));
    }
    let usable = check_labels(job.task, &train)?;
    let per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total = cfg.total_steps(usable.len());
    let mut moments = OptimizerMoments::zeros_like(&params);

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, EncoderParams)> = None;
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let mut order = usable.clone();
        order.shuffle(&mut substream(cfg.seed, "finetune-shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch_size) {
            if step == total {
                break;
            }
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut used = 0;
            for &k in batch {
                let mut g = Graph::new();
                let mut fwd = Forward::new(&mut g, &params);
                let Some(l) = instance_loss(&mut fwd, &mut g, job.task, &train, k, epoch as u64, cfg.seed)? else {
                    continue;
                };
                loss_sum += g.value(l).item();
                count += 1;
                used += 1;
                let back = g.backward(l)?;
                for (p, acc) in grads.iter_mut().enumerate() {
                    if let Some(d) = back.get(fwd.bound[p]) {
                        acc.data_mut().iter_mut().zip(d).for_each(|(a, &x)| *a += x);
                    }
                }
            }
            if used > 0 {
                let inv = 1.0 / used as f64;
                grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= inv));
                let lr = lr_at(step, total, cfg)?;
                adam_step(params.tensors_mut(), &grads, &mut moments, lr, cfg)?;
            }
            step += 1;
        }
        let validation = selection_metric(&params, job.task, &valid, cfg.seed)?;
        let mean_loss = if count > 0 { loss_sum / count as f64 } else { 0.0 };
        info!(
            "{} epoch {}: loss {:.4}, {} {:.4}",
            job.task,
            epoch + 1,
            mean_loss,
            validation.metric,
            validation.value
        );
        if best.as_ref().is_none_or(|b| validation.value > b.1) {
            best = Some((epoch, validation.value, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            mean_loss,
            validation,
        });
        epoch += 1;
        debug_assert!(step == total || step % per_epoch == 0);
    }

    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    let mut checkpoint = Checkpoint::new(best_params, vocab);
    checkpoint.step = step as u64;
    checkpoint.meta = json!({
        "kind": "finetune",
        "task": job.task,
        "train": cfg,
        "max_utterances": job.max_utterances,
        "best_epoch": best_epoch,
    });
    Ok(FinetuneRun {
        checkpoint,
        best_epoch,
        history,
    })
}
