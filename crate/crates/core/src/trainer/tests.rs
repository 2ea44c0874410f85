use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;
use crate::corpus::fixtures::chain;
use crate::corpus::{generate_synthetic, Conversation, SyntheticSpec, Vocabulary};
use crate::eval::Downstream;
use crate::model::{Checkpoint, EncoderConfig, OptimizerMoments};
use crate::sampling::{SamplerConfig, Task};

fn cfg(lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        ..TrainConfig::pretrain_default()
    }
}

#[test]
fn schedule_endpoints() {
    let c = cfg(1e-3);
    assert_eq!(lr_at(0, 100, &c).unwrap(), 0.0);
    assert_eq!(lr_at(10, 100, &c).unwrap(), 1e-3);
    assert_eq!(lr_at(100, 100, &c).unwrap(), 0.0);
    assert!((lr_at(5, 100, &c).unwrap() - 5e-4).abs() < 1e-18);
    assert!((lr_at(55, 100, &c).unwrap() - 5e-4).abs() < 1e-18);
    assert!(lr_at(0, 0, &c).is_err());
    assert!(lr_at(101, 100, &c).is_err());
    let flat = TrainConfig {
        decay: Decay::Constant,
        ..c
    };
    assert_eq!(lr_at(80, 100, &flat).unwrap(), 1e-3);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::pretrain_default().validate().is_ok());
    assert_eq!(TrainConfig::finetune_default(true).epochs, 5);
    assert_eq!(TrainConfig::finetune_default(false).lr, 2e-5);
    for bad in [
        TrainConfig { lr: 0.0, ..cfg(1.0) },
        TrainConfig { warmup_proportion: 1.0, ..cfg(1.0) },
        TrainConfig { batch_size: 0, ..cfg(1.0) },
        TrainConfig { clip_norm: Some(0.0), ..cfg(1.0) },
    ] {
        assert!(bad.validate().is_err());
    }
    assert_eq!(TrainConfig { max_steps: Some(7), ..cfg(1.0) }.total_steps(100), 7);
    assert_eq!(cfg(1.0).total_steps(9), 30);
}

fn scalar_params(x: f64) -> (Vec<Tensor>, OptimizerMoments) {
    (
        vec![Tensor::scalar(x)],
        OptimizerMoments {
            t: 0,
            m: vec![Tensor::scalar(0.0)],
            v: vec![Tensor::scalar(0.0)],
        },
    )
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let (mut p, mut m) = scalar_params(0.7);
    adam_step(&mut p, &[Tensor::scalar(0.0)], &mut m, 1e-2, &cfg(1e-2)).unwrap();
    assert_eq!(p[0].item(), 0.7);
}

#[test]
fn adam_matches_hand_recursion() {
    let c = TrainConfig { clip_norm: None, ..cfg(0.1) };
    let (mut p, mut m) = scalar_params(0.0);
    adam_step(&mut p, &[Tensor::scalar(1.0)], &mut m, 0.1, &c).unwrap();
    assert!((p[0].item() + 0.1).abs() < 1e-8);

    // Hand recursion for g = 2, −1, 0.5.
    let (mut p, mut mo) = scalar_params(1.0);
    let (mut w, mut m1, mut v1) = (1.0f64, 0.0f64, 0.0f64);
    for (t, g) in [2.0f64, -1.0, 0.5].into_iter().enumerate() {
        adam_step(&mut p, &[Tensor::scalar(g)], &mut mo, 0.05, &c).unwrap();
        m1 = 0.9 * m1 + 0.1 * g;
        v1 = 0.999 * v1 + 0.001 * g * g;
        let k = t as i32 + 1;
        w -= 0.05 * (m1 / (1.0 - 0.9f64.powi(k))) / ((v1 / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        assert!((p[0].item() - w).abs() < 1e-15);
    }
    assert_eq!(mo.t, 3);
}

#[test]
fn clipping_saturates() {
    let c = cfg(0.1);
    let run = |scale: f64| {
        let mut p = vec![Tensor::vector(vec![0.5, -0.5])];
        let mut m = OptimizerMoments {
            t: 0,
            m: vec![Tensor::zeros(&[2])],
            v: vec![Tensor::zeros(&[2])],
        };
        let out = adam_step(&mut p, &[Tensor::vector(vec![3.0 * scale, 4.0 * scale])], &mut m, 0.1, &c).unwrap();
        (p, m, out)
    };
    let (p10, m10, o10) = run(10.0);
    let (p100, m100, _) = run(100.0);
    assert_eq!(p10, p100);
    assert_eq!(m10, m100);
    assert_eq!(o10, StepOutcome::Applied { grad_norm: 50.0 });
}

#[test]
fn non_finite_gradient_skips() {
    let (mut p, mut m) = scalar_params(0.3);
    let out = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut m, 0.1, &cfg(0.1)).unwrap();
    assert_eq!(out, StepOutcome::Skipped);
    assert_eq!((p[0].item(), m.t), (0.3, 0));
    assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut m, 0.1, &cfg(0.1)).is_err());
}

fn tiny_setup(n: usize) -> (Vec<Conversation>, Vocabulary, EncoderConfig) {
    let spec = SyntheticSpec {
        num_conversations: n,
        turns: [3, 6],
        vocab_size: 96,
        ..Default::default()
    };
    let enc = EncoderConfig {
        d: 16,
        layers: 1,
        heads: 2,
        d_ff: 32,
        vocab_size: 96,
        max_seq_len: 96,
        max_interlocutors: 4,
        ..Default::default()
    };
    (generate_synthetic(&spec).unwrap(), spec.vocabulary(), enc)
}

fn job<'a>(corpus: &'a [Conversation], vocab: &'a Vocabulary, enc: &EncoderConfig, drop: &[Task]) -> PretrainJob<'a> {
    PretrainJob {
        corpus,
        vocab,
        encoder: enc.clone(),
        sampler: SamplerConfig {
            max_seq_len: 96,
            ..Default::default()
        },
        train: TrainConfig {
            lr: 1e-3,
            max_steps: Some(6),
            batch_size: 3,
            ..TrainConfig::pretrain_default()
        },
        drop: drop.iter().copied().collect(),
    }
}

#[test]
fn pretraining_is_deterministic_and_resumable() {
    let (corpus, vocab, enc) = tiny_setup(8);
    let j = job(&corpus, &vocab, &enc, &[]);
    let a = pretrain(&j, None).unwrap();
    let b = pretrain(&j, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log.len(), 6);
    assert!(a.log.iter().all(|r| (r.total - r.terms.values().sum::<f64>()).abs() < 1e-12));
    assert!(a.log[0].terms.contains_key(&Task::Rur) && a.log[0].terms.contains_key(&Task::Mlm));

    let half = pretrain_until(&j, None, Some(3)).unwrap();
    assert_eq!(half.log[..], a.log[..3]);
    let reloaded = Checkpoint::from_bytes(&half.checkpoint.to_bytes().unwrap()).unwrap();
    let rest = pretrain(&j, Some(reloaded)).unwrap();
    assert_eq!(rest.log[..], a.log[3..]);
    assert_eq!(rest.checkpoint.params.tensors(), a.checkpoint.params.tensors());

    let other = job(&corpus, &vocab, &enc, &[Task::Nsp]);
    assert!(pretrain(&other, Some(half.checkpoint)).is_err());
}

#[test]
fn dropping_a_task_removes_only_its_term() {
    let (corpus, vocab, enc) = tiny_setup(8);
    let full = pretrain_until(&job(&corpus, &vocab, &enc, &[]), None, Some(1)).unwrap();
    let ablated = pretrain_until(&job(&corpus, &vocab, &enc, &[Task::Rur]), None, Some(1)).unwrap();
    let mut want = full.log[0].terms.clone();
    want.remove(&Task::Rur);
    assert_eq!(ablated.log[0].terms, want);
    assert!(pretrain(&job(&corpus, &vocab, &enc, &Task::ALL), None).is_err());
}

#[test]
fn multi_task_gradient_is_the_sum_of_single_task_gradients() {
    let (corpus, vocab, enc) = tiny_setup(6);
    let j = job(&corpus, &vocab, &enc, &[]);
    let params = crate::model::EncoderParams::init(&enc, 3).unwrap();
    let index = crate::sampling::CorpusIndex::new(&corpus, &j.sampler, vocab.len());
    let convs = [0, 1, 2];
    let all = batch_gradient(&j, &params, &index, &convs, 0, 0).unwrap();
    let mut sum: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for task in Task::ALL {
        let only: BTreeSet<Task> = Task::ALL.into_iter().filter(|&t| t != task).collect();
        let one = batch_gradient(&PretrainJob { drop: only, ..j.clone() }, &params, &index, &convs, 0, 0).unwrap();
        // Rescale from the single task's contributing count to the full one.
        let w = one.used as f64 / all.used as f64;
        for (s, g) in sum.iter_mut().zip(&one.grads) {
            s.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += w * b);
        }
    }
    for (s, g) in sum.iter().zip(&all.grads) {
        for (a, b) in s.data().iter().zip(g.data()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn finetune_rejects_missing_labels_and_learns_chains() {
    let (_, vocab, enc) = tiny_setup(1);
    let mut unlabeled = chain(4);
    for t in &mut unlabeled.turns {
        t.addressee = None;
        t.reply_to = None;
    }
    let conf = TrainConfig {
        lr: 3e-3,
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::finetune_default(false)
    };
    let random = FinetuneInit::Random {
        encoder: enc.clone(),
        vocab: vocab.clone(),
        seed: 1,
    };
    let bad = [unlabeled];
    let j = FinetuneJob {
        task: Downstream::Ar,
        train: &bad,
        valid: &bad,
        config: conf.clone(),
        max_utterances: 7,
    };
    assert!(finetune(&j, random.clone()).is_err());

    // On chains every utterance addresses the previous speaker, which the
    // position lanes alone reveal.
    let chains: Vec<Conversation> = (3..9).flat_map(|n| [chain(n), chain(n)]).collect();
    let j = FinetuneJob {
        task: Downstream::Ar,
        train: &chains,
        valid: &chains,
        config: TrainConfig { epochs: 8, ..conf },
        max_utterances: 7,
    };
    let run = finetune(&j, random).unwrap();
    assert_eq!(run.history.len(), 8);
    let best = &run.history[run.best_epoch];
    assert!(run.history.iter().all(|h| h.validation.value <= best.validation.value));
    assert!(run.history[..run.best_epoch].iter().all(|h| h.validation.value < best.validation.value));
    let p1 = selection_metric(&run.checkpoint.params, Downstream::Ar, &chains, 0).unwrap();
    assert_eq!(p1.value, best.validation.value);
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_piecewise_linear(total in 1usize..400, p in 0.0f64..0.9, lr in 1e-6f64..1.0) {
        let c = TrainConfig { lr, warmup_proportion: p, ..TrainConfig::pretrain_default() };
        let xs: Vec<f64> = (0..=total).map(|s| lr_at(s, total, &c).unwrap()).collect();
        let top = xs.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(top <= lr * (1.0 + 1e-12));
        let w = p * total as f64;
        // The peak sits at the first step at or beyond the warmup end.
        let peak = w.ceil() as usize;
        if (peak as f64 - w).abs() < 1e-9 && peak <= total {
            prop_assert!((xs[peak] - lr).abs() <= lr * 1e-9);
        }
        // Consecutive differences change only at the warmup boundary.
        let slopes: Vec<f64> = xs.windows(2).map(|x| x[1] - x[0]).collect();
        for (s, d) in slopes.windows(2).enumerate() {
            let crosses = (s as f64) < w + 1.0 && (s as f64 + 2.0) > w;
            if !crosses {
                prop_assert!((d[0] - d[1]).abs() <= lr * 1e-9);
            }
        }
    }
}
