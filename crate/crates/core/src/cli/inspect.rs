use std::fmt::Write;

use mpc_core::corpus::{Conversation, Vocabulary};
use mpc_core::sampling::{build_bundle, CorpusIndex, InputLanes, PretrainSample, SamplerConfig, Task, TaskTargets, MASK_SPEAKER};
use mpc_core::structure::{build_reply_graph, render_tree};
use mpc_core::Result;

pub fn tree(conv: &Conversation, vocab: &Vocabulary) -> String {
    let g = build_reply_graph(conv);
    format!("conversation {}\n{}", conv.id, render_tree(conv, &g, |i| vocab.decode(&conv.turns[i].tokens)))
}

fn lane_name(lane: usize) -> String {
    if lane == MASK_SPEAKER {
        "MASK".into()
    } else {
        format!("I.{lane}")
    }
}

fn lanes_table(l: &InputLanes, vocab: &Vocabulary) -> String {
    let mut out = String::from("  pos  seg  speaker  token\n");
    for p in 0..l.len() {
        let _ = writeln!(
            out,
            "  {:>3}  {:>3}  {:>7}  {}",
            l.position_ids[p],
            l.segment_ids[p],
            lane_name(l.speaker_ids[p]),
            vocab.token(l.token_ids[p])
        );
    }
    out
}

fn targets(t: &TaskTargets, vocab: &Vocabulary) -> String {
    let u = |i: usize| format!("U{}", i + 1);
    match t {
        TaskTargets::Rur(r) => {
            let items: Vec<String> = r.iter().map(|(i, j)| format!("{} -> {}", u(*i), u(*j))).collect();
            format!("rur: {}", items.join(", "))
        }
        TaskTargets::Iss(r) => {
            let items: Vec<String> = r
                .iter()
                .map(|(i, g)| format!("{} in {{{}}}", u(*i), g.iter().map(|&j| u(j)).collect::<Vec<_>>().join(" ")))
                .collect();
            format!("iss: {}", items.join(", "))
        }
        TaskTargets::Pcd(r) => {
            let p = |t: &mpc_core::structure::PointerTuple| {
                format!("{}->{} (I.{}->I.{})", u(t.i), u(t.i_prime), t.from_speaker + 1, t.to_speaker + 1)
            };
            let items: Vec<String> = r
                .iter()
                .map(|t| format!("anchor {} positive {} negative {}", p(&t.anchor), p(&t.positive), p(&t.negative)))
                .collect();
            format!("pcd: {}", items.join("; "))
        }
        TaskTargets::Msur {
            utterance, original, ..
        } => format!("msur: restore {} = {:?}", u(*utterance), vocab.decode(original)),
        TaskTargets::Snd(y) => format!("snd: same conversation = {y}"),
        TaskTargets::Mlm { positions, original } => {
            let items: Vec<String> = positions
                .iter()
                .zip(original)
                .map(|(p, &o)| format!("{p}={}", vocab.token(o)))
                .collect();
            format!("mlm: {}", items.join(" "))
        }
        TaskTargets::Nsp(y) => format!("nsp: next = {y}"),
    }
}

fn sample_text(s: &PretrainSample, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for t in &s.targets {
        let _ = writeln!(out, "{}", targets(t, vocab));
    }
    out + &lanes_table(&s.lanes, vocab)
}

/// Human-readable samples of `task` for corpus conversation `conv`.
pub fn samples(
    index: &CorpusIndex,
    conv: usize,
    task: Task,
    epoch: u64,
    cfg: &SamplerConfig,
    vocab: &Vocabulary,
) -> Result<String> {
    let b = build_bundle(index, conv, epoch, cfg)?;
    let sample = match task {
        Task::Rur | Task::Iss | Task::Pcd => b.structure.as_ref(),
        Task::Msur => b.msur.as_ref(),
        Task::Snd => b.snd.as_ref(),
        Task::Mlm => b.mlm.as_ref(),
        Task::Nsp => b.nsp.as_ref(),
    };
    let head = format!("{task} sample of {} (epoch {epoch})\n", index.windows[conv].id);
    Ok(match sample.filter(|_| b.targets(task).is_some()) {
        Some(s) => head + &sample_text(s, vocab),
        None => head + "  no sample: the conversation is not eligible\n",
    })
}
