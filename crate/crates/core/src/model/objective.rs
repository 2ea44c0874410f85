use std::collections::BTreeSet;

use super::encoder::Forward;
use super::heads::LossTerms;
use crate::autodiff::Graph;
use crate::error::Result;
use crate::sampling::{SampleBundle, Task, TaskTargets};

/// Loss terms of one conversation's pre-training bundle. Tasks in `drop`
/// contribute nothing; the samples themselves are untouched, so the other
/// terms are exactly what they would be without the ablation. RUR, ISS and
/// PCD share one encoding of the structure sample. Each sample gets its own
/// dropout stream.
pub fn pretrain_terms(fwd: &mut Forward<'_>, g: &mut Graph, bundle: &SampleBundle, drop: &BTreeSet<Task>) -> Result<LossTerms> {
    let mut terms = LossTerms::default();
    let keep = |t: Task| !drop.contains(&t);

    if let Some(s) = &bundle.structure {
        let wanted: Vec<&TaskTargets> = s
            .targets
            .iter()
            .filter(|t| match t {
                TaskTargets::Rur(_) => keep(Task::Rur),
                TaskTargets::Iss(_) => keep(Task::Iss),
                TaskTargets::Pcd(_) => keep(Task::Pcd),
                _ => false,
            })
            .collect();
        if !wanted.is_empty() {
            fwd.fork_dropout(1);
            let h = fwd.encode(g, &s.lanes)?;
            for t in wanted {
                match t {
                    TaskTargets::Rur(r) => terms.insert(Task::Rur, fwd.rur_loss(g, h, &s.lanes, r)?),
                    TaskTargets::Iss(r) => terms.insert(Task::Iss, fwd.iss_loss(g, h, &s.lanes, r)?),
                    TaskTargets::Pcd(r) => terms.insert(Task::Pcd, fwd.pcd_loss(g, h, &s.lanes, r)?),
                    _ => unreachable!("filtered above"),
                }
            }
        }
    }

    for (task, sample) in [(Task::Msur, &bundle.msur), (Task::Mlm, &bundle.mlm)] {
        let Some(s) = sample else { continue };
        if !keep(task) {
            continue;
        }
        let (positions, original) = match &s.targets[0] {
            TaskTargets::Msur { positions, original, .. } | TaskTargets::Mlm { positions, original } => {
                (positions, original)
            }
            _ => continue,
        };
        fwd.fork_dropout(2 + task as u64);
        let h = fwd.encode(g, &s.lanes)?;
        terms.insert(task, fwd.restoration_loss(g, h, positions, original, task)?);
    }

    let ids = fwd.params.ids();
    for (task, sample, head) in [(Task::Snd, &bundle.snd, &ids.snd), (Task::Nsp, &bundle.nsp, &ids.nsp)] {
        let Some(s) = sample else { continue };
        if !keep(task) {
            continue;
        }
        let label = match s.targets[0] {
            TaskTargets::Snd(y) | TaskTargets::Nsp(y) => y,
            _ => continue,
        };
        fwd.fork_dropout(2 + task as u64);
        let h = fwd.encode(g, &s.lanes)?;
        let z = fwd.cls_logit(g, h, &s.lanes, head)?;
        terms.insert(task, Some(fwd.binary_loss(g, z, label)?));
    }
    Ok(terms)
}
