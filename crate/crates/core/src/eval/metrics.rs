use serde::{Deserialize, Serialize};

use crate::error::{MpcError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub numerator: usize,
    pub denominator: usize,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, numerator: usize, denominator: usize) -> Result<Self> {
        let metric = metric.into();
        if denominator == 0 {
            return Err(MpcError::invalid(format!("{metric}: nothing to evaluate")));
        }
        Ok(MetricReport {
            value: numerator as f64 / denominator as f64,
            metric,
            numerator,
            denominator,
        })
    }
}

/// Fraction of evaluated utterances whose top-1 prediction is correct.
pub fn precision_at_1(correct: impl IntoIterator<Item = bool>) -> Result<MetricReport> {
    let (mut hit, mut n) = (0, 0);
    for c in correct {
        n += 1;
        hit += c as usize;
    }
    MetricReport::new("P@1", hit, n)
}

/// P@1 over all utterances and the fraction of sessions with every
/// evaluated utterance right. Sessions without evaluated utterances are
/// ignored.
pub fn session_metrics(sessions: &[Vec<bool>]) -> Result<[MetricReport; 2]> {
    let p1 = precision_at_1(sessions.iter().flatten().copied())?;
    let counted: Vec<&Vec<bool>> = sessions.iter().filter(|s| !s.is_empty()).collect();
    let all_right = counted.iter().filter(|s| s.iter().all(|&c| c)).count();
    Ok([p1, MetricReport::new("Acc", all_right, counted.len())?])
}

/// Index of the highest score; ties go to the smallest index.
pub fn argmax_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// 0-based rank of candidate `gold`: candidates scoring higher, plus equal
/// scores at smaller indices, come first.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > g || (s == g && i < gold))
        .count()
}

/// R_n@k over candidate sets of equal size n.
pub fn recall_at_k(sets: &[(Vec<f64>, usize)], k: usize) -> Result<MetricReport> {
    let n = sets
        .first()
        .map(|s| s.0.len())
        .ok_or_else(|| MpcError::invalid("no candidate sets"))?;
    if let Some((s, _)) = sets.iter().find(|(s, g)| s.len() != n || *g >= s.len()) {
        return Err(MpcError::invalid(format!("candidate set of size {} in a run of size {n}", s.len())));
    }
    let hits = sets.iter().filter(|(s, g)| rank_of(s, *g) < k).count();
    MetricReport::new(format!("R_{n}@{k}"), hits, sets.len())
}
