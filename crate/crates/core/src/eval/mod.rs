//! Downstream objectives, prediction rules and metrics.

mod downstream;
mod metrics;

pub use downstream::{
    ar_gold, ar_loss, ar_predict, build_candidate_sets, evaluate_ar, evaluate_rs, evaluate_si, rs_lanes, rs_logit,
    rs_loss, si_gold, si_lanes, si_loss, si_predict, split_response, windows, CandidateSet, Downstream, EvalOutcome,
    ModelScorer, OracleScorer, Scorer,
};
pub use metrics::{argmax_first, precision_at_1, rank_of, recall_at_k, session_metrics, MetricReport};

#[cfg(test)]
mod tests;
