use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::corpus::fixtures::{from_parents, table1};
use crate::corpus::{generate_synthetic, Conversation, SyntheticSpec, SEP};
use crate::model::{EncoderConfig, EncoderParams, Forward};
use crate::seed::substream;

#[test]
fn p_at_1_and_session_accuracy_fixture() {
    let sessions = vec![vec![true, true, true], vec![true, false, true]];
    let [p1, acc] = session_metrics(&sessions).unwrap();
    assert_eq!((p1.numerator, p1.denominator), (5, 6));
    assert_eq!(p1.value, 5.0 / 6.0);
    assert_eq!((acc.numerator, acc.denominator), (1, 2));
    assert_eq!(acc.value, 0.5);
    let [p1, acc] = session_metrics(&[vec![true; 3], vec![true; 2]]).unwrap();
    assert_eq!((p1.value, acc.value), (1.0, 1.0));
    assert!(session_metrics(&[]).is_err());
    assert!(precision_at_1([]).is_err());
}

#[test]
fn random_scorer_recall_converges() {
    let mut rng = substream(5, "mc", &[]);
    let sets: Vec<(Vec<f64>, usize)> = (0..10_000)
        .map(|_| ((0..2).map(|_| rng.gen::<f64>()).collect(), rng.gen_range(0..2)))
        .collect();
    let r = recall_at_k(&sets, 1).unwrap();
    assert_eq!(r.metric, "R_2@1");
    assert!((r.value - 0.5).abs() <= 0.02, "{}", r.value);
}

#[test]
fn ranking_ties_go_to_smaller_index() {
    assert_eq!(rank_of(&[0.5, 0.5, 0.1], 0), 0);
    assert_eq!(rank_of(&[0.5, 0.5, 0.1], 1), 1);
    assert_eq!(argmax_first(&[1.0, 0.0, 1.0]), Some(0));
    assert_eq!(argmax_first(&[]), None);
    let ten: Vec<(Vec<f64>, usize)> = vec![((0..10).map(|k| k as f64).collect(), 9)];
    assert_eq!(recall_at_k(&ten, 1).unwrap().value, 1.0);
}

#[test]
fn ar_prediction_rules() {
    let c = table1();
    let scores = OracleScorer.ar_scores(&c).unwrap();
    let pred = ar_predict(&scores, &c);
    assert_eq!(pred[0], None);
    assert_eq!(pred[1], Some(0));
    // turn 5 (index 4) addresses I.2 via its turn 4 (index 3)
    assert_eq!(argmax_first(&scores[4]), Some(3));
    assert_eq!(pred[4], Some(1));
    let out = evaluate_ar(&OracleScorer, std::slice::from_ref(&c), false).unwrap();
    assert_eq!(out.get("P@1").unwrap().value, 1.0);
    assert_eq!(out.get("Acc").unwrap().value, 1.0);

    let tie = ar_predict(&[vec![], vec![0.0], vec![0.3, 0.1], vec![0.7, 0.2, 0.7]], &c);
    assert_eq!(tie[3], Some(c.speaker(0)));
}

#[test]
fn ar_gold_is_multi_positive() {
    // speaker 0 at turns 0 and 2 of four predecessors; turn 4 addresses 0.
    let c = from_parents(&[None, Some(0), Some(1), Some(2), Some(2)], &[0, 1, 0, 2, 1]);
    assert_eq!(ar_gold(&c)[4], Some(vec![0, 2]));

    let cfg = EncoderConfig {
        d: 8,
        layers: 1,
        heads: 2,
        d_ff: 16,
        vocab_size: 32,
        max_seq_len: 64,
        max_interlocutors: 4,
        ..Default::default()
    };
    let mut p = EncoderParams::init(&cfg, 1).unwrap();
    let a = p.ids().a_rur;
    p.tensors_mut()[a] = Tensor::zeros(&[8, 8]);
    let single = Conversation {
        id: "x".into(),
        turns: c.turns[..2].to_vec(),
    };
    let mut g = Graph::new();
    let mut f = Forward::new(&mut g, &p);
    let l = ar_loss(&mut f, &mut g, &single, 64).unwrap().unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    // Uniform scorer: the anchor at index 4 contributes −2·log(1/4).
    let want: f64 = ar_gold(&c)
        .iter()
        .enumerate()
        .filter_map(|(i, g)| g.as_ref().map(|g| g.len() as f64 * (i as f64).ln()))
        .sum();
    let l = ar_loss(&mut f, &mut g, &c, 64).unwrap().unwrap();
    assert!((g.value(l).item() - want).abs() < 1e-9);
    assert!(want > 2.0 * 4f64.ln());

    let mut unlabeled = c.clone();
    for t in &mut unlabeled.turns {
        t.addressee = None;
        t.reply_to = None;
    }
    assert!(ar_loss(&mut f, &mut g, &unlabeled, 64).is_err());
}

#[test]
fn si_rules() {
    let c = table1();
    assert_eq!(si_gold(&c).unwrap(), vec![2]);
    let lanes = si_lanes(&c, 64).unwrap();
    assert_eq!(lanes.speaker_ids[lanes.cls_positions[5]], crate::sampling::MASK_SPEAKER);
    let scores = OracleScorer.si_scores(&c).unwrap();
    assert_eq!(si_predict(&scores, &c), Some(2));

    let fresh = from_parents(&[None, Some(0), Some(1)], &[0, 1, 2]);
    assert!(si_gold(&fresh).unwrap().is_empty());
    let pred = si_predict(&OracleScorer.si_scores(&fresh).unwrap(), &fresh).unwrap();
    assert!(pred < 2);
    let out = evaluate_si(&OracleScorer, &[c, fresh], false).unwrap();
    assert_eq!((out.reports[0].numerator, out.reports[0].denominator), (1, 2));
}

#[test]
fn candidate_sets_and_rs_layout() {
    let spec = SyntheticSpec { num_conversations: 30, ..Default::default() };
    let convs = generate_synthetic(&spec).unwrap();
    let sets = build_candidate_sets(&convs, 10, 4).unwrap();
    assert_eq!(sets.len(), 30);
    assert_eq!(sets, build_candidate_sets(&convs, 10, 4).unwrap());
    for (s, c) in sets.iter().zip(&convs) {
        assert_eq!(s.candidates.len(), 10);
        assert_eq!(s.candidates[s.gold], c.turns.last().unwrap().tokens);
        assert_eq!(s.context.len() + 1, c.len());
    }
    assert!(build_candidate_sets(&convs, 3, 4).is_err());
    assert!(build_candidate_sets(&convs[..5], 10, 4).is_err());

    let s = &sets[0];
    let l = rs_lanes(&s.context, &s.candidates[0], s.speaker, 230).unwrap();
    assert_eq!(l.cls_positions.len(), s.context.len());
    assert_eq!(l.token_ids.iter().filter(|&&t| t == SEP).count(), 2);
    let start = l.spans.last().unwrap().start;
    assert!(l.segment_ids[start..].iter().all(|&x| x == 1));
    assert!(l.speaker_ids[start..].iter().all(|&x| x == s.speaker + 1));
    assert!(OracleScorer.rs_scores(s).is_err());
}

#[test]
fn by_length_buckets() {
    let spec = SyntheticSpec { num_conversations: 40, ..Default::default() };
    let convs = generate_synthetic(&spec).unwrap();
    let out = evaluate_ar(&OracleScorer, &convs, true).unwrap();
    let total: usize = out.by_length.values().map(|r| r[0].denominator).sum();
    assert_eq!(total, out.reports[0].denominator);
}

proptest! {
    // With equal session lengths every all-correct session adds a full
    // session of correct utterances; unequal lengths can break the order.
    #[test]
    fn accuracy_never_exceeds_precision(len in 1usize..6, raw in prop::collection::vec(any::<bool>(), 1..48)) {
        let sessions: Vec<Vec<bool>> = raw.chunks(len).filter(|c| c.len() == len).map(|c| c.to_vec()).collect();
        prop_assume!(!sessions.is_empty());
        let [p1, acc] = session_metrics(&sessions).unwrap();
        prop_assert!(acc.value <= p1.value + 1e-12);
    }

    #[test]
    fn argmax_survives_monotone_transforms(xs in prop::collection::vec(-5.0f64..5.0, 1..10)) {
        let t: Vec<f64> = xs.iter().map(|x| (2.0 * x).exp() + 3.0).collect();
        prop_assert_eq!(argmax_first(&xs), argmax_first(&t));
    }
}
