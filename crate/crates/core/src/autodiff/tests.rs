use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.masked_softmax(x, &[true, true]).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn masked_softmax_zeroes_inactive_entries() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![3.0, -1.0, 2.0]));
    let y = g.masked_softmax(x, &[true, false, true]).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[1], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
}

#[test]
fn all_masked_row_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
    assert!(g.masked_softmax(x, &[true, false, false, false]).is_err());
    assert!(g.masked_log_softmax(x, &[false, false, true, true]).is_err());
}

#[test]
fn gelu_at_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.gelu(x);
    assert_eq!(g.value(y).item(), 0.0);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![2.5; 4]));
    let y = g.layer_norm(x);
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn shape_mismatch_is_rejected() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
    let c = g.constant(Tensor::zeros(&[3]));
    assert!(g.add(a, c).is_err());
    assert!(g.add_row(a, c).is_ok());
    assert!(g.gather_rows(a, &[2]).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, -2.0, 4.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_dot_is_other_operand() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.param(Tensor::vector(vec![-0.5, 4.0, 0.25]));
    let p = g.mul(x, y).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).data(), g.value(y).data());
    assert_eq!(grads.wrt(y).data(), g.value(x).data());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(g.backward(x).is_err());
}

#[test]
fn unreached_parameter_gets_exact_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = g.param(Tensor::vector(vec![7.0, 8.0, 9.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn square_gradient_matches_finite_difference() {
    let err = finite_diff_check(&Tensor::scalar(3.0), |g, x| g.mul(x, x)).unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn two_layer_mlp_matches_finite_difference() {
    let mut r = rng(11);
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    let w1 = Tensor::randn(&[4, 5], 0.5, &mut r);
    let b1 = Tensor::randn(&[5], 0.1, &mut r);
    let w2 = Tensor::randn(&[5, 3], 0.5, &mut r);
    let report = finite_diff_check_many(&[x, w1, b1, w2], GradCheck::default(), |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add_row(h, v[2])?;
        let h = g.gelu(h);
        let o = g.matmul(h, v[3])?;
        g.cross_entropy(o, &[0, 2, 1])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn composite_ops_match_finite_difference() {
    let mut r = rng(5);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[2, 4], 1.0, &mut r);
    let gain = Tensor::randn(&[4], 1.0, &mut r);
    let mask = vec![true, true, false, true, false, true];
    let report = finite_diff_check_many(&[a, b, gain], GradCheck::default(), |g, v| {
        let n = g.layer_norm(v[0]);
        let n = g.mul_row(n, v[2])?;
        let s = g.matmul_nt(n, v[1])?; // [3,2]
        let ls = g.masked_log_softmax(s, &mask)?;
        let sm = g.masked_softmax(s, &mask)?;
        let sg = g.sigmoid(s);
        let left = g.slice_cols(n, 1, 2)?;
        let top = g.gather_rows(v[1], &[1, 1, 0])?;
        let cat = g.concat(&[left, top])?;
        let stacked = g.concat_rows(&[cat, cat])?;
        let rs = g.sum_last_axis(stacked);
        let picked = g.pick(ls, &[0, 3, 5])?;
        let bce = g.bce_with_logits(rs, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0])?;
        let t1 = g.mean(picked);
        let t2 = g.mean(bce);
        let t3 = g.sum(sm);
        let prod = g.mul(sg, sm)?;
        let t4 = g.sum(prod);
        let r = g.relu(rs);
        let t5 = g.mean(r);
        let parts = g.concat(&[t1, t2, t3, t4, t5])?;
        let sum = g.sum(parts);
        let sum = g.add_scalar(sum, 0.3);
        Ok(g.scale(sum, 0.7))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn dropout_is_seed_deterministic_and_off_outside_training() {
    let x = Tensor::vector((0..64).map(|i| i as f64).collect());
    let run = |seed| {
        let mut g = Graph::training();
        let v = g.constant(x.clone());
        let y = g.dropout(v, 0.5, &mut rng(seed));
        g.value(y).clone()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));

    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = g.dropout(v, 0.5, &mut rng(3));
    assert_eq!(y, v);
}

proptest! {
    #[test]
    fn masked_softmax_rows_sum_to_one(
        vals in prop::collection::vec(-30.0f64..30.0, 12),
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let mut mask = mask;
        for r in 0..3 {
            mask[r * 4] = true;
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, vals).unwrap());
        let y = g.masked_softmax(x, &mask).unwrap();
        for r in 0..3 {
            let row = g.value(y).row(r);
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for c in 0..4 {
                if !mask[r * 4 + c] {
                    prop_assert_eq!(row[c], 0.0);
                }
            }
        }
    }

    #[test]
    fn forward_is_bit_identical_on_repeat(seed in 0u64..1000) {
        let build = || {
            let mut r = rng(seed);
            let a = Tensor::randn(&[4, 3], 1.0, &mut r);
            let b = Tensor::randn(&[3, 2], 1.0, &mut r);
            let mut g = Graph::training();
            let va = g.param(a);
            let vb = g.param(b);
            let h = g.matmul(va, vb).unwrap();
            let h = g.dropout(h, 0.2, &mut r);
            let h = g.gelu(h);
            let l = g.cross_entropy(h, &[0, 1, 1, 0]).unwrap();
            g.value(l).item().to_bits()
        };
        prop_assert_eq!(build(), build());
    }
}
