use proptest::prelude::*;

use super::*;
use crate::error::Error;

const H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn eval(leaves: &[Tensor], f: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<_> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone()).unwrap())
        .collect();
    let root = f(&mut tape, &ids);
    tape.value(root).item()
}

/// Central-difference check of every leaf element against the tape gradient.
fn grad_check(leaves: &[Tensor], f: &dyn Fn(&mut Tape, &[NodeId]) -> NodeId) {
    let mut tape = Tape::new();
    let ids: Vec<_> = leaves
        .iter()
        .map(|t| tape.leaf(t.clone()).unwrap())
        .collect();
    let root = f(&mut tape, &ids);
    let grads = tape.backward(root).unwrap();

    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[e] += H;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[e] -= H;
            let fd = (eval(&plus, f) - eval(&minus, f)) / (2.0 * H);
            let ad = grads.wrt(ids[li]).map(|g| g.data()[e]).unwrap_or(0.0);
            assert!(
                (ad - fd).abs() <= FD_TOL * fd.abs().max(1.0),
                "leaf {li} elem {e}: ad={ad} fd={fd}"
            );
        }
    }
}

#[test]
fn worked_examples() {
    let mut tape = Tape::new();
    // softmax of a zero row is uniform
    let z = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
    let sm = tape.softmax_rows(z).unwrap();
    for &p in tape.value(sm).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    // ln(exp(x)) = x
    let x = tape.constant(Tensor::scalar(2.5)).unwrap();
    let e = tape.exp(x).unwrap();
    let l = tape.ln(e).unwrap();
    assert!((tape.value(l).item() - 2.5).abs() < 1e-12);
    // matmul shape (2x3)(3x1) -> (2x1)
    let a = tape
        .constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
        .unwrap();
    let b = tape
        .constant(Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]).unwrap())
        .unwrap();
    let m = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(m).dims2(), (2, 1));
    assert_eq!(tape.value(m).data(), &[-2.0, -2.0]);
}

#[test]
fn derivative_of_square_at_three() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert!((grads.wrt(x).unwrap().item() - 6.0).abs() < 1e-12);
}

#[test]
fn derivative_of_log_sigmoid_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
    let s = tape.sigmoid(x).unwrap();
    let l = tape.ln(s).unwrap();
    let grads = tape.backward(l).unwrap();
    assert!((grads.wrt(x).unwrap().item() - 0.5).abs() < 1e-12);
}

#[test]
fn unused_leaf_has_zero_gradient() {
    let mut tape = Tape::new();
    let used = tape.leaf(Tensor::scalar(1.0)).unwrap();
    let unused = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let y = tape.mul(used, used).unwrap();
    let grads = tape.backward(y).unwrap();
    assert!(grads.wrt(unused).is_none());
    let z = grads.wrt_or_zeros(unused, tape.value(unused));
    assert_eq!(z.data(), &[0.0, 0.0]);
}

#[test]
fn backward_twice_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(
        tape.backward(y),
        Err(Error::Numerical { context: "backward", .. })
    ));
}

#[test]
fn nonfinite_forward_names_the_primitive() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(1.0)).unwrap();
    let b = tape.constant(Tensor::scalar(0.0)).unwrap();
    match tape.div(a, b) {
        Err(Error::NonFinite { op, index, .. }) => {
            assert_eq!(op, "div");
            assert_eq!(index, 0);
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
    assert!(matches!(
        tape.pow(b, a),
        Err(Error::NonFinite { op: "pow(base<=0)", .. })
    ));
}

#[test]
fn matmul_shape_mismatch_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
    let b = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn gradient_linearity_is_exact() {
    let leaf = Tensor::vector(vec![0.4, -1.2, 0.9]).unwrap();
    let part_f = |tape: &mut Tape, x: NodeId| {
        let t = tape.tanh(x).unwrap();
        tape.sum(t).unwrap()
    };
    let part_g = |tape: &mut Tape, x: NodeId| {
        let m = tape.mul(x, x).unwrap();
        tape.sum(m).unwrap()
    };

    let grad_of = |build: &dyn Fn(&mut Tape, NodeId) -> NodeId| {
        let mut tape = Tape::new();
        let x = tape.leaf(leaf.clone()).unwrap();
        let root = build(&mut tape, x);
        let grads = tape.backward(root).unwrap();
        grads.wrt(x).unwrap().data().to_vec()
    };

    let gf = grad_of(&|t, x| part_f(t, x));
    let gg = grad_of(&|t, x| part_g(t, x));
    let gsum = grad_of(&|t, x| {
        let f = part_f(t, x);
        let g = part_g(t, x);
        t.add(f, g).unwrap()
    });
    for i in 0..3 {
        assert!((gsum[i] - (gf[i] + gg[i])).abs() < 1e-12);
    }
}

#[test]
fn g_inverse_gradients_match_finite_differences() {
    let y = Tensor::vector(vec![-1.8, -0.3, 0.0, 0.7, 1.9]).unwrap();
    let u = Tensor::scalar(1.7);
    let v = Tensor::scalar(2.4);
    grad_check(&[y, u, v], &|tape, ids| {
        let z = tape.g_inverse(ids[0], ids[1], ids[2], 4.0).unwrap();
        let sq = tape.mul(z, z).unwrap();
        let sh = tape.add_const(sq, 0.3).unwrap();
        let l = tape.ln(sh).unwrap();
        tape.sum(l).unwrap()
    });
}

#[test]
fn broadcast_gradients_match_finite_differences() {
    // column (4x1) against matrix (4x3), row (1x3) against matrix, scalar.
    let m = Tensor::matrix(4, 3, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap();
    let col = Tensor::matrix(4, 1, vec![0.3, -0.2, 1.1, 0.8]).unwrap();
    let row = Tensor::matrix(1, 3, vec![0.5, 1.5, -0.7]).unwrap();
    let s = Tensor::scalar(0.9);
    grad_check(&[m, col, row, s], &|tape, ids| {
        let a = tape.mul(ids[0], ids[1]).unwrap();
        let b = tape.add(a, ids[2]).unwrap();
        let c = tape.sub(b, ids[3]).unwrap();
        let t = tape.tanh(c).unwrap();
        tape.sum(t).unwrap()
    });
}

#[test]
fn composite_network_block_matches_finite_differences() {
    // A miniature GRU-like block: matmul, sigmoid, tanh, gating, softmax,
    // slice/concat, softplus head.
    let x = Tensor::matrix(3, 2, vec![0.2, -0.4, 0.9, 0.1, -0.7, 0.5]).unwrap();
    let w = Tensor::matrix(2, 4, (0..8).map(|i| (i as f64 * 0.37).sin() * 0.5).collect()).unwrap();
    let u = Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 * 0.21).cos() * 0.3).collect()).unwrap();
    let b = Tensor::matrix(1, 4, vec![0.05, -0.02, 0.04, 0.01]).unwrap();
    grad_check(&[x, w, u, b], &|tape, ids| {
        let (x, w, u, b) = (ids[0], ids[1], ids[2], ids[3]);
        let xw = tape.matmul(x, w).unwrap();
        let pre = tape.add(xw, b).unwrap();
        let z = tape.sigmoid(pre).unwrap();
        let h0 = tape.tanh(pre).unwrap();
        let hu = tape.matmul(h0, u).unwrap();
        let cand = tape.tanh(hu).unwrap();
        let gated = {
            let zc = tape.mul(z, cand).unwrap();
            let one_minus = tape.neg(z).unwrap();
            let one_minus = tape.add_const(one_minus, 1.0).unwrap();
            let zh = tape.mul(one_minus, h0).unwrap();
            tape.add(zc, zh).unwrap()
        };
        let att = tape.softmax_rows(gated).unwrap();
        let left = tape.slice_cols(att, 0, 2).unwrap();
        let right = tape.slice_cols(att, 2, 4).unwrap();
        let rejoined = tape.concat_cols(&[right, left]).unwrap();
        let mixed = tape.mul(rejoined, gated).unwrap();
        let sp = tape.softplus(mixed).unwrap();
        tape.sum(sp).unwrap()
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_ops_match_fd(
        a in prop::collection::vec(-2.0..2.0f64, 6),
        b in prop::collection::vec(-2.0..2.0f64, 6),
    ) {
        for (x, y) in a.iter().zip(&b) {
            prop_assume!((x - y).abs() > 1e-2);   // keep max/min away from ties
            prop_assume!(y.abs() > 0.05);          // keep div well-conditioned
        }
        let ta = Tensor::vector(a).unwrap();
        let tb = Tensor::vector(b).unwrap();
        grad_check(&[ta, tb], &|tape, ids| {
            let s = tape.sub(ids[0], ids[1]).unwrap();
            let d = tape.div(ids[0], ids[1]).unwrap();
            let mx = tape.max(ids[0], ids[1]).unwrap();
            let mn = tape.min(s, d).unwrap();
            let prod = tape.mul(mx, mn).unwrap();
            let t = tape.tanh(prod).unwrap();
            tape.sum(t).unwrap()
        });
    }

    #[test]
    fn positive_domain_ops_match_fd(
        a in prop::collection::vec(0.2..2.0f64, 5),
        b in prop::collection::vec(-1.5..1.5f64, 5),
    ) {
        let ta = Tensor::vector(a).unwrap();
        let tb = Tensor::vector(b).unwrap();
        grad_check(&[ta, tb], &|tape, ids| {
            let p = tape.pow(ids[0], ids[1]).unwrap();
            let l = tape.ln(ids[0]).unwrap();
            let e = tape.exp(ids[1]).unwrap();
            let sp = tape.softplus(ids[1]).unwrap();
            let s1 = tape.add(p, l).unwrap();
            let s2 = tape.add(e, sp).unwrap();
            let m = tape.mul(s1, s2).unwrap();
            tape.sum(m).unwrap()
        });
    }

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0..30.0f64, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, v).unwrap()).unwrap();
        let sm = tape.softmax_rows(x).unwrap();
        let t = tape.value(sm);
        for i in 0..3 {
            let s: f64 = (0..4).map(|j| t.at(i, j)).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_fd(
        a in prop::collection::vec(-2.0..2.0f64, 6),
        b in prop::collection::vec(-2.0..2.0f64, 8),
    ) {
        let ta = Tensor::matrix(3, 2, a).unwrap();
        let tb = Tensor::matrix(2, 4, b).unwrap();
        grad_check(&[ta, tb], &|tape, ids| {
            let m = tape.matmul(ids[0], ids[1]).unwrap();
            let t = tape.tanh(m).unwrap();
            tape.sum(t).unwrap()
        });
    }
}
