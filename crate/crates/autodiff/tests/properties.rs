//! Property-based invariants of the tape engine.

use gtgan_autodiff::{Rng, Tape64, Tensor64};
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..6, cols in 1usize..8, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let x = Tensor64::from_fn(vec![rows, cols], |_| rng.uniform_in(-30.0, 30.0));
        let mut tape = Tape64::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, 1).unwrap();
        let data = tape.value(y).data();
        for r in 0..rows {
            let s: f64 = data[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariant(seed in 0u64..1000, shift in -50.0f64..50.0) {
        let mut rng = Rng::new(seed);
        let x = Tensor64::from_fn(vec![5], |_| rng.normal());
        let shifted = x.map(|v| v + shift);
        let mut tape = Tape64::new();
        let a = tape.constant(x);
        let b = tape.constant(shifted);
        let ya = tape.softmax(a, 0).unwrap();
        let yb = tape.softmax(b, 0).unwrap();
        for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_op_sequences_are_bitwise_identical(seed in 0u64..500) {
        let run = || {
            let mut rng = Rng::new(seed);
            let x = Tensor64::from_fn(vec![3, 3], |_| rng.normal());
            let w = Tensor64::from_fn(vec![2, 1, 3, 3], |_| rng.normal());
            let mut tape = Tape64::new();
            let xv = tape.input(x, true);
            let x3 = tape.reshape(xv, vec![1, 3, 3]).unwrap();
            let wv = tape.constant(w);
            let c = tape.conv2d(x3, wv, 1, 1).unwrap();
            let g = tape.gelu(c);
            let loss = tape.sum_all(g);
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item().unwrap().to_bits(),
                tape.grad_of(xv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn backward_accumulates_instead_of_overwriting() {
    // Two backward passes over separate losses must add into the same grad
    // buffer, bitwise equal to one pass over their sum.
    let x0 = Tensor64::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();

    let mut tape = Tape64::new();
    let x = tape.input(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let l1 = tape.sum_all(sq);
    let g = tape.gelu(x);
    let l2 = tape.sum_all(g);
    tape.backward(l1).unwrap();
    tape.backward(l2).unwrap();
    let separate = tape.grad_of(x).unwrap().to_vec();

    let mut tape2 = Tape64::new();
    let x2 = tape2.input(x0, true);
    let sq2 = tape2.mul(x2, x2).unwrap();
    let l1b = tape2.sum_all(sq2);
    let g2 = tape2.gelu(x2);
    let l2b = tape2.sum_all(g2);
    let total = tape2.add(l1b, l2b).unwrap();
    tape2.backward(total).unwrap();
    let combined = tape2.grad_of(x2).unwrap().to_vec();

    assert_eq!(separate, combined);
}

#[test]
fn gradient_accumulation_is_linear_through_shared_subgraphs() {
    // Losses sharing intermediate nodes: linearity holds to rounding.
    let x0 = Tensor64::new(vec![4], vec![0.5, -0.25, 1.5, -2.0]).unwrap();

    let build = |tape: &mut Tape64, x: gtgan_autodiff::Var| {
        let h = tape.gelu(x);
        let sq = tape.mul(h, h).unwrap();
        let l1 = tape.sum_all(sq);
        let s = tape.sigmoid(h);
        let l2 = tape.sum_all(s);
        (l1, l2)
    };

    let mut tape = Tape64::new();
    let x = tape.input(x0.clone(), true);
    let (l1, l2) = build(&mut tape, x);
    tape.backward(l1).unwrap();
    tape.backward(l2).unwrap();
    let separate = tape.grad_of(x).unwrap().to_vec();

    let mut tape2 = Tape64::new();
    let x2 = tape2.input(x0, true);
    let (l1b, l2b) = build(&mut tape2, x2);
    let total = tape2.add(l1b, l2b).unwrap();
    tape2.backward(total).unwrap();
    let combined = tape2.grad_of(x2).unwrap().to_vec();

    for (a, b) in separate.iter().zip(&combined) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}
