mod common;

use std::sync::Arc;

use common::{numeric_gradient, random_tensor, relative_error, rng};
use cotrec::sparse::SparseMatrix;
use cotrec::tape::{NodeId, Tape};
use cotrec::tensor::Tensor;
use cotrec::trainer::{batch_forward, PlanSource};
use proptest::prelude::*;
use rand::Rng;

/// A random composite of most tape ops over inputs `a` (`r×k`), `b` (`k×c`)
/// and `v` (`1×c`), reduced to a scalar.
fn composite(tape: &mut Tape, x: &[NodeId], s: &Arc<SparseMatrix>, targets: &[usize]) -> NodeId {
    let (a, b, v) = (x[0], x[1], x[2]);
    let ab = tape.matmul(a, b).unwrap();
    let h = tape.add_row(ab, v).unwrap();
    let h = tape.tanh(h);
    let p = tape.spmm(s, h).unwrap();
    let g = tape.sigmoid(p);
    let sm = tape.softmax_rows(g);
    let rec = tape.bce_one_hot(sm, targets).unwrap();
    let cat = tape.concat_cols(h, g).unwrap();
    let rows = tape.gather_rows(cat, &[0, 0]).unwrap();
    let half = tape.slice_rows(cat, 0, 1).unwrap();
    let both = tape.concat_rows(&[rows, half]).unwrap();
    let cos = tape.cosine_rows(both, both).unwrap();
    let m = tape.mean_rows(h);
    let e = tape.exp(m);
    let l = tape.log(e);
    let kl = {
        let q = tape.softmax_rows(h);
        let first = tape.slice_rows(sm, 0, 1).unwrap();
        let qf = tape.slice_rows(q, 0, 1).unwrap();
        tape.kl_div_rows(first, qf).unwrap()
    };
    let terms = [tape.mean(rec), tape.sum(cos), tape.sum(l), tape.sum(kl)];
    let mut total = terms[0];
    for t in &terms[1..] {
        total = tape.add(total, *t).unwrap();
    }
    let st = tape.transpose(total);
    tape.scale(st, 0.7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composite_gradients_match_finite_differences(seed in any::<u64>(), r in 1usize..5, k in 1usize..5, c in 2usize..6) {
        let mut g = rng(seed);
        let inputs = [random_tensor(&mut g, r, k, 1.0), random_tensor(&mut g, k, c, 1.0), random_tensor(&mut g, 1, c, 1.0)];
        let trip: Vec<(usize, usize, f64)> = (0..r * 2)
            .map(|_| (g.random_range(0..r), g.random_range(0..r), g.random_range(0.1..1.0)))
            .collect();
        let s = Arc::new(SparseMatrix::from_triplets(r, r, trip).unwrap());
        let targets: Vec<usize> = (0..r).map(|_| g.random_range(0..c)).collect();

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = composite(&mut tape, &ids, &s, &targets);
        let grads = tape.gradients(loss).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            let numeric = numeric_gradient(x, 1e-4, |probe| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = inputs.iter().enumerate()
                    .map(|(j, v)| t.var(if i == j { probe.clone() } else { v.clone() }))
                    .collect();
                let l = composite(&mut t, &ids, &s, &targets);
                t.value(l).item()
            });
            let analytic = grads.get(ids[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
            let err = relative_error(&analytic, &numeric);
            prop_assert!(err < 1e-4, "input {} relative error {:e}", i, err);
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = random_tensor(&mut rng(seed), 4, 7, 5.0);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + shift));
        let (sa, sb) = (tape.softmax_rows(a), tape.softmax_rows(b));
        for r in 0..4 {
            let row = tape.value(sa).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (p, q) in row.iter().zip(tape.value(sb).row(r)) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spmm_equals_dense_product(seed in any::<u64>(), r in 1usize..8, c in 1usize..8, d in 1usize..5) {
        let mut g = rng(seed);
        let dense = random_tensor(&mut g, r, c, 1.0).map(|v| if v.abs() < 0.5 { 0.0 } else { v });
        let x = random_tensor(&mut g, c, d, 1.0);
        let s = Arc::new(SparseMatrix::from_dense(&dense));
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let out = tape.spmm(&s, xn).unwrap();
        let expect = dense.matmul(&x).unwrap();
        prop_assert!(relative_error(tape.value(out), &expect) < 1e-12);
    }
}

#[test]
fn forward_pass_is_bitwise_reproducible() {
    let problem = common::tiny_problem(4);
    let run = || {
        let fwd = batch_forward(
            &problem.model,
            &problem.store,
            &problem.data,
            &problem.config,
            &problem.batch(),
            PlanSource::Mine(&mut rng(8)),
        )
        .unwrap();
        (fwd.value(fwd.total).to_bits(), fwd.plan)
    };
    assert_eq!(run(), run());
}
