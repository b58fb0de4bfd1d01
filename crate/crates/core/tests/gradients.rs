//! Backprop against central finite differences, op by op and for the full
//! objective.

mod common;

use std::sync::Arc;

use common::{numeric_gradient, random_tensor, relative_error, rng};
use cotrec::sparse::SparseMatrix;
use cotrec::tape::{NodeId, Tape};
use cotrec::tensor::Tensor;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

/// Checks every input of `build` by reducing its output with fixed random
/// weights to a scalar.
fn check(name: &str, inputs: &[Tensor], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
    let reduce = |tape: &mut Tape, out: NodeId| {
        let (r, c) = tape.shape(out);
        let w = tape.constant(random_tensor(&mut rng(7), r, c, 1.0));
        let m = tape.mul(out, w).unwrap();
        tape.sum(m)
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = build(&mut tape, &ids);
    let loss = reduce(&mut tape, out);
    let grads = tape.gradients(loss).unwrap();

    for (k, x) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(x, H, |probe| {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.var(if j == k { probe.clone() } else { v.clone() }))
                .collect();
            let out = build(&mut t, &ids);
            let l = reduce(&mut t, out);
            t.value(l).item()
        });
        let analytic = grads
            .get(ids[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        let err = relative_error(&analytic, &numeric);
        assert!(err < TOL, "{name}: input {k} relative error {err:e}");
    }
}

fn t(seed: u64, r: usize, c: usize) -> Tensor {
    random_tensor(&mut rng(seed), r, c, 1.0)
}

fn positive(seed: u64, r: usize, c: usize) -> Tensor {
    t(seed, r, c).map(|v| v.abs() + 0.1)
}

#[test]
fn linear_ops() {
    check("matmul", &[t(1, 3, 4), t(2, 4, 2)], |tp, x| tp.matmul(x[0], x[1]).unwrap());
    check("add", &[t(1, 3, 4), t(2, 3, 4)], |tp, x| tp.add(x[0], x[1]).unwrap());
    check("sub", &[t(1, 3, 4), t(2, 3, 4)], |tp, x| tp.sub(x[0], x[1]).unwrap());
    check("mul", &[t(1, 3, 4), t(2, 3, 4)], |tp, x| tp.mul(x[0], x[1]).unwrap());
    check("add_row", &[t(1, 3, 4), t(2, 1, 4)], |tp, x| tp.add_row(x[0], x[1]).unwrap());
    check("scale", &[t(1, 3, 4)], |tp, x| tp.scale(x[0], -2.5));
    check("transpose", &[t(1, 3, 4)], |tp, x| tp.transpose(x[0]));
    check("reshape", &[t(1, 3, 4)], |tp, x| tp.reshape(x[0], 6, 2).unwrap());
}

#[test]
fn sparse_product() {
    let s = Arc::new(
        SparseMatrix::from_triplets(3, 4, [(0, 1, 0.5), (0, 3, 2.0), (2, 0, -1.0), (2, 2, 0.25)]).unwrap(),
    );
    check("spmm", &[t(1, 4, 2)], move |tp, x| tp.spmm(&s, x[0]).unwrap());
}

#[test]
fn structural_ops() {
    check("concat_cols", &[t(1, 3, 2), t(2, 3, 4)], |tp, x| tp.concat_cols(x[0], x[1]).unwrap());
    check("concat_rows", &[t(1, 2, 3), t(2, 4, 3)], |tp, x| tp.concat_rows(&[x[0], x[1], x[0]]).unwrap());
    check("slice_rows", &[t(1, 5, 3)], |tp, x| tp.slice_rows(x[0], 1, 3).unwrap());
    check("gather_rows", &[t(1, 5, 3)], |tp, x| tp.gather_rows(x[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn pointwise_ops() {
    check("tanh", &[t(1, 3, 4)], |tp, x| tp.tanh(x[0]));
    check("sigmoid", &[t(1, 3, 4)], |tp, x| tp.sigmoid(x[0]));
    check("exp", &[t(1, 3, 4)], |tp, x| tp.exp(x[0]));
    check("log", &[positive(1, 3, 4)], |tp, x| tp.log(x[0]));
}

#[test]
fn reductions() {
    check("sum", &[t(1, 3, 4)], |tp, x| tp.sum(x[0]));
    check("mean", &[t(1, 3, 4)], |tp, x| tp.mean(x[0]));
    check("mean_rows", &[t(1, 3, 4)], |tp, x| tp.mean_rows(x[0]));
    check("softmax_rows", &[t(1, 3, 5)], |tp, x| tp.softmax_rows(x[0]));
    check("cosine_rows", &[t(1, 4, 3), t(2, 4, 3)], |tp, x| tp.cosine_rows(x[0], x[1]).unwrap());
}

#[test]
fn losses() {
    check("kl_div_rows", &[t(1, 3, 5), t(2, 3, 5)], |tp, x| {
        let p = tp.softmax_rows(x[0]);
        let q = tp.softmax_rows(x[1]);
        tp.kl_div_rows(p, q).unwrap()
    });
    check("info_nce", &[t(1, 3, 6)], |tp, x| tp.info_nce(x[0], 3).unwrap());
    check("bce_one_hot", &[t(1, 3, 5)], |tp, x| {
        let p = tp.softmax_rows(x[0]);
        tp.bce_one_hot(p, &[0, 4, 2]).unwrap()
    });
}

#[test]
fn full_objective_matches_finite_differences() {
    for seed in 0..2 {
        let problem = common::tiny_problem(seed);
        for (name, err) in problem.gradient_errors(H) {
            assert!(err < TOL, "seed {seed}: `{name}` relative error {err:e}");
        }
    }
}

#[test]
fn ablated_objectives_match_finite_differences() {
    let mut problem = common::tiny_problem(3);
    problem.config.no_divergence = true;
    for (name, err) in problem.gradient_errors(H) {
        assert!(err < TOL, "no divergence: `{name}` relative error {err:e}");
    }
    problem.config.no_divergence = false;
    problem.config.no_ssl = true;
    for (name, err) in problem.gradient_errors(H) {
        assert!(err < TOL, "no ssl: `{name}` relative error {err:e}");
    }
}

