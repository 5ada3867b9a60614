//! Every tape primitive against central differences, plus value-level
//! invariants of softmax and cosine.

use idsf::autodiff::{grad_check, LinearOperator, ParamStore, SparseMatrix, Tape, Tensor, Var};
use idsf::Result;
use proptest::prelude::*;

type Build = fn(&mut Tape<f64>, &[Var], &Extras) -> Result<Var>;

/// Name, input shapes, whether inputs must be positive, and the op.
type Case = (&'static str, Vec<(usize, usize)>, bool, Build);

/// Fixed side inputs some primitives need.
struct Extras {
    weights: Tensor<f64>,
    op: LinearOperator,
}

fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    // SplitMix64 keeps this independent of the crate's own generators.
    let mut s = seed;
    Tensor::from_fn(rows, cols, |_, _| {
        s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// Reduces an arbitrary output to a scalar through fixed random weights so
/// every output element carries a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, ex: &Extras) -> Result<Var> {
    let [r, c] = tape.shape(out);
    let w = Tensor::from_fn(r, c, |i, j| {
        ex.weights.get(i % ex.weights.rows(), j % ex.weights.cols())
    });
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn check(shapes: &[(usize, usize)], seed: u64, positive: bool, build: Build) -> f64 {
    let mut store = ParamStore::new();
    for (k, &(r, c)) in shapes.iter().enumerate() {
        let mut t = uniform(r, c, seed.wrapping_add(k as u64 * 7919));
        if positive {
            t = t.map(|v| v.abs() + 0.1);
        }
        store.add(format!("x{k}"), t);
    }
    let ex = Extras {
        weights: uniform(7, 7, seed ^ 0xABCD),
        op: LinearOperator::new(
            SparseMatrix::from_triples(
                4,
                5,
                &[(0, 1, 0.5), (0, 4, -0.3), (2, 0, 1.2), (3, 3, 0.7), (3, 1, 0.2)],
            )
            .unwrap(),
        ),
    };
    let report = grad_check(&mut store, 1e-5, |tape, store| {
        let vars: Vec<Var> = store.ids().map(|id| tape.param(store, id)).collect();
        let out = build(tape, &vars, &ex)?;
        weighted_sum(tape, out, &ex)
    })
    .unwrap();
    report.max_relative_error
}

fn primitives() -> Vec<Case> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], false, |t, v, _| t.matmul(v[0], v[1])),
        ("add_bias", vec![(3, 4), (1, 4)], false, |t, v, _| {
            t.add_bias(v[0], v[1])
        }),
        ("add", vec![(3, 4), (3, 4)], false, |t, v, _| t.add(v[0], v[1])),
        ("sub", vec![(3, 4), (3, 4)], false, |t, v, _| t.sub(v[0], v[1])),
        ("mul", vec![(3, 4), (3, 4)], false, |t, v, _| t.mul(v[0], v[1])),
        ("scale", vec![(3, 4)], false, |t, v, _| t.scale(v[0], -1.7)),
        ("tanh", vec![(3, 4)], false, |t, v, _| t.tanh(v[0])),
        ("exp", vec![(3, 4)], false, |t, v, _| t.exp(v[0])),
        ("log", vec![(3, 4)], true, |t, v, _| t.log(v[0])),
        ("log_sigmoid", vec![(3, 4)], false, |t, v, _| t.log_sigmoid(v[0])),
        ("row_softmax", vec![(3, 4)], false, |t, v, _| t.row_softmax(v[0])),
        ("row_scale", vec![(3, 4), (3, 1)], false, |t, v, _| {
            t.row_scale(v[0], v[1])
        }),
        ("hcat", vec![(3, 2), (3, 3)], false, |t, v, _| t.hcat(&[v[0], v[1]])),
        ("cols", vec![(3, 5)], false, |t, v, _| t.cols(v[0], 1, 3)),
        ("rows", vec![(5, 3)], false, |t, v, _| t.rows(v[0], 2, 2)),
        ("pick_cols", vec![(3, 4)], false, |t, v, _| {
            t.pick_cols(v[0], &[3, 0, 2])
        }),
        ("cosine", vec![(3, 4), (2, 4)], false, |t, v, _| t.cosine(v[0], v[1])),
        ("row_logsumexp", vec![(3, 4)], false, |t, v, _| {
            t.row_logsumexp(v[0], None)
        }),
        ("row_logsumexp masked", vec![(2, 3)], false, |t, v, _| {
            t.row_logsumexp(v[0], Some(&[false, true, false, true, false, false]))
        }),
        ("sum", vec![(3, 4)], false, |t, v, _| t.sum(v[0])),
        ("mean", vec![(3, 4)], false, |t, v, _| t.mean(v[0])),
        ("row_sum", vec![(3, 4)], false, |t, v, _| t.row_sum(v[0])),
        ("sum_squares", vec![(3, 4)], false, |t, v, _| t.sum_squares(v[0])),
        ("gather", vec![(4, 3)], false, |t, v, _| t.gather(v[0], &[2, 0, 2, 3])),
        ("aggregate", vec![(5, 3)], false, |t, v, ex| t.aggregate(v[0], &ex.op)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for (name, shapes, positive, build) in primitives() {
            let err = check(&shapes, seed, positive, build);
            prop_assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..8) {
        let rows = values.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(rows, cols, values[..rows * cols].to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.row_softmax(v).unwrap();
        let out = tape.value(s);
        for r in 0..rows {
            prop_assert!(out.row(r).iter().all(|&p| p >= 0.0));
            prop_assert!((out.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-1e3f64..1e3, 6), b in prop::collection::vec(-1e3f64..1e3, 6)) {
        prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
        let mut tape = Tape::new();
        let va = tape.constant(Tensor::new(2, 3, a).unwrap());
        let vb = tape.constant(Tensor::new(2, 3, b).unwrap());
        let c = tape.cosine(va, vb).unwrap();
        for &v in tape.value(c).data() {
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&v));
        }
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let mut store = ParamStore::new();
    let a = store.add("a", uniform(6, 5, 1));
    let b = store.add("b", uniform(5, 4, 2));
    let run = || {
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let m = tape.matmul(va, vb).unwrap();
        let s = tape.row_softmax(m).unwrap();
        let c = tape.cosine(s, s).unwrap();
        let l = tape.sum_squares(c).unwrap();
        let g = tape.backward(l, &store).unwrap();
        g.iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
