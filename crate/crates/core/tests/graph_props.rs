// Oracles index matrices explicitly; iterator chains would obscure them.
#![allow(clippy::needless_range_loop)]

use idsf::autodiff::{ParamStore, Tape, Tensor};
use idsf::graph::{BipartiteGraph, Side};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    users: usize,
    items: usize,
    edges: Vec<(usize, usize)>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..15, 1usize..15)
        .prop_flat_map(|(u, i)| (Just(u), Just(i), prop::collection::vec((0..u, 0..i), 1..60)))
        .prop_map(|(users, items, edges)| Instance { users, items, edges })
}

fn source(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |r, c| vals[(r * cols + c) % vals.len()])
}

/// Normalized adjacency computed densely from degree counts.
fn dense_oracle(inst: &Instance) -> Vec<Vec<f64>> {
    let mut adj = vec![vec![0.0; inst.users]; inst.items];
    for &(u, i) in &inst.edges {
        adj[i][u] = 1.0;
    }
    let du: Vec<f64> = (0..inst.users).map(|u| adj.iter().map(|row| row[u]).sum()).collect();
    let di: Vec<f64> = adj.iter().map(|row| row.iter().sum()).collect();
    for i in 0..inst.items {
        for u in 0..inst.users {
            if adj[i][u] > 0.0 {
                adj[i][u] /= du[u].sqrt() * di[i].sqrt();
            }
        }
    }
    adj
}

proptest! {
    #[test]
    fn sparse_aggregation_equals_dense(inst in instance(), vals in prop::collection::vec(-1.0f64..1.0, 1..30)) {
        let g = BipartiteGraph::from_edges(inst.users, inst.items, &inst.edges).unwrap();
        let a = dense_oracle(&inst);
        let x = source(inst.users, 3, &vals);
        let y = g.aggregate(Side::UsersToItems, &x).unwrap();
        for i in 0..inst.items {
            for c in 0..3 {
                let expect: f64 = (0..inst.users).map(|u| a[i][u] * x.get(u, c)).sum();
                prop_assert!((y.get(i, c) - expect).abs() < 1e-12);
            }
        }
        let z = source(inst.items, 2, &vals);
        let back = g.aggregate(Side::ItemsToUsers, &z).unwrap();
        for u in 0..inst.users {
            for c in 0..2 {
                let expect: f64 = (0..inst.items).map(|i| a[i][u] * z.get(i, c)).sum();
                prop_assert!((back.get(u, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_is_linear(
        inst in instance(),
        a in prop::collection::vec(-1.0f64..1.0, 1..20),
        b in prop::collection::vec(-1.0f64..1.0, 1..20),
        alpha in -3.0f64..3.0,
    ) {
        let g = BipartiteGraph::from_edges(inst.users, inst.items, &inst.edges).unwrap();
        let (xa, xb) = (source(inst.users, 4, &a), source(inst.users, 4, &b));
        let combo = Tensor::from_fn(inst.users, 4, |r, c| alpha * xa.get(r, c) + xb.get(r, c));
        let ya = g.aggregate(Side::UsersToItems, &xa).unwrap();
        let yb = g.aggregate(Side::UsersToItems, &xb).unwrap();
        let yc = g.aggregate(Side::UsersToItems, &combo).unwrap();
        for ((c, a), b) in yc.data().iter().zip(ya.data()).zip(yb.data()) {
            prop_assert!((c - (alpha * a + b)).abs() < 1e-12);
        }
    }

    /// Symmetric normalization keeps the spectrum in [-1, 1], so one
    /// propagation step over the joint node set never grows the norm.
    #[test]
    fn propagation_is_non_expansive(inst in instance(), vals in prop::collection::vec(-1.0f64..1.0, 1..30)) {
        let g = BipartiteGraph::from_edges(inst.users, inst.items, &inst.edges).unwrap();
        let xu = source(inst.users, 2, &vals);
        let xi = source(inst.items, 2, &vals[vals.len() / 2..].iter().chain(&vals).copied().collect::<Vec<_>>());
        let yi = g.aggregate(Side::UsersToItems, &xu).unwrap();
        let yu = g.aggregate(Side::ItemsToUsers, &xi).unwrap();
        let before = xu.sum_squares() + xi.sum_squares();
        let after = yu.sum_squares() + yi.sum_squares();
        prop_assert!(after <= before + 1e-10, "{after} > {before}");
    }

    #[test]
    fn coefficients_are_symmetric_and_match_degrees(inst in instance()) {
        let g = BipartiteGraph::from_edges(inst.users, inst.items, &inst.edges).unwrap();
        let a = dense_oracle(&inst);
        let down = g.operator(Side::UsersToItems).matrix().to_dense();
        let up = g.operator(Side::ItemsToUsers).matrix().to_dense();
        for i in 0..inst.items {
            for u in 0..inst.users {
                prop_assert_eq!(down[i][u], up[u][i]);
                prop_assert!((down[i][u] - a[i][u]).abs() < 1e-15);
                prop_assert_eq!(g.coefficient(u, i).is_some(), a[i][u] > 0.0);
            }
        }
    }

    /// The gradient of `sum(W ∘ aggregate(x))` is the opposite-direction
    /// aggregation of `W`.
    #[test]
    fn aggregate_backward_runs_the_reverse_direction(inst in instance(), vals in prop::collection::vec(-1.0f64..1.0, 1..30)) {
        let g = BipartiteGraph::from_edges(inst.users, inst.items, &inst.edges).unwrap();
        let mut store = ParamStore::new();
        let id = store.add("x", source(inst.users, 3, &vals));
        let w = source(inst.items, 3, &vals.iter().map(|v| v * 0.7 + 0.1).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.aggregate(x, &g.operator(Side::UsersToItems)).unwrap();
        let wc = tape.constant(w.clone());
        let p = tape.mul(y, wc).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss, &store).unwrap();
        let expect = g.aggregate(Side::ItemsToUsers, &w).unwrap();
        let got = grads.iter().find(|(k, _)| *k == id).map(|(_, t)| t.clone()).unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
