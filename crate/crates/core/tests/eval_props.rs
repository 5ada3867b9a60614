use std::collections::BTreeSet;

use idsf::autodiff::Tensor;
use idsf::data::{Dataset, IdMap, Split};
use idsf::eval::{evaluate, metrics_at_k, rank_items, top_k};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    ds: Dataset,
    /// Small integers, so ties are common and shifts are exact.
    scores: Tensor<f64>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..8, 2usize..25)
        .prop_flat_map(|(users, items)| {
            (
                Just(users),
                Just(items),
                prop::collection::vec(prop::collection::vec(0u8..4, items), users),
                prop::collection::vec(0i32..5, users * items),
            )
        })
        .prop_map(|(users, items, labels, raw)| {
            // 0 = none, 1 = train, 2 = valid, 3 = test; every user gets one train edge.
            let mut splits = [Vec::new(), Vec::new(), Vec::new()];
            for (u, row) in labels.iter().enumerate() {
                for (i, &l) in row.iter().enumerate() {
                    let l = if i == u % items { 1 } else { l };
                    if l > 0 {
                        splits[l as usize - 1].push((u, i));
                    }
                }
            }
            let [train, valid, test] = splits;
            let ds = Dataset::from_splits(
                IdMap::from_ids((0..users).map(|u| format!("u{u}"))),
                IdMap::from_ids((0..items).map(|i| format!("i{i:02}"))),
                train,
                valid,
                test,
            )
            .unwrap();
            let scores = Tensor::new(users, items, raw.into_iter().map(f64::from).collect()).unwrap();
            Instance { ds, scores }
        })
}

/// Rank by counting how many unmasked items beat each one.
fn oracle_ranked(scores: &[f64], masked: &BTreeSet<usize>) -> Vec<usize> {
    let open: Vec<usize> = (0..scores.len()).filter(|i| !masked.contains(i)).collect();
    let mut slots = vec![usize::MAX; open.len()];
    for &i in &open {
        let beaten_by = open
            .iter()
            .filter(|&&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count();
        slots[beaten_by] = i;
    }
    slots
}

fn oracle_metrics(inst: &Instance, split: Split, k: usize) -> (f64, f64, f64, usize) {
    let (mut r, mut p, mut n, mut users) = (0.0, 0.0, 0.0, 0);
    for u in 0..inst.ds.user_count() {
        let pos: BTreeSet<usize> = inst.ds.user_items(split, u).iter().copied().collect();
        if pos.is_empty() {
            continue;
        }
        let mut masked: BTreeSet<usize> = inst.ds.user_items(Split::Train, u).iter().copied().collect();
        if split == Split::Test {
            masked.extend(inst.ds.user_items(Split::Valid, u));
        }
        let ranked = oracle_ranked(inst.scores.row(u), &masked);
        let top: Vec<usize> = ranked.into_iter().take(k).collect();
        let hits: Vec<usize> = (0..top.len()).filter(|&r| pos.contains(&top[r])).collect();
        r += hits.len() as f64 / pos.len() as f64;
        p += hits.len() as f64 / k as f64;
        let dcg: f64 = hits.iter().map(|&r| 1.0 / (r as f64 + 2.0).log2()).sum();
        let idcg: f64 = (0..k.min(pos.len())).map(|r| 1.0 / (r as f64 + 2.0).log2()).sum();
        n += dcg / idcg;
        users += 1;
    }
    let d = users.max(1) as f64;
    (r / d, p / d, n / d, users)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn evaluation_matches_a_counting_oracle(inst in instance(), k in 1usize..30) {
        for split in [Split::Valid, Split::Test] {
            let report = evaluate(&inst.scores, &inst.ds, split, &[k]).unwrap();
            let m = report.get(k).unwrap();
            let (r, p, n, users) = oracle_metrics(&inst, split, k);
            prop_assert_eq!(report.evaluated_users, users);
            prop_assert!((m.recall - r).abs() < 1e-12);
            prop_assert!((m.precision - p).abs() < 1e-12);
            prop_assert!((m.ndcg - n).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_are_bounded_and_recall_grows_with_k(inst in instance()) {
        let ks: Vec<usize> = (1..=inst.ds.item_count() + 2).collect();
        let report = evaluate(&inst.scores, &inst.ds, Split::Test, &ks).unwrap();
        let mut prev_recall = 0.0;
        let mut prev_hits = 0.0;
        for &k in &ks {
            let m = report.get(k).unwrap();
            for v in [m.recall, m.precision, m.ndcg] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            prop_assert!(m.recall >= prev_recall - 1e-12);
            // precision·k is the mean hit count, which cannot shrink either
            prop_assert!(m.precision * k as f64 >= prev_hits - 1e-9);
            prev_recall = m.recall;
            prev_hits = m.precision * k as f64;
        }
    }

    #[test]
    fn per_user_constant_shift_changes_nothing(inst in instance(), shifts in prop::collection::vec(-8i32..8, 8)) {
        let shifted = Tensor::from_fn(inst.scores.rows(), inst.scores.cols(), |u, i| {
            inst.scores.get(u, i) + f64::from(shifts[u % shifts.len()]) * 0.25
        });
        for split in [Split::Valid, Split::Test] {
            let a = evaluate(&inst.scores, &inst.ds, split, &[1, 5, 10, 20]).unwrap();
            let b = evaluate(&shifted, &inst.ds, split, &[1, 5, 10, 20]).unwrap();
            prop_assert_eq!(a.at, b.at);
        }
    }

    #[test]
    fn top_k_is_the_unmasked_prefix_of_the_full_ranking(
        scores in prop::collection::vec(0i32..6, 1..40),
        mask in prop::collection::vec(any::<bool>(), 40),
        k in 0usize..45,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let masked: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
        let full = rank_items(&scores, &[&masked]);
        let open: Vec<usize> = full.iter().copied().filter(|i| !mask[*i]).take(k).collect();
        prop_assert_eq!(top_k(&scores, &[&masked], k), open);
        let tail: Vec<usize> = full[full.len() - masked.len()..].to_vec();
        prop_assert_eq!(tail, masked);
    }

    #[test]
    fn ndcg_is_one_exactly_when_positives_lead(
        ranking in Just((0..20).collect::<Vec<usize>>()).prop_shuffle(),
        positives in prop::collection::btree_set(0usize..20, 1..8),
        k in 1usize..20,
    ) {
        let pos: Vec<usize> = positives.iter().copied().collect();
        let m = metrics_at_k(&ranking, &pos, k).unwrap();
        let lead = k.min(pos.len());
        let ideal = ranking[..lead].iter().all(|i| positives.contains(i));
        prop_assert_eq!((m.ndcg - 1.0).abs() < 1e-12, ideal);
    }
}
