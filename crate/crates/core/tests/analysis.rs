use std::collections::BTreeSet;
use std::sync::Arc;

use idsf::analysis::{
    export_embeddings, group_similarity_means, sample_user_items, similarity_matrix, top_k_row_filter, write_export,
    EmbeddingKind,
};
use idsf::autodiff::Tensor;
use idsf::data::{
    generate_synthetic, read_matrix_file, read_sidecar, split_dataset, Dataset, IdMap, Modality, Split, SplitRatios,
    SplitStrategy, SyntheticSpec,
};
use idsf::graph::BipartiteGraph;
use idsf::model::{ModalFeatures, ModelConfig};
use idsf::train::Trainer;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), -3.0f64..3.0], n * d).prop_map(move |v| Tensor::new(n, d, v).unwrap())
}

proptest! {
    #[test]
    fn similarity_is_symmetric_bounded_and_matches_cosine(t in (1usize..12, 1usize..6).prop_flat_map(|(n, d)| rows(n, d))) {
        let m = similarity_matrix(&t);
        let norm = |r: usize| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for a in 0..m.n {
            for b in 0..m.n {
                prop_assert_eq!(m.get(a, b), m.get(b, a));
                prop_assert!((-1.0..=1.0).contains(&m.get(a, b)));
                let (na, nb) = (norm(a), norm(b));
                let expect = if na == 0.0 || nb == 0.0 {
                    0.0
                } else if a == b {
                    1.0
                } else {
                    t.row(a).iter().zip(t.row(b)).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
                };
                prop_assert!((m.get(a, b) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_keeps_the_largest_nonzeros(t in (1usize..12, 1usize..6).prop_flat_map(|(n, d)| rows(n, d)), k in 1usize..8) {
        let m = similarity_matrix(&t);
        let f = top_k_row_filter(&m, k).unwrap();
        for r in 0..m.n {
            prop_assert!(f.nonzeros_in_row(r) <= k);
            prop_assert_eq!(f.nonzeros_in_row(r), m.nonzeros_in_row(r).min(k));
            let kept: Vec<f64> = f.row(r).iter().copied().filter(|v| *v != 0.0).collect();
            let dropped = m.row(r).iter().zip(f.row(r)).filter(|(o, n)| **o != 0.0 && **n == 0.0).map(|(o, _)| *o);
            let floor = kept.iter().copied().fold(f64::INFINITY, f64::min);
            for d in dropped {
                prop_assert!(d <= floor);
            }
            for (o, n) in m.row(r).iter().zip(f.row(r)) {
                prop_assert!(*n == 0.0 || n == o);
            }
        }
        prop_assert_eq!(top_k_row_filter(&f, k).unwrap(), f);
    }
}

fn dataset(train: Vec<(usize, usize)>, users: usize, items: usize) -> Dataset {
    Dataset::from_splits(
        IdMap::from_ids((0..users).map(|u| format!("u{u:02}"))),
        IdMap::from_ids((0..items).map(|i| format!("i{i:02}"))),
        train,
        vec![],
        vec![],
    )
    .unwrap()
}

#[test]
fn one_user_with_five_items_is_one_group_of_five() {
    let ds = dataset((0..5).map(|i| (0, i * 2)).collect(), 1, 10);
    let s = sample_user_items(&ds, 1, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(s.users, vec![0]);
    assert_eq!(s.items, vec![0, 2, 4, 6, 8]);
    assert_eq!(s.groups, vec![0; 5]);
}

#[test]
fn samples_are_disjoint_and_seed_stable() {
    let train: Vec<(usize, usize)> = (0..30)
        .flat_map(|u| (0..3).map(move |k| (u, (u * 7 + k * 11) % 40)))
        .collect();
    let ds = dataset(train, 30, 40);
    let draw = |seed| sample_user_items(&ds, 4, 100, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let s = draw(42);
    assert_eq!(s, draw(42));
    assert_eq!(s.users.len(), 4);
    let distinct: BTreeSet<usize> = s.items.iter().copied().collect();
    assert_eq!(distinct.len(), s.items.len());
    for (k, &i) in s.items.iter().enumerate() {
        assert!(ds.user_items(Split::Train, s.users[s.groups[k]]).contains(&i));
    }
}

#[test]
fn impossible_sample_is_a_sampling_error() {
    // every user shares item 0
    let ds = dataset((0..4).map(|u| (u, 0)).collect(), 4, 3);
    let err = sample_user_items(&ds, 2, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
    assert!(matches!(err, idsf::Error::Sampling(_)));
}

struct Trained {
    ds: Dataset,
    trainer: Trainer,
    item_cluster: Vec<usize>,
}

fn trained(epochs: usize) -> Trained {
    let syn = generate_synthetic(&SyntheticSpec::new(50, 200, 5, 7)).unwrap();
    let ds = split_dataset(&syn.records, SplitRatios::default(), SplitStrategy::PerUser, 7).unwrap();
    let features = ModalFeatures {
        text: Some(syn.aligned(Modality::Text, ds.items())),
        visual: Some(syn.aligned(Modality::Visual, ds.items())),
    };
    let graph = Arc::new(BipartiteGraph::build(&ds).unwrap());
    let config = ModelConfig {
        dim: 32,
        learning_rate: 0.003,
        batch_size: 128,
        seed: 7,
        ..ModelConfig::default()
    };
    let mut trainer = Trainer::new(config, graph, &features).unwrap();
    for _ in 0..epochs {
        trainer.train_epoch(&ds).unwrap();
    }
    let item_cluster = ds
        .items()
        .raw_ids()
        .iter()
        .map(|raw| syn.item_cluster[syn.item_ids.iter().position(|x| x == raw).unwrap()])
        .collect();
    Trained {
        ds,
        trainer,
        item_cluster,
    }
}

#[test]
fn exports_round_trip_with_expected_shapes() {
    let t = trained(1);
    let dir = tempfile::tempdir().unwrap();
    let model = t.trainer.model();
    for kind in EmbeddingKind::ALL {
        let m = export_embeddings(model, kind).unwrap();
        let (expected_rows, ids) = if kind.is_user_table() {
            (t.ds.user_count(), t.ds.users().raw_ids().to_vec())
        } else {
            (t.ds.item_count(), t.ds.items().raw_ids().to_vec())
        };
        assert_eq!(m.rows(), expected_rows, "{}", kind.name());
        let labels: Vec<Option<usize>> = (0..m.rows()).map(|r| (r % 3 != 0).then_some(r % 5)).collect();
        let paths = write_export(dir.path().join(format!("{}.bin", kind.name())), &m, &ids, &labels).unwrap();
        let back = read_matrix_file(&paths.matrix).unwrap();
        assert_eq!(back.shape(), m.shape());
        assert!(back
            .data()
            .iter()
            .zip(m.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(read_sidecar(&paths.ids).unwrap(), ids);
        let text = std::fs::read_to_string(&paths.labels).unwrap();
        let expect: String = labels
            .iter()
            .map(|l| l.map_or("-".into(), |g| g.to_string()) + "\n")
            .collect();
        assert_eq!(text, expect);
    }
}

/// Item-ID tables start with no cluster structure; BPR and contrastive
/// training pull same-cluster items together.
#[test]
fn training_separates_item_ids_by_cluster() {
    let gap = |t: &Trained, kind| {
        let m = export_embeddings(t.trainer.model(), kind).unwrap();
        let (within, across) = group_similarity_means(&similarity_matrix(&m), &t.item_cluster);
        let sample = sample_user_items(&t.ds, 5, 100, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let sub = similarity_matrix(&m.select_rows(&sample.items));
        let (uw, ua) = group_similarity_means(&sub, &sample.groups);
        (within - across, uw - ua)
    };
    let (fresh, done) = (trained(0), trained(30));
    for kind in [EmbeddingKind::ItemIdText, EmbeddingKind::ItemIdVisual] {
        let (before, _) = gap(&fresh, kind);
        let (clusters, users) = gap(&done, kind);
        assert!(before.abs() < 0.02, "{}: untrained gap {before}", kind.name());
        assert!(clusters > 0.1, "{}: cluster gap {clusters}", kind.name());
        assert!(users > 0.1, "{}: sampled-user gap {users}", kind.name());
    }
}
