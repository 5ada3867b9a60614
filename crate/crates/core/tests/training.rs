use std::collections::HashMap;
use std::sync::Arc;

use idsf::data::{
    generate_synthetic, split_dataset, Dataset, IdMap, Modality, Split, SplitRatios, SplitStrategy, SyntheticSpec,
};
use idsf::eval::evaluate;
use idsf::graph::BipartiteGraph;
use idsf::model::{Idsf, ModalFeatures, ModelConfig};
use idsf::train::{sample_triples, Decision, EarlyStopping, TrainConfig, Trainer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    ds: Dataset,
    graph: Arc<BipartiteGraph>,
    features: ModalFeatures,
}

fn fixture() -> Fixture {
    let syn = generate_synthetic(&SyntheticSpec::new(30, 60, 3, 21)).unwrap();
    let ds = split_dataset(&syn.records, SplitRatios::default(), SplitStrategy::PerUser, 21).unwrap();
    let features = ModalFeatures {
        text: Some(syn.aligned(Modality::Text, ds.items())),
        visual: Some(syn.aligned(Modality::Visual, ds.items())),
    };
    let graph = Arc::new(BipartiteGraph::build(&ds).unwrap());
    Fixture { ds, graph, features }
}

fn config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        batch_size: 64,
        learning_rate: 0.01,
        ..ModelConfig::default()
    }
}

proptest! {
    /// The reported best is the running maximum, and stopping happens exactly
    /// after `patience` non-improving epochs.
    #[test]
    fn early_stopping_tracks_the_running_best(
        values in prop::collection::vec(0.0f64..1.0, 1..40),
        patience in 1usize..6,
    ) {
        let mut es = EarlyStopping::new(patience);
        let mut best = f64::NEG_INFINITY;
        let mut since = 0;
        for (epoch, &v) in values.iter().enumerate() {
            let d = es.observe(epoch + 1, v);
            if v > best {
                best = v;
                since = 0;
                prop_assert_eq!(d, Decision::Improved);
            } else {
                since += 1;
                prop_assert_eq!(d, if since >= patience { Decision::Stop } else { Decision::Continue });
            }
            prop_assert_eq!(es.best().unwrap().1, best);
            if d == Decision::Stop {
                break;
            }
        }
    }
}

#[test]
fn sampler_covers_each_edge_once_with_uniform_negatives() {
    let items = 24;
    let positives = [0usize, 5, 9, 17];
    let ds = Dataset::from_splits(
        IdMap::from_ids(["u"]),
        IdMap::from_ids((0..items).map(|i| format!("i{i:02}"))),
        positives.iter().map(|&i| (0, i)).collect(),
        vec![],
        vec![],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let epochs = 100000;
    for _ in 0..epochs {
        let triples = sample_triples(&ds, &mut rng);
        let mut pos: Vec<usize> = triples.iter().map(|t| t.1).collect();
        pos.sort_unstable();
        assert_eq!(pos, positives);
        for t in triples {
            assert!(!positives.contains(&t.2));
            *counts.entry(t.2).or_default() += 1;
        }
    }
    let draws = (epochs * positives.len()) as f64;
    let p = 1.0 / (items - positives.len()) as f64;
    let (mean, sd) = (draws * p, (draws * p * (1.0 - p)).sqrt());
    assert_eq!(counts.len(), items - positives.len());
    for (item, &c) in &counts {
        assert!(
            (c as f64 - mean).abs() < 3.0 * sd,
            "item {item}: {c} draws, expected {mean:.0} ± {sd:.0}"
        );
    }
}

#[test]
fn training_lowers_the_loss() {
    let fx = fixture();
    let mut trainer = Trainer::new(config(), fx.graph.clone(), &fx.features).unwrap();
    let losses: Vec<f64> = (0..15).map(|_| trainer.train_epoch(&fx.ds).unwrap()).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[14] < losses[0], "{losses:?}");
}

#[test]
fn same_seed_same_trajectory() {
    let fx = fixture();
    let limits = TrainConfig {
        max_epochs: 6,
        patience: 3,
    };
    let run = || {
        let mut t = Trainer::new(config(), fx.graph.clone(), &fx.features).unwrap();
        let fit = t.fit(&fx.ds, &limits, None).unwrap();
        let hist: Vec<(u64, u64)> = fit
            .history
            .iter()
            .map(|r| (r.loss.to_bits(), r.recall20.to_bits()))
            .collect();
        let params: Vec<u32> = t
            .model()
            .params()
            .iter()
            .flat_map(|(_, _, p)| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        (hist, params)
    };
    assert_eq!(run(), run());
}

#[test]
fn best_parameters_reproduce_best_validation_recall() {
    let fx = fixture();
    let mut t = Trainer::new(config(), fx.graph.clone(), &fx.features).unwrap();
    let limits = TrainConfig {
        max_epochs: 12,
        patience: 2,
    };
    let fit = t.fit(&fx.ds, &limits, None).unwrap();
    let best = fit.history.iter().find(|r| r.epoch == fit.best_epoch).unwrap();
    assert_eq!(best.recall20, fit.best_recall20);
    assert!(fit.history.iter().all(|r| r.recall20 <= fit.best_recall20));
    if fit.stopped_early {
        assert_eq!(fit.history.len(), fit.best_epoch + limits.patience);
    }
    let model = Idsf::from_store(config(), fx.graph.clone(), &fx.features, fit.best_params.clone()).unwrap();
    let reps = model.representations().unwrap();
    let recall = evaluate(&reps, &fx.ds, Split::Valid, &[20])
        .unwrap()
        .recall_at(20)
        .unwrap();
    assert_eq!(recall, fit.best_recall20);
}
