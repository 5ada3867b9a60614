//! Uniform BPR triple sampling.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Dataset, Split};

/// `(user, positive, negative)`.
pub type Triple = (usize, usize, usize);

/// One epoch of triples: each training edge once, in shuffled order, with a
/// negative drawn uniformly from the items the user has not trained on.
/// Users whose positives cover the whole catalog are skipped with a warning.
pub fn sample_triples(ds: &Dataset, rng: &mut impl Rng) -> Vec<Triple> {
    let n_items = ds.item_count();
    let mut saturated = BTreeSet::new();
    let mut out = Vec::with_capacity(ds.edges(Split::Train).len());
    for &(u, i) in ds.edges(Split::Train) {
        let positives = ds.user_items(Split::Train, u);
        if positives.len() >= n_items {
            saturated.insert(u);
            continue;
        }
        let j = loop {
            let j = rng.random_range(0..n_items);
            if positives.binary_search(&j).is_err() {
                break j;
            }
        };
        out.push((u, i, j));
    }
    for u in saturated {
        log::warn!(
            "user `{}` has interacted with every item; no negatives, skipped",
            ds.users().raw(u)
        );
    }
    out.shuffle(rng);
    out
}
