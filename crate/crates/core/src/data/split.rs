use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::InteractionRecord;
use crate::error::{Error, Result};

/// Dense re-indexing of raw string ids. Raw ids are sorted, so the mapping
/// does not depend on the order records arrive in.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    raw: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = ids.into_iter().map(Into::into).collect();
        Self::from_sorted(set.into_iter().collect())
    }

    /// Uses `raw` as given; position is the dense index.
    pub fn from_sorted(raw: Vec<String>) -> Self {
        let index = raw.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        IdMap { raw, index }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn get(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn raw(&self, dense: usize) -> &str {
        &self.raw[dense]
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Each user's interactions are shuffled and divided separately.
    #[default]
    PerUser,
    /// All interactions are shuffled and divided together.
    Global,
}

/// Split proportions (train, valid, test).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios(pub [f64; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios([0.8, 0.1, 0.1])
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.0;
        if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {:?} must be in [0,1] and sum to 1",
                self.0
            )));
        }
        Ok(())
    }
}

type Edge = (usize, usize);

/// Users, items and their train/valid/test interactions, densely indexed.
#[derive(Clone, Debug)]
pub struct Dataset {
    users: IdMap,
    items: IdMap,
    edges: [Vec<Edge>; 3],
    user_items: [Vec<Vec<usize>>; 3],
    item_users_train: Vec<Vec<usize>>,
}

fn slot(split: Split) -> usize {
    match split {
        Split::Train => 0,
        Split::Valid => 1,
        Split::Test => 2,
    }
}

impl Dataset {
    /// Assembles a dataset from explicit edge lists, validating indices,
    /// disjointness and that every user has a training interaction.
    pub fn from_splits(
        users: IdMap,
        items: IdMap,
        train: Vec<Edge>,
        valid: Vec<Edge>,
        test: Vec<Edge>,
    ) -> Result<Self> {
        let (nu, ni) = (users.len(), items.len());
        let mut seen = std::collections::HashSet::new();
        for &(u, i) in train.iter().chain(&valid).chain(&test) {
            if u >= nu || i >= ni {
                return Err(Error::Contract(format!(
                    "edge ({u},{i}) outside {nu} users x {ni} items"
                )));
            }
            if !seen.insert((u, i)) {
                return Err(Error::Contract(format!(
                    "edge ({u},{i}) appears in more than one split"
                )));
            }
        }
        let mut edges = [train, valid, test];
        for e in &mut edges {
            e.sort_unstable();
        }
        let user_items = edges.clone().map(|list| {
            let mut per_user = vec![Vec::new(); nu];
            for (u, i) in list {
                per_user[u].push(i);
            }
            per_user
        });
        if let Some(u) = user_items[0].iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!(
                "user `{}` has no training interactions",
                users.raw(u)
            )));
        }
        let mut item_users_train = vec![Vec::new(); ni];
        for &(u, i) in &edges[0] {
            item_users_train[i].push(u);
        }
        Ok(Dataset {
            users,
            items,
            edges,
            user_items,
            item_users_train,
        })
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn users(&self) -> &IdMap {
        &self.users
    }

    pub fn items(&self) -> &IdMap {
        &self.items
    }

    /// Edges of one split, sorted by (user, item).
    pub fn edges(&self, split: Split) -> &[Edge] {
        &self.edges[slot(split)]
    }

    /// Sorted items of `user` in `split`.
    pub fn user_items(&self, split: Split, user: usize) -> &[usize] {
        &self.user_items[slot(split)][user]
    }

    /// Sorted training users of `item`.
    pub fn item_users(&self, item: usize) -> &[usize] {
        &self.item_users_train[item]
    }

    pub fn interaction_count(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }
}

/// Splits interactions with a seeded shuffle.
///
/// Per-user: users with fewer than three interactions keep all of them in
/// training; otherwise `floor(n·r)` go to validation and test and the
/// remainder to training. Global: the same rounding over all interactions,
/// then users left without training data are dropped.
pub fn split_dataset(
    records: &[InteractionRecord],
    ratios: SplitRatios,
    strategy: SplitStrategy,
    seed: u64,
) -> Result<Dataset> {
    split_dataset_with_catalog(records, &[], ratios, strategy, seed)
}

/// Like [`split_dataset`], with `catalog` items added even when nobody
/// interacted with them, so they are still ranked at evaluation time. The
/// split itself is unchanged by the extra items.
pub fn split_dataset_with_catalog(
    records: &[InteractionRecord],
    catalog: &[String],
    ratios: SplitRatios,
    strategy: SplitStrategy,
    seed: u64,
) -> Result<Dataset> {
    ratios.validate()?;
    if records.is_empty() {
        return Err(Error::Contract("no interactions to split".into()));
    }
    let users = IdMap::from_ids(records.iter().map(|r| r.user.as_str()));
    let items = IdMap::from_ids(
        records
            .iter()
            .map(|r| r.item.as_str())
            .chain(catalog.iter().map(String::as_str)),
    );
    let mut all: Vec<Edge> = records
        .iter()
        .map(|r| (users.get(&r.user).unwrap(), items.get(&r.item).unwrap()))
        .collect();
    all.sort_unstable();
    all.dedup();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [_, rv, rt] = ratios.0;
    let count = |n: usize, r: f64| (n as f64 * r + 1e-9).floor() as usize;
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());

    match strategy {
        SplitStrategy::PerUser => {
            let mut start = 0;
            while start < all.len() {
                let u = all[start].0;
                let end = start + all[start..].iter().take_while(|e| e.0 == u).count();
                let mut mine: Vec<usize> = all[start..end].iter().map(|e| e.1).collect();
                start = end;
                let n = mine.len();
                if n < 3 {
                    train.extend(mine.into_iter().map(|i| (u, i)));
                    continue;
                }
                mine.shuffle(&mut rng);
                let (nt, nv) = (count(n, rt), count(n, rv));
                test.extend(mine[..nt].iter().map(|&i| (u, i)));
                valid.extend(mine[nt..nt + nv].iter().map(|&i| (u, i)));
                train.extend(mine[nt + nv..].iter().map(|&i| (u, i)));
            }
            Dataset::from_splits(users, items, train, valid, test)
        }
        SplitStrategy::Global => {
            let n = all.len();
            all.shuffle(&mut rng);
            let (nt, nv) = (count(n, rt), count(n, rv));
            test.extend_from_slice(&all[..nt]);
            valid.extend_from_slice(&all[nt..nt + nv]);
            train.extend_from_slice(&all[nt + nv..]);
            drop_users_without_training(users, items, train, valid, test)
        }
    }
}

fn drop_users_without_training(
    users: IdMap,
    items: IdMap,
    train: Vec<Edge>,
    valid: Vec<Edge>,
    test: Vec<Edge>,
) -> Result<Dataset> {
    let mut has_train = vec![false; users.len()];
    for &(u, _) in &train {
        has_train[u] = true;
    }
    let dropped = has_train.iter().filter(|&&k| !k).count();
    if dropped == 0 {
        return Dataset::from_splits(users, items, train, valid, test);
    }
    log::warn!("dropping {dropped} users with no training interactions");
    let kept: Vec<String> = users
        .raw_ids()
        .iter()
        .zip(&has_train)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    let remap: HashMap<usize, usize> = (0..users.len())
        .filter(|&u| has_train[u])
        .enumerate()
        .map(|(new, old)| (old, new))
        .collect();
    let keep = |list: Vec<Edge>| -> Vec<Edge> {
        list.into_iter()
            .filter_map(|(u, i)| remap.get(&u).map(|&nu| (nu, i)))
            .collect()
    };
    Dataset::from_splits(IdMap::from_sorted(kept), items, keep(train), keep(valid), keep(test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records_for(user: &str, n: usize) -> Vec<InteractionRecord> {
        (0..n)
            .map(|i| InteractionRecord::new(user, format!("i{i:02}")))
            .collect()
    }

    #[test]
    fn ten_interactions_split_eight_one_one() {
        let ds = split_dataset(&records_for("u", 10), SplitRatios::default(), SplitStrategy::PerUser, 1).unwrap();
        assert_eq!(ds.edges(Split::Train).len(), 8);
        assert_eq!(ds.edges(Split::Valid).len(), 1);
        assert_eq!(ds.edges(Split::Test).len(), 1);
    }

    #[test]
    fn catalog_items_join_without_changing_the_split() {
        let records = records_for("u", 10);
        let plain = split_dataset(&records, SplitRatios::default(), SplitStrategy::PerUser, 3).unwrap();
        let extra = vec!["a-first".to_string(), "zz-last".to_string()];
        let wide =
            split_dataset_with_catalog(&records, &extra, SplitRatios::default(), SplitStrategy::PerUser, 3).unwrap();
        assert_eq!(wide.item_count(), plain.item_count() + 2);
        let raw = |ds: &Dataset, s| -> Vec<String> {
            ds.edges(s)
                .iter()
                .map(|&(_, i)| ds.items().raw(i).to_string())
                .collect()
        };
        for s in [Split::Train, Split::Valid, Split::Test] {
            assert_eq!(raw(&plain, s), raw(&wide, s));
        }
    }

    #[test]
    fn tiny_users_stay_in_train() {
        let ds = split_dataset(&records_for("u", 2), SplitRatios::default(), SplitStrategy::PerUser, 1).unwrap();
        assert_eq!(ds.edges(Split::Train).len(), 2);
        assert!(ds.edges(Split::Valid).is_empty());
        assert!(ds.edges(Split::Test).is_empty());
    }

    #[test]
    fn same_seed_same_split() {
        let mut recs = records_for("a", 17);
        recs.extend(records_for("b", 9));
        let a = split_dataset(&recs, SplitRatios::default(), SplitStrategy::PerUser, 5).unwrap();
        let b = split_dataset(&recs, SplitRatios::default(), SplitStrategy::PerUser, 5).unwrap();
        for s in [Split::Train, Split::Valid, Split::Test] {
            assert_eq!(a.edges(s), b.edges(s));
        }
    }

    #[test]
    fn ratios_must_sum_to_one() {
        let err = split_dataset(
            &records_for("u", 5),
            SplitRatios([0.5, 0.1, 0.1]),
            SplitStrategy::PerUser,
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn global_split_drops_users_without_training() {
        let mut recs = records_for("a", 30);
        recs.push(InteractionRecord::new("z", "i00"));
        // whichever seed puts z's only edge outside train must drop z
        for seed in 0..40 {
            let ds = split_dataset(&recs, SplitRatios::default(), SplitStrategy::Global, seed).unwrap();
            for u in 0..ds.user_count() {
                assert!(!ds.user_items(Split::Train, u).is_empty());
            }
        }
    }

    #[test]
    fn overlapping_splits_rejected() {
        let users = IdMap::from_ids(["u"]);
        let items = IdMap::from_ids(["i"]);
        let err = Dataset::from_splits(users, items, vec![(0, 0)], vec![(0, 0)], vec![]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
