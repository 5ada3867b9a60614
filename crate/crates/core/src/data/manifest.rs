use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::{Dataset, IdMap, Split, SplitRatios, SplitStrategy};
use crate::error::Result;

/// Serializable record of a split so training and evaluation see the same
/// edges. Edges are dense `[user, item]` pairs into `users` / `items`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub strategy: SplitStrategy,
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub train: Vec<[usize; 2]>,
    pub valid: Vec<[usize; 2]>,
    pub test: Vec<[usize; 2]>,
}

impl SplitManifest {
    pub fn from_dataset(ds: &Dataset, seed: u64, ratios: SplitRatios, strategy: SplitStrategy) -> Self {
        let pairs = |s| ds.edges(s).iter().map(|&(u, i)| [u, i]).collect();
        SplitManifest {
            seed,
            ratios,
            strategy,
            users: ds.users().raw_ids().to_vec(),
            items: ds.items().raw_ids().to_vec(),
            train: pairs(Split::Train),
            valid: pairs(Split::Valid),
            test: pairs(Split::Test),
        }
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let edges = |v: &[[usize; 2]]| v.iter().map(|&[u, i]| (u, i)).collect();
        Dataset::from_splits(
            IdMap::from_sorted(self.users.clone()),
            IdMap::from_sorted(self.items.clone()),
            edges(&self.train),
            edges(&self.valid),
            edges(&self.test),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
