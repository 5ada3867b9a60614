//! Clustered synthetic interactions with informative modal features.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::Modality;
use super::records::InteractionRecord;
use super::split::IdMap;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Generator settings. Only the first four are usually varied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub seed: u64,
    pub text_dim: usize,
    pub visual_dim: usize,
    /// Target interactions per user.
    pub interactions_per_user: usize,
    /// Probability an interaction stays inside the user's cluster.
    pub in_cluster: f64,
    /// Standard deviation of feature noise around each cluster centroid.
    pub noise: f64,
    /// Width of the per-item latent factor shared by both modalities.
    pub latent_dim: usize,
    /// How strongly a user's taste over the latent factor steers choices
    /// inside their cluster; 0 makes in-cluster choices uniform.
    pub taste: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 50,
            items: 200,
            clusters: 5,
            seed: 7,
            text_dim: 24,
            visual_dim: 32,
            interactions_per_user: 10,
            in_cluster: 0.9,
            noise: 0.6,
            latent_dim: 4,
            taste: 2.0,
        }
    }
}

impl SyntheticSpec {
    pub fn new(users: usize, items: usize, clusters: usize, seed: u64) -> Self {
        SyntheticSpec {
            users,
            items,
            clusters,
            seed,
            ..Default::default()
        }
    }
}

/// Output of [`generate_synthetic`]. Feature rows follow `item_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub records: Vec<InteractionRecord>,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub text: Tensor<f32>,
    pub visual: Tensor<f32>,
    pub item_cluster: Vec<usize>,
    pub user_cluster: Vec<usize>,
}

impl SyntheticData {
    /// Feature rows for the items of `items`, in dense order.
    pub fn aligned(&self, modality: Modality, items: &IdMap) -> Tensor<f32> {
        let table = match modality {
            Modality::Text => &self.text,
            Modality::Visual => &self.visual,
        };
        let index: Vec<usize> = items
            .raw_ids()
            .iter()
            .map(|raw| raw[1..].parse::<usize>().expect("synthetic item ids are numeric"))
            .collect();
        table.select_rows(&index)
    }
}

pub fn user_id(u: usize) -> String {
    format!("u{u:06}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i:06}")
}

/// Items are dealt round-robin into clusters; each user belongs to one
/// cluster and mostly interacts inside it. Both feature tables are
/// cluster centroid plus noise, with independent centroids per modality.
/// Part of the noise is a per-item latent factor common to both tables;
/// inside their cluster, users favour items whose latent factor matches
/// their own taste vector.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.clusters == 0 || spec.clusters > spec.items {
        return Err(Error::Config(format!(
            "cluster count {} must be in 1..={}",
            spec.clusters, spec.items
        )));
    }
    if spec.users == 0 || spec.interactions_per_user == 0 {
        return Err(Error::Config("need at least one user and one interaction each".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let item_cluster: Vec<usize> = (0..spec.items).map(|i| i % spec.clusters).collect();
    let members: Vec<Vec<usize>> = (0..spec.clusters)
        .map(|c| (0..spec.items).filter(|&i| item_cluster[i] == c).collect())
        .collect();
    let k = spec.latent_dim;
    let gauss = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
    let latent: Vec<Vec<f64>> = (0..spec.items).map(|_| gauss(&mut rng, k)).collect();

    // centroid + (projected latent + isotropic noise) · noise
    let features = |dim: usize, rng: &mut ChaCha8Rng| {
        let centroids: Vec<Vec<f64>> = (0..spec.clusters).map(|_| gauss(rng, dim)).collect();
        let scale = 1.0 / (k.max(1) as f64).sqrt();
        let projection: Vec<Vec<f64>> = (0..k).map(|_| gauss(rng, dim)).collect();
        Tensor::from_fn(spec.items, dim, |i, d| {
            let n: f64 = StandardNormal.sample(rng);
            let shared: f64 = (0..k).map(|j| latent[i][j] * projection[j][d]).sum::<f64>() * scale;
            (centroids[item_cluster[i]][d] + spec.noise * (shared + 0.5 * n)) as f32
        })
    };
    let text = features(spec.text_dim, &mut rng);
    let visual = features(spec.visual_dim, &mut rng);

    let per_user = spec.interactions_per_user.min(spec.items);
    let user_cluster: Vec<usize> = (0..spec.users).map(|u| u % spec.clusters).collect();
    let mut records = Vec::with_capacity(spec.users * per_user);
    for (u, &c) in user_cluster.iter().enumerate() {
        let taste = gauss(&mut rng, k);
        let weights: Vec<f64> = members[c]
            .iter()
            .map(|&i| {
                let affinity: f64 = taste.iter().zip(&latent[i]).map(|(a, b)| a * b).sum();
                (spec.taste * affinity / (k.max(1) as f64).sqrt()).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut chosen = BTreeSet::new();
        let mut attempts = 0;
        while chosen.len() < per_user && attempts < per_user * 100 {
            attempts += 1;
            let item = if rng.random::<f64>() < spec.in_cluster {
                let mut target = rng.random::<f64>() * total;
                let mut pick = members[c][members[c].len() - 1];
                for (&i, &w) in members[c].iter().zip(&weights) {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
                pick
            } else {
                rng.random_range(0..spec.items)
            };
            chosen.insert(item);
        }
        records.extend(
            chosen
                .into_iter()
                .map(|i| InteractionRecord::new(user_id(u), item_id(i))),
        );
    }

    Ok(SyntheticData {
        records,
        user_ids: (0..spec.users).map(user_id).collect(),
        item_ids: (0..spec.items).map(item_id).collect(),
        text,
        visual,
        item_cluster,
        user_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f32], b: &[f32]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = SyntheticSpec::new(50, 100, 5, 7);
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn single_cluster_shares_one_centroid() {
        let data = generate_synthetic(&SyntheticSpec::new(10, 30, 1, 3)).unwrap();
        assert!(data.item_cluster.iter().all(|&c| c == 0));
    }

    #[test]
    fn within_cluster_features_are_more_similar() {
        let data = generate_synthetic(&SyntheticSpec::new(50, 100, 5, 7)).unwrap();
        for table in [&data.text, &data.visual] {
            let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
            for i in 0..100 {
                for j in (i + 1)..100 {
                    let c = cosine(table.row(i), table.row(j));
                    if data.item_cluster[i] == data.item_cluster[j] {
                        within += c;
                        nw += 1;
                    } else {
                        across += c;
                        na += 1;
                    }
                }
            }
            assert!(within / nw as f64 > across / na as f64);
        }
    }

    #[test]
    fn too_many_clusters_rejected() {
        assert!(generate_synthetic(&SyntheticSpec::new(5, 3, 4, 0)).is_err());
    }
}
