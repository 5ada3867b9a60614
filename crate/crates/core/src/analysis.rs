//! Embedding analysis: per-user item samples, cosine similarity matrices,
//! top-k row filtering and labelled embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Float, Tensor};
use crate::data::{sidecar_path, write_matrix_file, write_sidecar, Dataset, Modality, Split};
use crate::error::{Error, Result};
use crate::model::Idsf;

/// Items of the sampled users, grouped in adjacent blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSample {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    /// `groups[k]` is the position in `users` that `items[k]` came from.
    pub groups: Vec<usize>,
}

/// Draws `count` users whose training items do not overlap. A user that
/// would overlap is rejected and another drawn; after `retries` full
/// reshuffles without success this is a sampling error.
pub fn sample_user_items(ds: &Dataset, count: usize, retries: usize, rng: &mut impl Rng) -> Result<UserSample> {
    if count == 0 || count > ds.user_count() {
        return Err(Error::Sampling(format!(
            "cannot sample {count} of {} users",
            ds.user_count()
        )));
    }
    let mut order: Vec<usize> = (0..ds.user_count()).collect();
    for _ in 0..retries.max(1) {
        order.shuffle(rng);
        let mut taken = vec![false; ds.item_count()];
        let mut sample = UserSample {
            users: Vec::new(),
            items: Vec::new(),
            groups: Vec::new(),
        };
        for &u in &order {
            let items = ds.user_items(Split::Train, u);
            if items.iter().any(|&i| taken[i]) {
                continue;
            }
            let g = sample.users.len();
            sample.users.push(u);
            for &i in items {
                taken[i] = true;
                sample.items.push(i);
                sample.groups.push(g);
            }
            if sample.users.len() == count {
                return Ok(sample);
            }
        }
    }
    Err(Error::Sampling(format!(
        "no {count} users with disjoint items found after {retries} attempts"
    )))
}

/// Square matrix of similarities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    /// Rows that were all zeros; their similarities are 0.
    pub zero_rows: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.n..(r + 1) * self.n]
    }

    pub fn nonzeros_in_row(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&v| v != 0.0).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.n {
            let row: Vec<String> = self.row(r).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Pairwise cosine similarity of the rows, computed once per unordered pair
/// so the result is exactly symmetric. Values are clamped to `[−1, 1]`.
pub fn similarity_matrix<T: Float>(rows: &Tensor<T>) -> SimilarityMatrix {
    let n = rows.rows();
    let norms: Vec<f64> = (0..n)
        .map(|r| rows.row(r).iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
        .collect();
    let zero_rows: Vec<usize> = (0..n).filter(|&r| norms[r] == 0.0).collect();
    if !zero_rows.is_empty() {
        log::warn!(
            "{} zero rows in similarity input; their similarities are 0",
            zero_rows.len()
        );
    }
    let mut values = vec![0.0; n * n];
    for a in 0..n {
        for b in a..n {
            if norms[a] == 0.0 || norms[b] == 0.0 {
                continue;
            }
            let dot: f64 = rows
                .row(a)
                .iter()
                .zip(rows.row(b))
                .map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy())
                .sum();
            let c = if a == b {
                1.0
            } else {
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            };
            values[a * n + b] = c;
            values[b * n + a] = c;
        }
    }
    SimilarityMatrix { n, values, zero_rows }
}

/// Keeps the `k` largest nonzero values of every row (lowest index wins
/// ties) and zeroes the rest. Zeros are never ranked, so filtering twice
/// equals filtering once.
pub fn top_k_row_filter(m: &SimilarityMatrix, k: usize) -> Result<SimilarityMatrix> {
    if k == 0 {
        return Err(Error::Contract("top-k filter needs k >= 1".into()));
    }
    let mut out = m.clone();
    for r in 0..m.n {
        let row = m.row(r);
        let mut order: Vec<usize> = (0..m.n).filter(|&c| row[c] != 0.0).collect();
        if order.len() <= k {
            continue;
        }
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &c in &order[k..] {
            out.values[r * m.n + c] = 0.0;
        }
    }
    Ok(out)
}

/// Which table to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    ItemIdText,
    ItemIdVisual,
    UserId,
    ProjectedText,
    ProjectedVisual,
    FusedContent,
    Structural,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 7] = [
        EmbeddingKind::ItemIdText,
        EmbeddingKind::ItemIdVisual,
        EmbeddingKind::UserId,
        EmbeddingKind::ProjectedText,
        EmbeddingKind::ProjectedVisual,
        EmbeddingKind::FusedContent,
        EmbeddingKind::Structural,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::ItemIdText => "item-id-t",
            EmbeddingKind::ItemIdVisual => "item-id-v",
            EmbeddingKind::UserId => "user-id",
            EmbeddingKind::ProjectedText => "projected-t",
            EmbeddingKind::ProjectedVisual => "projected-v",
            EmbeddingKind::FusedContent => "fused-c",
            EmbeddingKind::Structural => "structural-s",
        }
    }

    /// True when rows are users rather than items.
    pub fn is_user_table(self) -> bool {
        self == EmbeddingKind::UserId
    }
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmbeddingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown embedding selector `{s}`")))
    }
}

/// Reads one table out of a model. ID tables come straight from the
/// parameters; the rest from a forward pass.
pub fn export_embeddings(model: &Idsf<f32>, kind: EmbeddingKind) -> Result<Tensor<f32>> {
    let modal = |m: Modality| {
        model
            .layout()
            .modal
            .iter()
            .find(|p| p.modality == m)
            .ok_or_else(|| Error::Config(format!("model has no {m:?} modality")))
    };
    let projected = |m: Modality| -> Result<Tensor<f32>> {
        model
            .representations()?
            .projected
            .into_iter()
            .find(|(pm, _)| *pm == m)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("model has no {m:?} modality")))
    };
    let params = model.params();
    Ok(match kind {
        EmbeddingKind::ItemIdText => params.get(modal(Modality::Text)?.item_id).clone(),
        EmbeddingKind::ItemIdVisual => params.get(modal(Modality::Visual)?.item_id).clone(),
        EmbeddingKind::UserId => {
            let first = model
                .layout()
                .modal
                .first()
                .ok_or_else(|| Error::Config("model has no modality".into()))?;
            params.get(first.user_id).clone()
        }
        EmbeddingKind::ProjectedText => projected(Modality::Text)?,
        EmbeddingKind::ProjectedVisual => projected(Modality::Visual)?,
        EmbeddingKind::FusedContent => model
            .representations()?
            .content
            .ok_or_else(|| Error::Config("content path is disabled in this model".into()))?,
        EmbeddingKind::Structural => model.representations()?.item_structure,
    })
}

/// Files written by [`write_export`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportPaths {
    pub matrix: PathBuf,
    pub ids: PathBuf,
    pub labels: PathBuf,
}

/// Writes `matrix` in the feature format with an id sidecar and a labels
/// file holding one group per row (`-` when unlabelled).
pub fn write_export(
    matrix_path: impl AsRef<Path>,
    matrix: &Tensor<f32>,
    ids: &[String],
    labels: &[Option<usize>],
) -> Result<ExportPaths> {
    let matrix_path = matrix_path.as_ref();
    if ids.len() != matrix.rows() || labels.len() != matrix.rows() {
        return Err(Error::dim(
            "write_export",
            format!("{} rows, {} ids, {} labels", matrix.rows(), ids.len(), labels.len()),
        ));
    }
    if let Some(parent) = matrix_path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_matrix_file(matrix_path, matrix)?;
    let ids_path = sidecar_path(matrix_path);
    write_sidecar(&ids_path, ids)?;
    let labels_path = matrix_path.with_extension("labels");
    let text: String = labels
        .iter()
        .map(|l| l.map_or_else(|| "-".to_string(), |g| g.to_string()) + "\n")
        .collect();
    fs::write(&labels_path, text)?;
    Ok(ExportPaths {
        matrix: matrix_path.to_path_buf(),
        ids: ids_path,
        labels: labels_path,
    })
}

/// Mean similarity of same-group pairs and of cross-group pairs, diagonal
/// excluded.
pub fn group_similarity_means(m: &SimilarityMatrix, groups: &[usize]) -> (f64, f64) {
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..m.n {
        for b in (a + 1)..m.n {
            if groups[a] == groups[b] {
                within += m.get(a, b);
                nw += 1;
            } else {
                across += m.get(a, b);
                na += 1;
            }
        }
    }
    (within / nw.max(1) as f64, across / na.max(1) as f64)
}
