//! Full-catalog top-K ranking and Recall / Precision / NDCG.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tensor};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Representations;
use crate::par;

pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// Anything that scores the whole catalog for a user.
pub trait Scorer: Sync {
    fn user_count(&self) -> usize;
    fn item_count(&self) -> usize;
    /// Writes one score per item into `out` (length `item_count`).
    fn score_user(&self, user: usize, out: &mut [f64]);
}

impl<T: Float> Scorer for Representations<T> {
    fn user_count(&self) -> usize {
        Representations::user_count(self)
    }

    fn item_count(&self) -> usize {
        Representations::item_count(self)
    }

    fn score_user(&self, user: usize, out: &mut [f64]) {
        self.scores(user, out)
    }
}

/// A precomputed `users × items` score matrix.
impl Scorer for Tensor<f64> {
    fn user_count(&self) -> usize {
        self.rows()
    }

    fn item_count(&self) -> usize {
        self.cols()
    }

    fn score_user(&self, user: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(user));
    }
}

/// Higher score first, then lower index. Masked items compare as −∞.
fn before(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Every item in rank order. Items in `masked` get −∞ and so sink to the
/// end (in ascending index order among themselves).
pub fn rank_items(scores: &[f64], masked: &[&[usize]]) -> Vec<usize> {
    let mut s = scores.to_vec();
    for list in masked {
        for &i in *list {
            s[i] = f64::NEG_INFINITY;
        }
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| before(&s, a, b));
    order
}

/// The first `k` unmasked items in rank order.
pub fn top_k(scores: &[f64], masked: &[&[usize]], k: usize) -> Vec<usize> {
    let mut hidden = vec![false; scores.len()];
    for list in masked {
        for &i in *list {
            hidden[i] = true;
        }
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !hidden[i]).collect();
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| before(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_by(|&a, &b| before(scores, a, b));
    candidates
}

/// Metrics of one ranked list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

/// `None` when `positives` is empty (the user is not evaluable).
/// `positives` must be sorted ascending.
pub fn metrics_at_k(ranked: &[usize], positives: &[usize], k: usize) -> Option<Metrics> {
    if positives.is_empty() || k == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (r, item) in ranked.iter().take(k).enumerate() {
        if positives.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(positives.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Some(Metrics {
        recall: hits as f64 / positives.len() as f64,
        precision: hits as f64 / k as f64,
        ndcg: dcg / idcg,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Mean metrics over evaluable users, as fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub at: Vec<MetricsAtK>,
    pub evaluated_users: usize,
    pub skipped_users: usize,
    pub wall_time_s: f64,
    /// Protocol choices, recorded so the numbers can be interpreted.
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn get(&self, k: usize) -> Option<&Metrics> {
        self.at.iter().find(|m| m.k == k).map(|m| &m.metrics)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.get(k).map(|m| m.recall)
    }

    /// Aligned table, one metric per row, values ×100.
    pub fn to_table(&self, label: &str) -> String {
        let mut rows = Vec::new();
        for m in &self.at {
            rows.push((format!("Recall@{}", m.k), m.metrics.recall));
            rows.push((format!("Precision@{}", m.k), m.metrics.precision));
            rows.push((format!("NDCG@{}", m.k), m.metrics.ndcg));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>10}", "Metric(x100%)", label, width = width.max(13));
        for (name, v) in rows {
            let _ = writeln!(out, "{:<width$}  {:>10.3}", name, v * 100.0, width = width.max(13));
        }
        out
    }

    /// `[R@10, P@10, N@10, R@20, P@20, N@20]` as fractions; missing cut-offs
    /// give NaN.
    pub fn comparison_row(&self) -> [f64; 6] {
        let m = |k| self.get(k).copied();
        let f = |k, pick: fn(&Metrics) -> f64| m(k).as_ref().map_or(f64::NAN, pick);
        [
            f(10, |x| x.recall),
            f(10, |x| x.precision),
            f(10, |x| x.ndcg),
            f(20, |x| x.recall),
            f(20, |x| x.precision),
            f(20, |x| x.ndcg),
        ]
    }
}

/// Column headers of [`comparison_table`].
pub const COMPARISON_COLUMNS: [&str; 6] = ["R@10", "P@10", "N@10", "R@20", "P@20", "N@20"];

/// One row per labelled report, values ×100.
pub fn comparison_table(rows: &[(String, &EvalReport)]) -> String {
    let width = rows
        .iter()
        .map(|r| r.0.len())
        .max()
        .unwrap_or(0)
        .max("Metric(x100%)".len());
    let mut out = format!("{:<width$}", "Metric(x100%)");
    for c in COMPARISON_COLUMNS {
        let _ = write!(out, "  {c:>8}");
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:<width$}");
        for v in report.comparison_row() {
            let _ = write!(out, "  {:>8.3}", v * 100.0);
        }
        out.push('\n');
    }
    out
}

pub fn protocol_notes() -> Vec<String> {
    vec![
        "all-item ranking over the full catalog".into(),
        "training positives masked; validation positives also masked on test".into(),
        "ties broken by ascending item index".into(),
        "IDCG truncated at min(K, |positives|)".into(),
    ]
}

/// Ranks the catalog for every user with positives in `split` and
/// averages metrics in ascending user order.
pub fn evaluate(scorer: &impl Scorer, ds: &Dataset, split: Split, ks: &[usize]) -> Result<EvalReport> {
    if split == Split::Train {
        return Err(Error::Contract(
            "evaluation runs on the validation or test split".into(),
        ));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Contract("cut-offs must be positive".into()));
    }
    if scorer.user_count() != ds.user_count() || scorer.item_count() != ds.item_count() {
        return Err(Error::dim(
            "evaluate",
            format!(
                "scorer covers {}x{}, dataset has {}x{}",
                scorer.user_count(),
                scorer.item_count(),
                ds.user_count(),
                ds.item_count()
            ),
        ));
    }
    let start = Instant::now();
    let kmax = *ks.iter().max().expect("non-empty");
    let per_user: Vec<Option<Vec<Metrics>>> = par::map_range(ds.user_count(), |u| {
        let positives = ds.user_items(split, u);
        if positives.is_empty() {
            return None;
        }
        let mut scores = vec![0.0; ds.item_count()];
        scorer.score_user(u, &mut scores);
        let train = ds.user_items(Split::Train, u);
        let valid = ds.user_items(Split::Valid, u);
        let masked: Vec<&[usize]> = if split == Split::Test {
            vec![train, valid]
        } else {
            vec![train]
        };
        let ranked = top_k(&scores, &masked, kmax);
        ks.iter().map(|&k| metrics_at_k(&ranked, positives, k)).collect()
    });

    let mut sums = vec![Metrics::default(); ks.len()];
    let mut evaluated = 0;
    for m in per_user.iter().flatten() {
        evaluated += 1;
        for (s, v) in sums.iter_mut().zip(m) {
            s.recall += v.recall;
            s.precision += v.precision;
            s.ndcg += v.ndcg;
        }
    }
    let n = evaluated.max(1) as f64;
    Ok(EvalReport {
        split,
        at: ks
            .iter()
            .zip(sums)
            .map(|(&k, s)| MetricsAtK {
                k,
                metrics: Metrics {
                    recall: s.recall / n,
                    precision: s.precision / n,
                    ndcg: s.ndcg / n,
                },
            })
            .collect(),
        evaluated_users: evaluated,
        skipped_users: ds.user_count() - evaluated,
        wall_time_s: start.elapsed().as_secs_f64(),
        notes: protocol_notes(),
        config: None,
    })
}
