//! Contrastive alignment between representations before and after fusion.
//!
//! For an anchor row `e_i^m` and its fused counterpart `e_i^f`:
//!
//! ```text
//! I(e^m, e^f)_i = log( P_i / (P_i + N_i) )
//! P_i = exp(cos(e_i^m, e_i^f) / τ)
//! N_i = Σ_{j≠i} exp(cos(e_i^m, e_j^f) / τ) + exp(cos(e_i^m, e_j^m) / τ)
//! ```
//!
//! computed as `cos(e_i^m, e_i^f)/τ − logsumexp(...)` over the positive and
//! all negatives. Swapping roles gives `I(e^f, e^m)` with mirrored negatives.

use crate::autodiff::{Float, Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::ContentState;
use crate::model::TemperaturePlacement;

/// Temperature and where it is applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub tau: f64,
    pub placement: TemperaturePlacement,
}

impl Temperature {
    pub fn scaled(tau: f64) -> Self {
        Temperature {
            tau,
            placement: TemperaturePlacement::Scaled,
        }
    }

    fn logit_scale(&self) -> f64 {
        match self.placement {
            TemperaturePlacement::Scaled => 1.0 / self.tau,
            // exp(f)/τ over a sum of exp(f)/τ: τ cancels
            TemperaturePlacement::Literal => 1.0,
        }
    }
}

/// Rows a term is evaluated on, plus where negatives come from.
///
/// `candidate_positive` / `candidate_anchor` are the pools negatives are
/// drawn from and `self_index[r]` is row `r`'s own position in those pools.
pub struct TermRows<'a> {
    pub anchor: Var,
    pub candidate_positive: Var,
    pub candidate_anchor: Var,
    pub self_index: &'a [usize],
}

/// Mean of `I(anchor, positive)` over the rows.
pub fn mutual_info_term<T: Float>(tape: &mut Tape<T>, rows: &TermRows<'_>, temp: Temperature) -> Result<Var> {
    if temp.tau.is_nan() || temp.tau <= 0.0 {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {}",
            temp.tau
        )));
    }
    let n = tape.shape(rows.anchor)[0];
    let pool = tape.shape(rows.candidate_positive)[0];
    if n < 2 || pool < 2 {
        return Err(Error::Contract(format!(
            "contrastive batch needs at least two items, got {n} rows and {pool} candidates"
        )));
    }
    if rows.self_index.len() != n || rows.self_index.iter().any(|&j| j >= pool) {
        return Err(Error::Contract("self index does not match the candidate pool".into()));
    }
    if tape.shape(rows.candidate_anchor)[0] != pool {
        return Err(Error::dim("mutual_info_term", "candidate pools differ in size"));
    }
    let scale = temp.logit_scale();
    let to_positive = tape.cosine(rows.anchor, rows.candidate_positive)?;
    let to_positive = tape.scale(to_positive, scale)?;
    let to_anchor = tape.cosine(rows.anchor, rows.candidate_anchor)?;
    let to_anchor = tape.scale(to_anchor, scale)?;
    let logits = tape.hcat(&[to_positive, to_anchor])?;

    // the anchor is never its own negative
    let mut excluded = vec![false; n * 2 * pool];
    for (r, &j) in rows.self_index.iter().enumerate() {
        excluded[r * 2 * pool + pool + j] = true;
    }
    let lse = tape.row_logsumexp(logits, Some(&excluded))?;
    let positive = tape.pick_cols(to_positive, rows.self_index)?;
    let info = tape.sub(positive, lse)?;
    tape.mean(info)
}

/// Rows of one `(A, B, fused)` triple.
#[derive(Clone, Copy, Debug)]
pub struct Triple {
    pub a: Var,
    pub b: Var,
    pub fused: Var,
}

/// Negative pool for a triple: either the batch itself or a larger set with
/// each batch row's position in it.
pub enum Negatives<'a> {
    InBatch,
    Pool { rows: Triple, self_index: &'a [usize] },
}

/// `−¼ · mean_i Σ_{m∈{A,B}} [I(e_i^m, e_i^f) + I(e_i^f, e_i^m)]`.
pub fn pair_loss<T: Float>(
    tape: &mut Tape<T>,
    batch: Triple,
    negatives: &Negatives<'_>,
    temp: Temperature,
) -> Result<Var> {
    let n = tape.shape(batch.a)[0];
    let identity: Vec<usize> = (0..n).collect();
    let (pool, self_index) = match negatives {
        Negatives::InBatch => (batch, identity.as_slice()),
        Negatives::Pool { rows, self_index } => (*rows, *self_index),
    };
    let mut terms = Vec::with_capacity(4);
    for (anchor, pool_anchor) in [(batch.a, pool.a), (batch.b, pool.b)] {
        terms.push(mutual_info_term(
            tape,
            &TermRows {
                anchor,
                candidate_positive: pool.fused,
                candidate_anchor: pool_anchor,
                self_index,
            },
            temp,
        )?);
        terms.push(mutual_info_term(
            tape,
            &TermRows {
                anchor: batch.fused,
                candidate_positive: pool_anchor,
                candidate_anchor: pool.fused,
                self_index,
            },
            temp,
        )?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, -0.25)
}

/// The triples a content state supports: `(t, tid, t')` and `(v, vid, v')`
/// when that modality was ID-enhanced, and `(t', v', c)` when both
/// modalities are present.
pub fn content_triples(state: &ContentState) -> Vec<Triple> {
    let mut out = Vec::new();
    for branch in [&state.text, &state.visual].into_iter().flatten() {
        if let Some(id) = branch.id {
            out.push(Triple {
                a: branch.salient,
                b: id,
                fused: branch.enhanced,
            });
        }
    }
    if let (Some(t), Some(v), Some(c)) = (&state.text, &state.visual, state.content) {
        out.push(Triple {
            a: t.enhanced,
            b: v.enhanced,
            fused: c,
        });
    }
    out
}

/// Sum of [`pair_loss`] over every triple of `batch`; `None` when the state
/// has no triples. With a pool, `pool` must come from the same fusion
/// configuration so triples line up.
pub fn total_contrastive<T: Float>(
    tape: &mut Tape<T>,
    batch: &ContentState,
    pool: Option<(&ContentState, &[usize])>,
    temp: Temperature,
) -> Result<Option<Var>> {
    let batch_triples = content_triples(batch);
    let pool_triples = pool.map(|(p, _)| content_triples(p));
    let mut total: Option<Var> = None;
    for (k, triple) in batch_triples.iter().enumerate() {
        let negatives = match (&pool_triples, pool) {
            (Some(pt), Some((_, self_index))) => Negatives::Pool {
                rows: pt[k],
                self_index,
            },
            _ => Negatives::InBatch,
        };
        let loss = pair_loss(tape, *triple, &negatives, temp)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn identical_unit_rows_give_log_one_third() {
        let mut tape = Tape::<f64>::new();
        let e = Tensor::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        let a = tape.constant(e.clone());
        let f = tape.constant(e);
        let idx = [0, 1];
        let term = mutual_info_term(
            &mut tape,
            &TermRows {
                anchor: a,
                candidate_positive: f,
                candidate_anchor: a,
                self_index: &idx,
            },
            Temperature::scaled(0.5),
        )
        .unwrap();
        assert!((tape.scalar(term).unwrap() - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let triple = Triple { a, b: a, fused: a };
        let err = pair_loss(&mut tape, triple, &Negatives::InBatch, Temperature::scaled(0.5));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn literal_placement_ignores_tau() {
        let rows = Tensor::from_rows(&[vec![1.0, 0.2], vec![-0.3, 0.9], vec![0.5, 0.5]]).unwrap();
        let fused = Tensor::from_rows(&[vec![0.8, 0.1], vec![0.0, 1.0], vec![0.4, -0.6]]).unwrap();
        let value = |tau: f64| {
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(rows.clone());
            let f = tape.constant(fused.clone());
            let temp = Temperature {
                tau,
                placement: TemperaturePlacement::Literal,
            };
            let l = pair_loss(&mut tape, Triple { a, b: a, fused: f }, &Negatives::InBatch, temp).unwrap();
            tape.scalar(l).unwrap()
        };
        assert_eq!(value(0.1), value(2.0));
    }
}
