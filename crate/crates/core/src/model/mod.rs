//! The full model: projections, content fusion, structural propagation,
//! prediction and the training objective.

mod config;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;

pub use config::{
    Ablation, AblationFlags, DatasetPreset, ModalitySet, ModelConfig, NegativeMode, TemperaturePlacement, UserLayerZero,
};

use crate::autodiff::{log_sigmoid, Float, ParamId, ParamStore, Tape, Tensor, Var};
use crate::contrastive::{total_contrastive, Temperature};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::fusion::{content_representation, AttentionParams, ContentBlocks, ContentState, ModalInput};
use crate::graph::BipartiteGraph;
use crate::propagation::{layer_mean, propagate, structural_representation, PropagationInputs};

/// Raw frozen feature tables, rows aligned to dense item indices.
#[derive(Clone, Debug, Default)]
pub struct ModalFeatures {
    pub text: Option<Tensor<f32>>,
    pub visual: Option<Tensor<f32>>,
}

impl ModalFeatures {
    pub fn get(&self, m: Modality) -> Option<&Tensor<f32>> {
        match m {
            Modality::Text => self.text.as_ref(),
            Modality::Visual => self.visual.as_ref(),
        }
    }
}

/// Parameters owned by one modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModalParams {
    pub modality: Modality,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub item_id: ParamId,
    pub user_id: ParamId,
    pub attention: AttentionParams,
}

/// Where each parameter lives in the store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub modal: Vec<ModalParams>,
    pub cross: Option<AttentionParams>,
    pub item_structure: Option<AttentionParams>,
    pub user_structure: Option<AttentionParams>,
}

impl ParamLayout {
    /// Registers every parameter in a fixed order through `make(name, rows,
    /// cols)`. Only modalities in the mask are allocated.
    fn build(
        config: &ModelConfig,
        raw_dims: &[(Modality, usize)],
        users: usize,
        items: usize,
        mut make: impl FnMut(String, usize, usize) -> Result<ParamId>,
    ) -> Result<Self> {
        let d = config.dim;
        let attention =
            |prefix: &str, make: &mut dyn FnMut(String, usize, usize) -> Result<ParamId>| -> Result<AttentionParams> {
                Ok(AttentionParams {
                    q: make(format!("{prefix}.att.q"), d, 1)?,
                    w: make(format!("{prefix}.att.w"), d, d)?,
                    b: make(format!("{prefix}.att.b"), 1, d)?,
                })
            };
        let shared_user = match config.user_layer_zero {
            UserLayerZero::SharedId => Some(make("user.id".into(), users, d)?),
            UserLayerZero::PerModality => None,
        };
        let mut modal = Vec::new();
        for &(m, raw) in raw_dims {
            let name = m_name(m);
            let proj_w = make(format!("{name}.proj.w"), raw, d)?;
            let proj_b = make(format!("{name}.proj.b"), 1, d)?;
            let item_id = make(format!("{name}.item_id"), items, d)?;
            let user_id = match shared_user {
                Some(id) => id,
                None => make(format!("{name}.user_id"), users, d)?,
            };
            let att = attention(name, &mut make)?;
            modal.push(ModalParams {
                modality: m,
                proj_w,
                proj_b,
                item_id,
                user_id,
                attention: att,
            });
        }
        let (cross, item_structure, user_structure) = if modal.len() == 2 {
            (
                Some(attention("vt", &mut make)?),
                Some(attention("structure.item", &mut make)?),
                Some(attention("structure.user", &mut make)?),
            )
        } else {
            (None, None, None)
        };
        Ok(ParamLayout {
            modal,
            cross,
            item_structure,
            user_structure,
        })
    }
}

fn m_name(m: Modality) -> &'static str {
    match m {
        Modality::Text => "text",
        Modality::Visual => "visual",
    }
}

/// Xavier-uniform bound `√(6 / (fan_in + fan_out))`.
pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// One BPR mini-batch: `(users[k], positives[k], negatives[k])`.
#[derive(Clone, Copy, Debug)]
pub struct BprBatch<'a> {
    pub users: &'a [usize],
    pub positives: &'a [usize],
    pub negatives: &'a [usize],
}

/// Tape handles of the objective's parts.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub bpr: Var,
    /// `L_C` before weighting by β, when it ran.
    pub contrastive: Option<Var>,
    /// `Σ‖θ‖²` before weighting by λ.
    pub l2: Var,
}

/// Values of [`LossTerms`] read off a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub bpr: f64,
    pub contrastive: Option<f64>,
    pub l2: f64,
}

impl LossTerms {
    pub fn values<T: Float>(&self, tape: &Tape<T>) -> LossValues {
        let get = |v: Var| tape.scalar(v).map_or(f64::NAN, |x| x.to_f64_lossy());
        LossValues {
            total: get(self.total),
            bpr: get(self.bpr),
            contrastive: self.contrastive.map(get),
            l2: get(self.l2),
        }
    }
}

/// Final and intermediate representations for every user and item.
#[derive(Clone, Debug)]
pub struct Representations<T> {
    /// `e_u^s`.
    pub users: Tensor<T>,
    /// `e_i^c + e_i^s`, or `e_i^s` without the content path.
    pub items: Tensor<T>,
    /// `e_i^c`.
    pub content: Option<Tensor<T>>,
    /// `e_i^s`.
    pub item_structure: Tensor<T>,
    /// Projected salient features `e^m`, per modality in use.
    pub projected: Vec<(Modality, Tensor<T>)>,
}

impl<T: Float> Representations<T> {
    pub fn user_count(&self) -> usize {
        self.users.rows()
    }

    pub fn item_count(&self) -> usize {
        self.items.rows()
    }

    /// Scores of every item for `user`.
    pub fn scores(&self, user: usize, out: &mut [f64]) {
        let u = self.users.row(user);
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = crate::autodiff::dot(u, self.items.row(i)).to_f64_lossy();
        }
    }
}

/// Per-tape values shared by every forward path.
struct Recorded {
    modal: Vec<RecordedModal>,
    blocks: Option<ContentBlocks>,
    item_structure: Option<crate::fusion::AttentionVars>,
    user_structure: Option<crate::fusion::AttentionVars>,
    item_means: Vec<Var>,
    user_means: Vec<Var>,
}

struct RecordedModal {
    modality: Modality,
    projected: Var,
    item_id: Var,
    attention: crate::fusion::AttentionVars,
}

/// The model: configuration, parameters, graph and frozen features.
#[derive(Clone, Debug)]
pub struct Idsf<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    layout: ParamLayout,
    graph: Arc<BipartiteGraph>,
    features: Vec<(Modality, Arc<Tensor<T>>)>,
}

impl<T: Float> Idsf<T> {
    /// Builds a model with Xavier-uniform initialization drawn from `rng`.
    pub fn new(
        config: ModelConfig,
        graph: Arc<BipartiteGraph>,
        features: &ModalFeatures,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let features = select_features(&config, &graph, features)?;
        let raw_dims: Vec<(Modality, usize)> = features.iter().map(|(m, t)| (*m, t.cols())).collect();
        let mut store = ParamStore::new();
        let layout = ParamLayout::build(
            &config,
            &raw_dims,
            graph.user_count(),
            graph.item_count(),
            |name, r, c| {
                let bound = xavier_bound(r, c);
                let t = Tensor::from_fn(r, c, |_, _| T::of(rng.random_range(-bound..bound)));
                Ok(store.add(name, t))
            },
        )?;
        Ok(Idsf {
            config,
            store,
            layout,
            graph,
            features,
        })
    }

    /// Wraps existing parameters, checking every name and shape.
    pub fn from_store(
        config: ModelConfig,
        graph: Arc<BipartiteGraph>,
        features: &ModalFeatures,
        store: ParamStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        let features = select_features(&config, &graph, features)?;
        let raw_dims: Vec<(Modality, usize)> = features.iter().map(|(m, t)| (*m, t.cols())).collect();
        let mut expected = 0;
        let layout = ParamLayout::build(
            &config,
            &raw_dims,
            graph.user_count(),
            graph.item_count(),
            |name, r, c| {
                expected += 1;
                let id = store
                    .find(&name)
                    .ok_or_else(|| Error::Config(format!("parameter `{name}` missing")))?;
                if store.get(id).shape() != [r, c] {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        store.get(id).shape(),
                        [r, c]
                    )));
                }
                Ok(id)
            },
        )?;
        if expected != store.len() {
            return Err(Error::Config(format!(
                "{} parameters given, model uses {expected}",
                store.len()
            )));
        }
        Ok(Idsf {
            config,
            store,
            layout,
            graph,
            features,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn graph(&self) -> &Arc<BipartiteGraph> {
        &self.graph
    }

    /// The same model at another precision.
    pub fn cast<U: Float>(&self) -> Idsf<U> {
        Idsf {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
            graph: Arc::clone(&self.graph),
            features: self.features.iter().map(|(m, t)| (*m, Arc::new(t.cast()))).collect(),
        }
    }

    fn record(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Recorded> {
        let cfg = &self.config;
        let gamma = cfg.effective_gamma();
        let mut modal = Vec::new();
        let mut item_means = Vec::new();
        let mut user_means = Vec::new();
        for (p, (m, raw)) in self.layout.modal.iter().zip(&self.features) {
            debug_assert_eq!(p.modality, *m);
            let x = tape.constant_shared(Arc::clone(raw));
            let w = tape.param(store, p.proj_w);
            let b = tape.param(store, p.proj_b);
            let projected = tape.matmul(x, w)?;
            let projected = tape.add_bias(projected, b)?;
            let item_id = tape.param(store, p.item_id);
            let user_id = tape.param(store, p.user_id);
            let stack = propagate(
                tape,
                &self.graph,
                &PropagationInputs {
                    item0: projected,
                    user0: user_id,
                    item_id,
                    user_id,
                    gamma,
                },
                cfg.layers,
            )?;
            item_means.push(layer_mean(tape, &stack.items)?);
            user_means.push(layer_mean(tape, &stack.users)?);
            modal.push(RecordedModal {
                modality: p.modality,
                projected,
                item_id,
                attention: p.attention.record(tape, store),
            });
        }
        let cross = self.layout.cross.map(|a| a.record(tape, store));
        let item_structure = self.layout.item_structure.map(|a| a.record(tape, store));
        let user_structure = self.layout.user_structure.map(|a| a.record(tape, store));
        // unused slots in the block set are never read
        let blocks = modal.first().map(|first| {
            let of = |m: Modality| {
                modal
                    .iter()
                    .find(|r| r.modality == m)
                    .map_or(first.attention, |r| r.attention)
            };
            ContentBlocks {
                text: of(Modality::Text),
                visual: of(Modality::Visual),
                cross: cross.unwrap_or(first.attention),
            }
        });
        Ok(Recorded {
            modal,
            blocks,
            item_structure,
            user_structure,
            item_means,
            user_means,
        })
    }

    /// Content state for `items` (all items when `None`).
    fn content(&self, tape: &mut Tape<T>, rec: &Recorded, items: Option<&[usize]>) -> Result<ContentState> {
        let use_ids = self.config.content_uses_ids();
        let rows = |tape: &mut Tape<T>, v: Var| match items {
            Some(idx) => tape.gather(v, idx),
            None => Ok(v),
        };
        let mut inputs: [Option<ModalInput>; 2] = [None, None];
        for r in &rec.modal {
            let salient = rows(tape, r.projected)?;
            let id = if use_ids { Some(rows(tape, r.item_id)?) } else { None };
            let slot = match r.modality {
                Modality::Text => 0,
                Modality::Visual => 1,
            };
            inputs[slot] = Some(ModalInput { salient, id });
        }
        let blocks = rec
            .blocks
            .as_ref()
            .ok_or_else(|| Error::Config("no modality available".into()))?;
        let [text, visual] = inputs;
        content_representation(tape, blocks, text, visual)
    }

    fn structure_rows(
        tape: &mut Tape<T>,
        means: &[Var],
        block: Option<&crate::fusion::AttentionVars>,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        let mut picked = Vec::with_capacity(means.len());
        for &m in means {
            picked.push(match rows {
                Some(idx) => tape.gather(m, idx)?,
                None => m,
            });
        }
        Ok(structural_representation(tape, block, &picked)?.0)
    }

    /// Records the objective for one batch against `store`.
    pub fn batch_loss_with(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: BprBatch<'_>) -> Result<LossTerms> {
        let n = batch.users.len();
        if n == 0 || batch.positives.len() != n || batch.negatives.len() != n {
            return Err(Error::Contract("batch triples must be non-empty and aligned".into()));
        }
        let cfg = &self.config;
        let rec = self.record(tape, store)?;

        let unique: Vec<usize> = batch
            .positives
            .iter()
            .chain(batch.negatives)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let position = |i: usize| unique.binary_search(&i).expect("item is in the unique set");
        let pos_idx: Vec<usize> = batch.positives.iter().map(|&i| position(i)).collect();
        let neg_idx: Vec<usize> = batch.negatives.iter().map(|&i| position(i)).collect();

        let mut item_repr = Self::structure_rows(tape, &rec.item_means, rec.item_structure.as_ref(), Some(&unique))?;
        let mut contrastive = None;
        if cfg.uses_content() {
            let state = self.content(tape, &rec, Some(&unique))?;
            let content = state.content.expect("content fusion always yields rows");
            item_repr = tape.add(content, item_repr)?;
            if cfg.uses_contrast() && unique.len() >= 2 {
                let temp = Temperature {
                    tau: cfg.tau,
                    placement: cfg.temperature,
                };
                contrastive = match cfg.negatives {
                    NegativeMode::InBatch => total_contrastive(tape, &state, None, temp)?,
                    NegativeMode::FullCatalog => {
                        let pool = self.content(tape, &rec, None)?;
                        total_contrastive(tape, &state, Some((&pool, &unique)), temp)?
                    }
                };
            }
        }
        let users = Self::structure_rows(tape, &rec.user_means, rec.user_structure.as_ref(), Some(batch.users))?;
        let pos = tape.gather(item_repr, &pos_idx)?;
        let neg = tape.gather(item_repr, &neg_idx)?;
        let diff = tape.sub(pos, neg)?;
        let scores = tape.mul(users, diff)?;
        let margin = tape.row_sum(scores)?;
        let ls = tape.log_sigmoid(margin)?;
        let ls = tape.mean(ls)?;
        let bpr = tape.scale(ls, -1.0)?;

        let mut l2: Option<Var> = None;
        for id in store.ids() {
            let p = tape.param(store, id);
            let s = tape.sum_squares(p)?;
            l2 = Some(match l2 {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let l2 = l2.ok_or_else(|| Error::Contract("model has no parameters".into()))?;

        let mut total = bpr;
        if let Some(c) = contrastive {
            let weighted = tape.scale(c, cfg.beta)?;
            total = tape.add(total, weighted)?;
        }
        if cfg.lambda > 0.0 {
            let weighted = tape.scale(l2, cfg.lambda)?;
            total = tape.add(total, weighted)?;
        }
        Ok(LossTerms {
            total,
            bpr,
            contrastive,
            l2,
        })
    }

    pub fn batch_loss(&self, tape: &mut Tape<T>, batch: BprBatch<'_>) -> Result<LossTerms> {
        self.batch_loss_with(tape, &self.store, batch)
    }

    /// Every representation, for evaluation and export.
    pub fn representations(&self) -> Result<Representations<T>> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, &self.store)?;
        let item_structure = Self::structure_rows(&mut tape, &rec.item_means, rec.item_structure.as_ref(), None)?;
        let users = Self::structure_rows(&mut tape, &rec.user_means, rec.user_structure.as_ref(), None)?;
        let (items, content) = if self.config.uses_content() {
            let state = self.content(&mut tape, &rec, None)?;
            let c = state.content.expect("content fusion always yields rows");
            (tape.add(c, item_structure)?, Some(c))
        } else {
            (item_structure, None)
        };
        Ok(Representations {
            users: tape.value(users).clone(),
            items: tape.value(items).clone(),
            content: content.map(|c| tape.value(c).clone()),
            item_structure: tape.value(item_structure).clone(),
            projected: rec
                .modal
                .iter()
                .map(|r| (r.modality, tape.value(r.projected).clone()))
                .collect(),
        })
    }

    /// `users × items` score block.
    pub fn forward(&self, users: &[usize], items: &[usize]) -> Result<Tensor<T>> {
        let reps = self.representations()?;
        check_indices("users", users, reps.user_count())?;
        check_indices("items", items, reps.item_count())?;
        Ok(Tensor::from_fn(users.len(), items.len(), |r, c| {
            crate::autodiff::dot(reps.users.row(users[r]), reps.items.row(items[c]))
        }))
    }

    /// Attention block handles, exposed for analysis and tests.
    pub fn cross_attention(&self) -> Option<AttentionParams> {
        self.layout.cross
    }
}

fn check_indices(what: &str, idx: &[usize], bound: usize) -> Result<()> {
    match idx.iter().find(|&&x| x >= bound) {
        Some(bad) => Err(Error::Contract(format!("{what} index {bad} out of range {bound}"))),
        None => Ok(()),
    }
}

fn select_features<T: Float>(
    config: &ModelConfig,
    graph: &BipartiteGraph,
    features: &ModalFeatures,
) -> Result<Vec<(Modality, Arc<Tensor<T>>)>> {
    let mut out = Vec::new();
    for m in Modality::ALL {
        if !config.modalities.contains(m) {
            continue;
        }
        let table = features
            .get(m)
            .ok_or_else(|| Error::Config(format!("{m:?} features requested but not provided")))?;
        if table.rows() != graph.item_count() {
            return Err(Error::Config(format!(
                "{m:?} features have {} rows for {} items",
                table.rows(),
                graph.item_count()
            )));
        }
        out.push((m, Arc::new(table.cast())));
    }
    Ok(out)
}

/// `ŷ_ui = ⟨e_u^s, e_i^c + e_i^s⟩`; without content, `⟨e_u^s, e_i^s⟩`.
pub fn predict<T: Float>(user: &[T], content: Option<&[T]>, structure: &[T]) -> T {
    match content {
        Some(c) => user
            .iter()
            .zip(c.iter().zip(structure))
            .fold(T::zero(), |acc, (&u, (&c, &s))| acc + u * (c + s)),
        None => crate::autodiff::dot(user, structure),
    }
}

/// Mean of `−ln σ(ŷ_ui − ŷ_uj)`.
pub fn bpr_loss(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.len() != negative.len() || positive.is_empty() {
        return Err(Error::Contract("bpr needs aligned, non-empty score lists".into()));
    }
    let sum: f64 = positive.iter().zip(negative).map(|(p, n)| -log_sigmoid(p - n)).sum();
    Ok(sum / positive.len() as f64)
}
