//! Lightweight K-layer propagation with ID retention, layer averaging and
//! attention combination across modalities.
//!
//! ```text
//! e_i^{(k)} = Σ_{u∈N_i} c_ui e_u^{(k−1)} + γ e_i^{id}
//! e_u^{(k)} = Σ_{i∈N_u} c_ui e_i^{(k−1)} + γ e_u^{id}
//! ```

use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{attend, AttentionVars};
use crate::graph::{BipartiteGraph, Side};

/// Layer-0 rows and retained ID rows for one modality.
#[derive(Clone, Copy, Debug)]
pub struct PropagationInputs {
    pub item0: Var,
    pub user0: Var,
    pub item_id: Var,
    pub user_id: Var,
    pub gamma: f64,
}

/// Layers `0..=K` for both sides.
#[derive(Clone, Debug)]
pub struct LayerStack {
    pub items: Vec<Var>,
    pub users: Vec<Var>,
}

pub fn propagate<T: Float>(
    tape: &mut Tape<T>,
    graph: &BipartiteGraph,
    inputs: &PropagationInputs,
    layers: usize,
) -> Result<LayerStack> {
    if layers == 0 {
        return Err(Error::Config("propagation needs at least one layer".into()));
    }
    if inputs.gamma.is_nan() || inputs.gamma < 0.0 {
        return Err(Error::Config(format!(
            "gamma must be non-negative, got {}",
            inputs.gamma
        )));
    }
    let to_items = graph.operator(Side::UsersToItems);
    let to_users = graph.operator(Side::ItemsToUsers);
    // skipping the add keeps γ = 0 bit-identical to having no ID term at all
    let retained = |tape: &mut Tape<T>, id: Var| -> Result<Option<Var>> {
        if inputs.gamma == 0.0 {
            Ok(None)
        } else {
            tape.scale(id, inputs.gamma).map(Some)
        }
    };
    let item_keep = retained(tape, inputs.item_id)?;
    let user_keep = retained(tape, inputs.user_id)?;

    let mut items = vec![inputs.item0];
    let mut users = vec![inputs.user0];
    for k in 1..=layers {
        let mut item = tape.aggregate(users[k - 1], &to_items)?;
        let mut user = tape.aggregate(items[k - 1], &to_users)?;
        if let Some(keep) = item_keep {
            item = tape.add(item, keep)?;
        }
        if let Some(keep) = user_keep {
            user = tape.add(user, keep)?;
        }
        items.push(item);
        users.push(user);
    }
    Ok(LayerStack { items, users })
}

/// Unweighted mean over all layers.
pub fn layer_mean<T: Float>(tape: &mut Tape<T>, layers: &[Var]) -> Result<Var> {
    let (&first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::Contract("layer mean of an empty stack".into()))?;
    let mut total = first;
    for &l in rest {
        total = tape.add(total, l)?;
    }
    tape.scale(total, 1.0 / layers.len() as f64)
}

/// Combines per-modality layer means. Two modalities go through `block`;
/// a single one passes through. Returns the rows and, when attention ran,
/// its `n×2` weights.
pub fn structural_representation<T: Float>(
    tape: &mut Tape<T>,
    block: Option<&AttentionVars>,
    means: &[Var],
) -> Result<(Var, Option<Var>)> {
    match (means, block) {
        ([only], _) => Ok((*only, None)),
        ([a, b], Some(block)) => {
            let (fused, w) = attend(tape, block, [*a, *b])?;
            Ok((fused, Some(w)))
        }
        ([_, _], None) => Err(Error::Config("two modalities need a structural attention block".into())),
        _ => Err(Error::Config(format!(
            "structural combination of {} modalities",
            means.len()
        ))),
    }
}

/// Layers `0..=K` of one side as plain tensors.
pub type Layers<T> = Vec<Tensor<T>>;

/// Plain-tensor propagation; returns `(item layers, user layers)`.
pub fn propagate_layers<T: Float>(
    graph: &BipartiteGraph,
    item0: &Tensor<T>,
    user0: &Tensor<T>,
    item_id: &Tensor<T>,
    user_id: &Tensor<T>,
    gamma: f64,
    layers: usize,
) -> Result<(Layers<T>, Layers<T>)> {
    let mut tape = Tape::new();
    let inputs = PropagationInputs {
        item0: tape.constant(item0.clone()),
        user0: tape.constant(user0.clone()),
        item_id: tape.constant(item_id.clone()),
        user_id: tape.constant(user_id.clone()),
        gamma,
    };
    let stack = propagate(&mut tape, graph, &inputs, layers)?;
    let collect = |vars: &[Var]| vars.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((collect(&stack.items), collect(&stack.users)))
}
