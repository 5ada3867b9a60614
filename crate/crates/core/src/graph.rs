//! Bipartite user–item graph with symmetric normalization.

use crate::autodiff::{Float, LinearOperator, SparseMatrix, Tensor};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};

/// Direction of one aggregation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Item rows gather from their users.
    UsersToItems,
    /// User rows gather from their items.
    ItemsToUsers,
}

/// Training-edge graph. Each edge carries `c_ui = 1 / (√|N_u| · √|N_i|)`,
/// stored in CSR form for both directions.
#[derive(Clone, Debug)]
pub struct BipartiteGraph {
    user_count: usize,
    item_count: usize,
    // rows = items, cols = users
    to_items: LinearOperator,
}

impl BipartiteGraph {
    /// Builds from the training split only.
    pub fn build(ds: &Dataset) -> Result<Self> {
        Self::from_edges(ds.user_count(), ds.item_count(), ds.edges(Split::Train))
    }

    pub fn from_edges(user_count: usize, item_count: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Contract("graph needs at least one training edge".into()));
        }
        let mut edges = edges.to_vec();
        edges.sort_unstable();
        edges.dedup();
        let mut du = vec![0usize; user_count];
        let mut di = vec![0usize; item_count];
        for &(u, i) in &edges {
            if u >= user_count || i >= item_count {
                return Err(Error::Contract(format!("edge ({u},{i}) out of range")));
            }
            du[u] += 1;
            di[i] += 1;
        }
        let triples: Vec<(usize, usize, f64)> = edges
            .iter()
            .map(|&(u, i)| (i, u, 1.0 / ((du[u] as f64).sqrt() * (di[i] as f64).sqrt())))
            .collect();
        let m = SparseMatrix::from_triples(item_count, user_count, &triples)?;
        Ok(BipartiteGraph {
            user_count,
            item_count,
            to_items: LinearOperator::new(m),
        })
    }

    pub fn user_count(&self) -> usize {
        self.user_count
    }

    pub fn item_count(&self) -> usize {
        self.item_count
    }

    pub fn edge_count(&self) -> usize {
        self.to_items.matrix().nnz()
    }

    /// Sparse operator for one direction, usable on a tape.
    pub fn operator(&self, side: Side) -> LinearOperator {
        match side {
            Side::UsersToItems => self.to_items.clone(),
            Side::ItemsToUsers => self.to_items.transposed(),
        }
    }

    /// Users adjacent to `item`, ascending.
    pub fn item_neighbors(&self, item: usize) -> &[usize] {
        self.to_items.matrix().row(item).0
    }

    /// Items adjacent to `user`, ascending.
    pub fn user_neighbors(&self, user: usize) -> &[usize] {
        self.to_items.adjoint.row(user).0
    }

    /// `c_ui`, or `None` when `(u, i)` is not an edge.
    pub fn coefficient(&self, user: usize, item: usize) -> Option<f64> {
        let (cols, vals) = self.to_items.matrix().row(item);
        cols.binary_search(&user).ok().map(|k| vals[k])
    }

    /// `target[x] = Σ_{y ∈ N_x} c_xy · source[y]`; isolated targets get zeros.
    pub fn aggregate<T: Float>(&self, side: Side, source: &Tensor<T>) -> Result<Tensor<T>> {
        let op = self.operator(side);
        op.forward.apply(source)
    }
}
