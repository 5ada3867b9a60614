//! Training and evaluation engine for a multimodal recommender that fuses
//! pretrained modal features with learnable ID embeddings, both in item
//! content and in graph propagation.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod par;
pub mod propagation;
pub mod train;

pub use error::{Error, Result};
