//! Clustering and pruning of per-atom descriptor datasets with a
//! multi-kernel edge-attention graph autoencoder.
//!
//! The pipeline: build a similarity graph over atoms ([`simgraph`]), train
//! the autoencoder ([`model`]), read clusters off the pooled latent graph
//! ([`clustering`]), prune redundant atoms cluster by cluster ([`pruning`])
//! and score the effect with a ridge-regression force model
//! ([`forcefield`]). The guide in `book/` walks through each stage.

pub mod clustering;
pub mod datasets;
pub mod error;
pub mod forcefield;
pub mod model;
pub mod numerics;
pub mod pruning;
pub mod seed;
pub mod simgraph;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/similarity-graph.md")]
    mod similarity_graph {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/clustering.md")]
    mod clustering {}
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/forcefield.md")]
    mod forcefield {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
