//! Joint learning of graph structure and node-classification parameters.
//!
//! The model works on a transductive node-classification problem: all node
//! features are visible, a small subset of labels is known, and the graph is
//! either noisy or absent. Instead of committing to a fixed adjacency, the
//! model *learns* one: a multi-head weighted cosine metric scores every node
//! pair, an epsilon threshold sparsifies the scores into an adjacency, and a
//! two-layer graph convolutional network classifies nodes on a mixture of
//! that learned adjacency and the normalized initial graph. Adjacency
//! construction and classification repeat in an inner loop — each round
//! rebuilds the graph from the freshly computed node embeddings — until the
//! adjacency stops moving, and every round's loss participates in one
//! backward pass, so metric weights and GCN weights are trained jointly.
//!
//! Layout:
//! - [`numkit`]: dense matrices, the reverse-mode tape, Adam, and a
//!   finite-difference gradient checker. Everything else builds on these.
//! - [`metric`]: weighted cosine similarity heads, epsilon sparsification,
//!   and a kNN graph constructor for datasets that ship without edges.
//! - [`graphreg`]: smoothness / connectivity / sparsity penalties that keep
//!   the learned adjacency from degenerating.
//! - [`gnn`]: the two-layer GCN, adjacency normalization and mixing rules,
//!   and the masked prediction loss.
//! - [`dataset`]: in-memory dataset container, split sampling, and edge
//!   perturbation for robustness studies.
//! - [`engine`]: the iterative forward pass, dynamic stopping, the training
//!   loop, and evaluation.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature additionally enables runtime SIMD kernel selection.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod dataset;
pub mod engine;
mod error;
pub mod gnn;
pub mod graphreg;
pub mod metric;
pub mod numkit;

pub use error::{Error, Result};

/// Floor used wherever a value is about to be divided by or passed to `ln`:
/// row sums, vector norms, node degrees. Keeps gradients finite without
/// visibly distorting quantities at the scales this crate works at.
pub const EPS_FLOOR: f64 = 1e-12;

/// Floor for L2 row normalization of feature vectors (larger than
/// [`EPS_FLOOR`] because squared norms of standardized features underflow
/// earlier than plain sums).
pub const NORM_FLOOR: f64 = 1e-8;
