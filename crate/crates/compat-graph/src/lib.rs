//! Graph-conditioned item compatibility prediction.
//!
//! This crate implements a graph auto-encoder for pairwise compatibility:
//! a graph convolutional encoder embeds each catalog item conditioned on its
//! relational context, and a symmetric metric decoder maps a pair of
//! embeddings to an edge probability. On top of the model sit a link
//! prediction training loop (edge holdout, negative sampling, Adam, early
//! stopping) and evaluation harnesses for fill-in-the-blank and outfit
//! compatibility under a BFS k-neighbourhood context protocol.
//!
//! The crate is organized as:
//!
//! - [`graph`] — sparse undirected graphs, adjacency normalization, BFS
//!   context extraction, edge splits and structural dropout
//! - [`numeric`] — dense matrices, the reverse-mode tape, batch norm, Adam
//! - [`encoder`] / [`decoder`] — the model itself
//! - [`trainer`] — end-to-end training
//! - [`eval`] — FITB accuracy, outfit compatibility AUC, k-sweeps
//! - [`io`] — text dataset formats, binary checkpoints, synthetic data
//! - [`gradcheck`] — finite-difference verification of the full model
//!
//! Data-parallel inner loops (dense matmul, batch evaluation) run on rayon
//! when the default `parallel` feature is enabled; building with
//! `--no-default-features` selects the sequential fallback. Results are
//! identical either way: work is partitioned by fixed-size blocks, never by
//! thread count.

pub mod decoder;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod numeric;
pub mod parallel;
pub mod trainer;
