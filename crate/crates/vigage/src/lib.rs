//! Facial age estimation with graph convolutions over image patch graphs.
//!
//! An image is cut into a grid of patches ("wrinkle-scale" local regions);
//! patches become graph nodes, connected to their k nearest neighbors in
//! feature space. Two-step relational graph convolutions with learnable
//! sigmoid edge weights and multi-head self-attention propagate information
//! across the graph, and a small regression head predicts an age in years.
//! Everything runs in `f64` on a reverse-mode autodiff tape, and every
//! backward rule is verifiable against finite differences.
//!
//! Module map:
//! - [`numerics`] — tensors, the autodiff tape, the gradient checker
//! - [`patchgraph`] — patch extraction, k-NN graph building, edge weights
//! - [`attention`] — multi-head self-attention
//! - [`graphconv`] — two-step graph convolution + multi-head update
//! - [`network`] — model assembly: stem, grapher/FFN blocks, head
//! - [`training`] — MAE loss, Adam, the training loop
//! - [`dataio`] — PGM/PPM images, labeled datasets, the synthetic corpus
//! - [`cli`] — the `vigage` command-line entry points
//!
//! The `examples/` directory has one runnable walkthrough per capability;
//! start with `cargo run --example train_synthetic`.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod graphconv;
pub mod network;
pub mod numerics;
pub mod patchgraph;
pub mod training;

pub use error::{Error, Result};
