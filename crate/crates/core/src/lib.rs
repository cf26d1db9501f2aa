//! Phylogenetic Gaussian process regression for function-valued traits.
//!
//! Curves observed at the tips of a phylogeny are decomposed into a small
//! set of basis curves and per-tip weights (PCA followed by ICA). Each weight
//! component is then treated as an Ornstein-Uhlenbeck Gaussian process on the
//! tree, which yields posterior distributions of ancestral curves and
//! likelihood-based estimates of the evolutionary hyperparameters.

pub mod cli;
pub mod gp;
pub mod hyperfit;
pub mod linalg;
pub mod ou;
pub mod separation;
pub mod sim;
pub mod tree;
