//! Supervised multiscale dimension reduction for spatial interaction network
//! data.
//!
//! The pipeline groups primitive objects (e.g. passes) into a partition tree
//! by recursive bisection of a K-nearest-neighbour similarity graph, fits a
//! Poisson inverse-regression mixed model whose leaf coefficients are
//! expanded over the tree nodes, and shrinks the expanded coefficients with a
//! tree-structured fused generalized double Pareto prior by variational EM.
//! Fitted coefficients then collapse into a reduced multiscale
//! representation: fused subtrees and deleted groups.

pub mod bench;
pub mod em;
pub mod error;
pub mod ingest;
pub mod knn;
pub mod lbfgs;
pub mod model;
pub mod partition;
pub mod priors;
pub mod quad;
pub mod reduction;
pub mod rng;
pub mod simulate;
pub mod tree;

pub use error::{Error, Result};
