//! Product and user embeddings learned from retail transaction baskets.
//!
//! The pipeline has four learned stages:
//!
//! * [`p2e`]: CBOW product embeddings with a full softmax,
//! * [`prove`]: GloVe-style factorisation of distance-weighted
//!   co-occurrences,
//! * [`u2e`]: joint user and product embeddings,
//! * [`salesnet`]: a small feedforward regressor predicting per-customer,
//!   per-product spend from the embeddings.
//!
//! [`concepts`] clusters product vectors with k-means and [`basket`] uses
//! the clusters to build complementary market baskets. [`pipeline`] wires
//! everything to files for the `prodvec` command-line tool.

pub mod basket;
mod cbow;
pub mod checkpoint;
pub mod concepts;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod exec;
pub mod numkit;
pub mod p2e;
pub mod pipeline;
pub mod prove;
pub mod salesnet;
pub mod u2e;

pub use error::{Error, Result};
pub use exec::Execution;
pub use numkit::Matrix;
