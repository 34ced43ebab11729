//! Representation learning from coarse labels.
//!
//! The crate trains an MLP encoder with a coarse-class head, an instance
//! head and an optional cluster-proxy head, evaluates the learned
//! embeddings by cosine retrieval, and checks the lower bounds that relate
//! instance/coarse accuracy to fine-class accuracy on a trained model.

pub mod cluster;
pub mod data;
pub mod error;
pub mod experiment;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;
