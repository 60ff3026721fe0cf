//! Low-shot classification by weight imprinting.
//!
//! An MLP embedder ending in L2 normalization feeds a bias-free cosine
//! classifier with a trainable scale. Novel classes are added by writing the
//! (averaged, renormalized) embeddings of their exemplars straight into new
//! template columns, optionally followed by fine-tuning.

pub mod checkpoint;
pub mod data;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod imprint;
pub mod losses;
pub mod math;
pub mod model;
pub mod optim;
pub mod params;

pub use error::{Error, Result};
pub use model::Model;
