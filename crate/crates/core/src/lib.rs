//! Correspondence matching downstream of frozen foundation backbones.
//!
//! The crate fuses geometric and semantic feature maps with a small
//! self/cross-attention transformer, merges the result with an
//! object-level map into one unified descriptor, trains the fusion weights
//! with dual-softmax, contrastive and soft-argmax flow supervision, and
//! evaluates descriptors with geometric, semantic and temporal protocols.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod mtf;
pub mod supervision;
pub mod tensor;
pub mod training;

pub use error::{MatchaError, Result};
pub use tensor::{FeatureMap, Role, Stride};
