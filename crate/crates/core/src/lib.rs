//! Desk-scale laboratory for text-video co-operative prompt tuning.
//!
//! A miniature CLIP-style dual encoder built on a from-scratch reverse-mode
//! autodiff tape, with deep text/visual prompts, position-, context- and
//! function-specific video prompt mechanisms, baseline tuning protocols
//! with exact parameter accounting, contrastive training on synthetic
//! corpora, and bidirectional retrieval evaluation.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod prompts;
pub mod protocols;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod tensorfile;
pub mod trainer;

pub use error::{CoreError, Result};
pub use params::{ParamRegistry, ParameterGroup};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
