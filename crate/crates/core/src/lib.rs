//! Attention-based multiple instance learning with spatial token mixing.
//!
//! Bags of patch embeddings are compressed, laid out on the slide's patch
//! grid, mixed inside block windows and/or across a dilated grid pattern with
//! shared linear maps, then pooled with gated attention and classified.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod simm;
pub mod tensor;

pub use autodiff::{ParamId, ParamStore, Parameter, Tape, Var};
pub use error::{Error, Result};
pub use model::{Gabmil, GabmilConfig};
pub use simm::{GridCoord, SimmConfig, SimmVariant};
pub use tensor::{Scalar, Tensor};
