//! CPU operator library for the kernels that dominate diffusion-model
//! inference: group normalization, GELU, attention and 3×3 convolution.
//!
//! Every optimized kernel in [`fused_ops`] and [`winograd`] has a naive
//! counterpart in [`reference_ops`] that serves as its oracle. The
//! [`cost_model`] gives closed-form FLOP and memory figures, and the
//! [`fusion_planner`] applies the fusions as rewrites over a small
//! operator graph IR.

pub mod cost_model;
pub mod error;
pub mod fused_ops;
pub mod fusion_planner;
pub mod instrument;
pub mod reference_ops;
pub mod tensor;
pub mod winograd;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};

#[doc(hidden)]
pub use serde_json as __json;
