//! Attention analysis and prompt-based editing for joint-attention
//! diffusion transformers, on a small seeded model.
//!
//! - [`tensor`]: dense `f64` kernels, PCA, spatial maps.
//! - [`model`]: the toy transformer with attention hooks.
//! - [`atlas`]: attention quadrants, token maps and blending masks.
//! - [`selector`]: block scoring and top-k mask block selection.
//! - [`flow`]: rectified-flow sampling and inversion.
//! - [`edit`]: two-branch editing of generated and real latents.
//! - [`bench`]: streaming versus materialized attention.

pub mod atlas;
pub mod bench;
pub mod edit;
pub mod error;
pub mod flow;
pub mod io;
pub mod model;
pub mod selector;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::{Matrix, SpatialMap};
