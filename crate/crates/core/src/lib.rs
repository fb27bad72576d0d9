//! Block-wise guided attention masks for a flow-matching diffusion
//! transformer, with sliding-window streaming generation.
//!
//! Modules, bottom up:
//! - [`numerics`]: deterministic dense kernels and counter-based randomness.
//! - [`masks`]: the Block/Backward/Forward masks and receptive-field algebra.
//! - [`backbone`]: the DiT vector field with adaLN-zero blocks.
//! - [`flow`]: OT conditional flow matching, guidance and Euler sampling.
//! - [`streaming`]: chunk planning and the sliding-window generator.
//! - [`corpus`]: a synthetic token-to-feature dataset.

pub mod backbone;
pub mod corpus;
pub mod error;
pub mod flow;
pub mod masks;
pub mod numerics;
pub mod streaming;

pub use backbone::{ConditionBundle, Model, ModelConfig, ModelParams};
pub use error::{Error, Result};
pub use masks::{receptive_field, MaskKind, MaskSchedule, Preset, ReceptiveField};
pub use numerics::{BoolMatrix, Matrix, SeededRng};
