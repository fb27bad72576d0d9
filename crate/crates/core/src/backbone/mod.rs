//! Toy-scale DiT vector field.
//!
//! Features and frame-aligned conditioning are concatenated channel-wise,
//! projected to the hidden width, passed through adaLN-zero blocks whose
//! attention follows the per-layer mask schedule, and projected back to the
//! feature width.

mod checkpoint;
mod condition;
mod config;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, CHECKPOINT_FORMAT};
pub use condition::{assemble_condition, upsample_tokens, ConditionBundle};
pub use config::ModelConfig;
pub use forward::{dit_block_forward, positional_encoding, Dropout, ForwardCache, LayerMask, MaskSet, Model};
pub use params::{GateInit, LayerParams, ModelParams};
