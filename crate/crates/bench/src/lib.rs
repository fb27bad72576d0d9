//! Shared fixtures for the benches.

use blockflow_core::backbone::GateInit;
use blockflow_core::streaming::{pad_frame_ids, plans_for, ChunkPlan, StreamConfig};
use blockflow_core::{ConditionBundle, Model, ModelConfig, ModelParams, Preset, SeededRng};

/// Tiny model with random gates so every layer does real work.
pub fn tiny_model(preset: Preset, seed: u64) -> Model {
    let config = ModelConfig::tiny()
        .with_preset(preset)
        .expect("tiny presets are valid");
    let params = ModelParams::init_with(&config, seed, GateInit::Random(0.5));
    Model::new(config, params).expect("tiny config is valid")
}

/// Condition for `frames` random frame ids plus the chunk plans over it.
pub fn long_input(
    model: &Model,
    frames: usize,
    config: &StreamConfig,
    seed: u64,
) -> (ConditionBundle, Vec<ChunkPlan>) {
    let c = &model.config;
    let mut rng = SeededRng::new(seed, 0);
    let ids: Vec<u32> = (0..frames).map(|_| rng.below(c.token_vocab) as u32).collect();
    let speaker: Vec<f32> = (0..c.speaker_dim).map(|_| rng.next_gaussian() as f32).collect();
    let cond = model
        .assemble_condition(&pad_frame_ids(&ids, c.block_size()), &speaker)
        .expect("ids are in range");
    (cond, plans_for(model, frames, config))
}
