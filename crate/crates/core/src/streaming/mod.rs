//! Chunked sliding-window generation.
//!
//! The frame sequence is padded to whole blocks, blocks are grouped into
//! chunks, and each chunk is generated inside a window that adds the context
//! blocks its receptive field needs. Context frames are sampled from
//! position-keyed noise in every window and thrown away; only the chunk's own
//! frames are emitted.

mod driver;
mod latency;

pub use driver::{stream_generate, EmittedChunk, StreamReport, TokenEvent};
pub use latency::{
    linear_slope, measure_chunk_latency, median, spearman, write_latency_csv, LatencyMode,
    LatencyRow, LatencySummary, LatencyTable,
};

use serde::{Deserialize, Serialize};

use crate::backbone::{ConditionBundle, Model};
use crate::error::{Error, Result};
use crate::flow::{euler_sample, position_noise, SamplerConfig};
use crate::masks::{receptive_field, ReceptiveField};
use crate::numerics::Matrix;

/// One sliding-window step. Window bounds index the block-padded sequence;
/// emit bounds never pass the true sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub chunk_index: usize,
    pub window_start_frame: usize,
    pub window_end_frame: usize,
    pub emit_start_frame: usize,
    pub emit_end_frame: usize,
    pub left_context_blocks: usize,
    pub right_context_blocks: usize,
}

impl ChunkPlan {
    pub fn window_frames(&self) -> usize {
        self.window_end_frame - self.window_start_frame
    }

    pub fn emit_frames(&self) -> usize {
        self.emit_end_frame - self.emit_start_frame
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub chunk_blocks: usize,
    pub context_multiplier: usize,
    pub sampler: SamplerConfig,
    pub noise_seed: u64,
    /// Chunk computations allowed to run at once in the stream driver.
    pub max_inflight_chunks: usize,
    /// How long the stream driver waits for the next token event.
    pub stall_timeout_ms: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            chunk_blocks: 2,
            context_multiplier: 1,
            sampler: SamplerConfig::default(),
            noise_seed: 0,
            max_inflight_chunks: 1,
            stall_timeout_ms: 10_000,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_blocks == 0 || self.context_multiplier == 0 {
            return Err(Error::Config(
                "chunk_blocks and context_multiplier must be at least 1".into(),
            ));
        }
        if self.max_inflight_chunks == 0 {
            return Err(Error::Config("max_inflight_chunks must be at least 1".into()));
        }
        self.sampler.validate()
    }
}

/// Splits `total_frames` into chunks of `chunk_blocks` blocks and attaches
/// `multiplier * p` past and `multiplier * q` future context blocks, clipped
/// to the sequence. Unbounded sides take everything up to the edge.
pub fn plan_chunks(
    total_frames: usize,
    b: usize,
    chunk_blocks: usize,
    rf: ReceptiveField,
    multiplier: usize,
) -> Vec<ChunkPlan> {
    assert!(b >= 1 && chunk_blocks >= 1, "block and chunk sizes must be positive");
    let total_blocks = total_frames.div_ceil(b);
    let chunks = total_blocks.div_ceil(chunk_blocks);
    (0..chunks)
        .map(|c| {
            let first = c * chunk_blocks;
            let end = ((c + 1) * chunk_blocks).min(total_blocks);
            let left = rf.past_blocks.map_or(first, |p| (multiplier * p).min(first));
            let right = rf
                .future_blocks
                .map_or(total_blocks - end, |q| (multiplier * q).min(total_blocks - end));
            ChunkPlan {
                chunk_index: c,
                window_start_frame: (first - left) * b,
                window_end_frame: (end + right) * b,
                emit_start_frame: first * b,
                emit_end_frame: (end * b).min(total_frames),
                left_context_blocks: left,
                right_context_blocks: right,
            }
        })
        .collect()
}

/// Frames of condition needed before chunk 0 can be generated.
pub fn first_packet_frames(plans: &[ChunkPlan]) -> usize {
    plans.first().map_or(0, |p| p.window_end_frame)
}

/// Pads frame ids to a whole number of blocks by repeating the last id.
pub fn pad_frame_ids(ids: &[u32], b: usize) -> Vec<u32> {
    let mut out = ids.to_vec();
    if let Some(&last) = ids.last() {
        out.resize(ids.len().div_ceil(b) * b, last);
    }
    out
}

/// Initial noise of a window; frame `f` of the sequence always gets the same row.
pub fn window_noise(plan: &ChunkPlan, feature_dim: usize, noise_seed: u64) -> Matrix {
    position_noise(
        plan.window_start_frame,
        plan.window_frames(),
        feature_dim,
        noise_seed,
    )
}

/// Runs the sampler on one window and returns the emitted rows.
pub fn generate_chunk(
    model: &Model,
    plan: &ChunkPlan,
    cond: &ConditionBundle,
    config: &StreamConfig,
) -> Result<Matrix> {
    let x0 = window_noise(plan, model.config.feature_dim, config.noise_seed);
    generate_chunk_from(model, plan, cond, &x0, config)
}

pub(crate) fn generate_chunk_from(
    model: &Model,
    plan: &ChunkPlan,
    cond: &ConditionBundle,
    x0: &Matrix,
    config: &StreamConfig,
) -> Result<Matrix> {
    if cond.frames() != plan.window_frames() {
        return Err(Error::Input(format!(
            "chunk {} window has {} frames but the condition slice has {}",
            plan.chunk_index,
            plan.window_frames(),
            cond.frames()
        )));
    }
    let out = euler_sample(model, x0, cond, &config.sampler, plan.window_start_frame)?;
    let lo = plan.emit_start_frame - plan.window_start_frame;
    Ok(out.slice_rows(lo..lo + plan.emit_frames()))
}

/// Plans for a sequence under `model`'s schedule.
pub fn plans_for(model: &Model, total_frames: usize, config: &StreamConfig) -> Vec<ChunkPlan> {
    plan_chunks(
        total_frames,
        model.config.block_size(),
        config.chunk_blocks,
        receptive_field(&model.config.schedule),
        config.context_multiplier,
    )
}

/// Chunk-by-chunk generation with every token known up front.
pub fn generate_offline(
    model: &Model,
    frame_ids: &[u32],
    speaker: &[f32],
    config: &StreamConfig,
) -> Result<Matrix> {
    config.validate()?;
    let padded = pad_frame_ids(frame_ids, model.config.block_size());
    let cond = model.assemble_condition(&padded, speaker)?;
    let parts = plans_for(model, frame_ids.len(), config)
        .iter()
        .map(|plan| {
            let window = cond.slice(plan.window_start_frame..plan.window_end_frame);
            generate_chunk(model, plan, &window, config)
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(Matrix::zeros(0, model.config.feature_dim));
    }
    Matrix::concat_rows(&parts)
}

/// Non-streaming reference: one sampler run over the whole padded sequence
/// with the same position-keyed noise, truncated to the true length.
pub fn generate_full(
    model: &Model,
    frame_ids: &[u32],
    speaker: &[f32],
    sampler: &SamplerConfig,
    noise_seed: u64,
) -> Result<Matrix> {
    if frame_ids.is_empty() {
        return Ok(Matrix::zeros(0, model.config.feature_dim));
    }
    let padded = pad_frame_ids(frame_ids, model.config.block_size());
    let cond = model.assemble_condition(&padded, speaker)?;
    let x0 = position_noise(0, padded.len(), model.config.feature_dim, noise_seed);
    let out = euler_sample(model, &x0, &cond, sampler, 0)?;
    Ok(out.slice_rows(0..frame_ids.len()))
}
