//! Incremental driver: consumes tokens as they arrive and emits chunks as
//! soon as their windows are fully covered by real condition frames.

use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::{generate_chunk, pad_frame_ids, plans_for, ChunkPlan, StreamConfig};
use crate::backbone::{upsample_tokens, Model};
use crate::error::{Error, Result};
use crate::masks::receptive_field;
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenEvent {
    /// More tokens, at token rate (before upsampling).
    Tokens(Vec<u32>),
    End,
}

#[derive(Debug, Clone)]
pub struct EmittedChunk {
    pub plan: ChunkPlan,
    pub features: Matrix,
    /// Wall-clock time of the chunk's sampler run.
    pub compute: Duration,
    /// Condition frames that had arrived when the chunk was started.
    pub frames_available: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StreamReport {
    pub total_frames: usize,
    pub plans: Vec<ChunkPlan>,
    pub compute: Vec<Duration>,
    /// Condition frames available when chunk 0 was started.
    pub first_packet_frames: Option<usize>,
}

/// Future frames chunk `c` needs before it can start, or `None` if it must
/// wait for the end of the stream.
fn frames_needed(model: &Model, config: &StreamConfig, chunk: usize) -> Option<usize> {
    let b = model.config.block_size();
    let rf = receptive_field(&model.config.schedule);
    let q = rf.future_blocks?;
    Some(((chunk + 1) * config.chunk_blocks + config.context_multiplier * q) * b)
}

/// Streams `source` through the sliding-window generator, handing each chunk
/// to `sink` in order.
///
/// A chunk is started once the condition covers its whole window; until the
/// end marker arrives, the window is the unclipped one, which equals the plan
/// the offline generator would use. Up to `max_inflight_chunks` ready chunks
/// run in parallel. Waiting longer than `stall_timeout_ms` for an event is an
/// error; a source that hangs up without an end marker is too.
pub fn stream_generate(
    model: &Model,
    source: &Receiver<TokenEvent>,
    speaker: &[f32],
    config: &StreamConfig,
    mut sink: impl FnMut(EmittedChunk),
) -> Result<StreamReport> {
    config.validate()?;
    let b = model.config.block_size();
    let u = model.config.upsample_factor;
    let timeout = Duration::from_millis(config.stall_timeout_ms);
    let mut ids: Vec<u32> = Vec::new();
    let mut next_chunk = 0;
    let mut report = StreamReport::default();
    let mut finished = false;

    loop {
        match source.recv_timeout(timeout) {
            Ok(TokenEvent::Tokens(tokens)) => ids.extend(upsample_tokens(&tokens, u)),
            Ok(TokenEvent::End) => finished = true,
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Stalled {
                    millis: timeout.as_millis(),
                })
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Input(
                    "condition source closed without an end marker".into(),
                ))
            }
        }

        // Plans computed from a partial sequence agree with the final ones
        // for every chunk whose unclipped window is already covered.
        let mut plans = plans_for(model, ids.len(), config);
        if !finished {
            let mut ready = next_chunk;
            while frames_needed(model, config, ready).is_some_and(|need| need <= ids.len()) {
                ready += 1;
            }
            plans.truncate(ready);
        }
        if plans.len() > next_chunk {
            let padded = pad_frame_ids(&ids, b);
            let cond = model.assemble_condition(&padded, speaker)?;
            let available = ids.len();
            for group in plans[next_chunk..].chunks(config.max_inflight_chunks) {
                let results = group
                    .par_iter()
                    .map(|plan| {
                        let window = cond.slice(plan.window_start_frame..plan.window_end_frame);
                        let start = Instant::now();
                        let features = generate_chunk(model, plan, &window, config)?;
                        Ok(EmittedChunk {
                            plan: *plan,
                            features,
                            compute: start.elapsed(),
                            frames_available: available,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                for chunk in results {
                    report.first_packet_frames.get_or_insert(chunk.frames_available);
                    report.plans.push(chunk.plan);
                    report.compute.push(chunk.compute);
                    sink(chunk);
                }
            }
            next_chunk = plans.len();
        }
        if finished {
            report.total_frames = ids.len();
            return Ok(report);
        }
    }
}
