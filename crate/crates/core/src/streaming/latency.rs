//! Per-chunk latency of long-form generation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{generate_chunk_from, pad_frame_ids, plans_for, window_noise, StreamConfig};
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::masks::{MaskKind, MaskSchedule};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    /// The model's own schedule: windows hold the chunk plus bounded context.
    SlidingWindow,
    /// Every layer block-causal, so each window holds the whole history.
    CausalCumulative,
}

impl fmt::Display for LatencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatencyMode::SlidingWindow => "sliding_window",
            LatencyMode::CausalCumulative => "causal_cumulative",
        })
    }
}

impl FromStr for LatencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sliding" | "sliding_window" | "sliding-window" => Ok(Self::SlidingWindow),
            "causal" | "causal_cumulative" | "causal-cumulative" => Ok(Self::CausalCumulative),
            other => Err(Error::Config(format!(
                "unknown latency mode {other:?} (expected sliding_window or causal_cumulative)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub chunk_index: usize,
    /// Frames in the chunk's window.
    pub frames: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub mode: LatencyMode,
    pub rows: Vec<LatencyRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub chunks: usize,
    pub median_millis: f64,
    /// Least-squares slope of latency against chunk index, ms per chunk.
    pub slope_millis_per_chunk: f64,
    /// `|slope| / median`.
    pub relative_slope: f64,
    pub spearman: f64,
}

impl LatencyTable {
    pub fn summary(&self) -> LatencySummary {
        let xs: Vec<f64> = self.rows.iter().map(|r| r.chunk_index as f64).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.millis).collect();
        let med = median(&ys);
        let slope = linear_slope(&xs, &ys);
        LatencySummary {
            chunks: self.rows.len(),
            median_millis: med,
            slope_millis_per_chunk: slope,
            relative_slope: if med > 0.0 { slope.abs() / med } else { 0.0 },
            spearman: spearman(&xs, &ys),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope; 0 for fewer than two points.
pub fn linear_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return 0.0;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// 1-based ranks with ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of ranks); NaN when
/// either side is constant or there are fewer than two points.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(&xs[..n]), ranks(&ys[..n]));
    let m = (n as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - m) * (b - m);
        sxx += (a - m) * (a - m);
        syy += (b - m) * (b - m);
    }
    sxy / (sxx * syy).sqrt()
}

/// Times `total_chunks` chunks of a synthetic long utterance.
///
/// Condition slices and window noise are prepared before the clock starts;
/// only the sampler run is timed. Each chunk is run `repeats` times and the
/// fastest run is kept. `CausalCumulative` swaps every layer of the schedule
/// for a block-causal mask, keeping the weights.
pub fn measure_chunk_latency(
    model: &Model,
    config: &StreamConfig,
    total_chunks: usize,
    mode: LatencyMode,
    repeats: usize,
    seed: u64,
) -> Result<LatencyTable> {
    config.validate()?;
    if total_chunks == 0 || repeats == 0 {
        return Err(Error::Config("need at least one chunk and one repeat".into()));
    }
    let model = match mode {
        LatencyMode::SlidingWindow => model.clone(),
        LatencyMode::CausalCumulative => {
            let mut m = model.clone();
            m.config.schedule = MaskSchedule::all(
                MaskKind::Causal,
                m.config.layers,
                m.config.block_size(),
            )?;
            m
        }
    };
    let c = &model.config;
    let frames = total_chunks * config.chunk_blocks * c.block_size();
    let mut rng = SeededRng::new(seed, 0x4c41_5400);
    let tokens: Vec<u32> = (0..frames.div_ceil(c.upsample_factor))
        .map(|_| rng.below(c.token_vocab) as u32)
        .collect();
    let ids = crate::backbone::upsample_tokens(&tokens, c.upsample_factor);
    let ids = &ids[..frames];
    let speaker: Vec<f32> = (0..c.speaker_dim).map(|_| rng.next_gaussian() as f32).collect();
    let cond = model.assemble_condition(&pad_frame_ids(ids, c.block_size()), &speaker)?;
    let plans = plans_for(&model, frames, config);

    let mut rows = Vec::with_capacity(plans.len());
    let mut warmed = false;
    for plan in &plans {
        let window = cond.slice(plan.window_start_frame..plan.window_end_frame);
        let x0 = window_noise(plan, c.feature_dim, config.noise_seed);
        if !warmed {
            generate_chunk_from(&model, plan, &window, &x0, config)?;
            warmed = true;
        }
        let mut best = f64::INFINITY;
        for _ in 0..repeats {
            let start = Instant::now();
            let out = generate_chunk_from(&model, plan, &window, &x0, config)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            best = best.min(elapsed);
        }
        rows.push(LatencyRow {
            chunk_index: plan.chunk_index,
            frames: plan.window_frames(),
            millis: best,
        });
    }
    Ok(LatencyTable { mode, rows })
}

/// Writes `chunk_index,frames,millis` rows.
pub fn write_latency_csv(path: &Path, table: &LatencyTable) -> Result<()> {
    let mut out = String::from("chunk_index,frames,millis\n");
    for r in &table.rows {
        out.push_str(&format!("{},{},{:.6}\n", r.chunk_index, r.frames, r.millis));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((linear_slope(&xs, &ys) - 2.0).abs() < 1e-12);
        assert_eq!(linear_slope(&xs, &[5.0; 10]), 0.0);
        // Monotone but nonlinear is still perfectly rank-correlated.
        let cubes: Vec<f64> = xs.iter().map(|x| x * x * x).collect();
        assert!((spearman(&xs, &cubes) - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = xs.iter().rev().copied().collect();
        assert!((spearman(&xs, &rev) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn mode_names_parse() {
        assert_eq!("sliding".parse::<LatencyMode>().unwrap(), LatencyMode::SlidingWindow);
        assert_eq!(
            "causal_cumulative".parse::<LatencyMode>().unwrap(),
            LatencyMode::CausalCumulative
        );
        assert!("other".parse::<LatencyMode>().is_err());
    }
}
