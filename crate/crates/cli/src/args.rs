use std::path::{Path, PathBuf};

use blockflow_core::flow::TimeSampler;
use blockflow_core::streaming::LatencyMode;
use blockflow_core::Preset;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "blockflow", version, about = "Block-masked flow-matching generation harness")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
pub struct GlobalArgs {
    /// Worker threads for inner parallelism [default: 1]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root seed for model init, training and probes [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for outputs and the run manifest [default: out]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
}

impl GlobalArgs {
    pub fn threads(&self) -> usize {
        self.threads.unwrap_or(1)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// Same values with every default filled in.
    pub fn resolved(&self) -> Self {
        Self {
            threads: Some(self.threads()),
            seed: self.seed,
            out_dir: Some(self.out_dir()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write a synthetic corpus
    MakeData(MakeDataArgs),
    /// Train a model on a corpus
    Train(TrainArgs),
    /// Generate features for a token file
    Generate(GenerateArgs),
    /// Compare analytic and probed receptive fields
    AnalyzeRf(AnalyzeRfArgs),
    /// Per-chunk latency of long-form generation
    Bench(BenchArgs),
    /// Re-run the command recorded in a run manifest
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeData(_) => "make-data",
            Command::Train(_) => "train",
            Command::Generate(_) => "generate",
            Command::AnalyzeRf(_) => "analyze-rf",
            Command::Bench(_) => "bench",
            Command::Replay(_) => "replay",
        }
    }

    /// Points every explicit output path at `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) {
        let move_into = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                let name = path.file_name().map(PathBuf::from).unwrap_or_default();
                *path = dir.join(name);
            }
        };
        match self {
            Command::MakeData(a) => move_into(&mut a.out),
            Command::Train(a) => move_into(&mut a.out),
            Command::Generate(a) => move_into(&mut a.out),
            Command::Bench(a) => move_into(&mut a.csv),
            Command::AnalyzeRf(_) | Command::Replay(_) => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct MakeDataArgs {
    /// Corpus config JSON; missing fields take defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory [default: <out-dir>/corpus]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Corpus directory; without it the default corpus is generated in memory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to continue from instead of a fresh init
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value = "sr")]
    pub preset: Preset,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 0.3)]
    pub drop_rate: f64,
    #[arg(long, default_value = "logitnormal")]
    pub t_sampler: TimeSampler,
    #[arg(long, default_value_t = 128)]
    pub batch_frames: usize,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Guidance strength for the held-out accuracy check
    #[arg(long, default_value_t = 0.5)]
    pub cfg_alpha: f32,
    /// Euler steps for the held-out accuracy check
    #[arg(long, default_value_t = 10)]
    pub ode_steps: usize,
    /// Held-out utterances sampled after training; 0 skips the check
    #[arg(long, default_value_t = 100)]
    pub eval_utterances: usize,
    /// Checkpoint directory [default: <out-dir>/checkpoint]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerateMode {
    Stream,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Checkpoint directory; without it a fresh tiny model is built from --seed
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "stream")]
    pub mode: GenerateMode,
    /// Swap the model's mask schedule for a preset
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long, default_value_t = 2)]
    pub chunk_blocks: usize,
    #[arg(long, default_value_t = 1)]
    pub context_mult: usize,
    #[arg(long, default_value_t = 10)]
    pub ode_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub cfg_alpha: f32,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    #[arg(long, default_value_t = 1)]
    pub max_inflight: usize,
    /// JSON list of token ids
    #[arg(long)]
    pub tokens: PathBuf,
    /// SFTN speaker vector [default: zeros]
    #[arg(long)]
    pub speaker: Option<PathBuf>,
    /// Output SFTN file [default: <out-dir>/features.sftn]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AnalyzeRfArgs {
    #[arg(long, conflicts_with = "schedule")]
    pub preset: Option<Preset>,
    /// Schedule JSON
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    /// Probe a trained checkpoint (its schedule unless one is given)
    #[arg(long, conflicts_with = "random")]
    pub checkpoint: Option<PathBuf>,
    /// Probe a tiny model with random weights (the default)
    #[arg(long)]
    pub random: bool,
    /// Frames per block for presets
    #[arg(long, default_value_t = 24)]
    pub block_size: usize,
    /// Independent probes, each with its own input draw
    #[arg(long, default_value_t = 3)]
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Mask preset; fresh models default to sr, checkpoints keep their own
    #[arg(long)]
    pub preset: Option<Preset>,
    /// sliding_window or causal_cumulative
    #[arg(long, default_value = "sliding_window")]
    pub mode: LatencyMode,
    #[arg(long, default_value_t = 100)]
    pub chunks: usize,
    #[arg(long, default_value_t = 2)]
    pub chunk_blocks: usize,
    #[arg(long, default_value_t = 1)]
    pub context_mult: usize,
    #[arg(long, default_value_t = 10)]
    pub ode_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    pub cfg_alpha: f32,
    /// Timed runs per chunk; the fastest is kept
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Latency CSV [default: <out-dir>/latency_<mode>.csv]
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run
    pub manifest: PathBuf,
}
