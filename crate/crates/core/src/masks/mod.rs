//! Block-wise attention masks and receptive-field algebra.
//!
//! A sequence of `n` frames is cut into blocks of `b` frames (the last block
//! may be shorter). Each DiT layer uses one mask kind; composing `p` Backward
//! layers and `q` Forward layers gives every output block a receptive field of
//! `p` past blocks, `q` future blocks and itself.

mod probe;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use crate::numerics::BoolMatrix;
use crate::error::{Error, Result};
pub use probe::{empirical_receptive_field, perturbation_support, ProbeOutcome};

/// Attention pattern of one layer.
///
/// `Block`, `Backward` and `Forward` are the three block-wise masks the
/// streaming model is built from. `Causal` (every earlier block) and `Full`
/// (unmasked) exist for the cumulative-history and offline baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Block,
    Backward,
    Forward,
    Causal,
    Full,
}

impl MaskKind {
    pub const FUNDAMENTAL: [MaskKind; 3] = [MaskKind::Block, MaskKind::Backward, MaskKind::Forward];

    /// Whether a query in block `qi` may attend to a key in block `kj`.
    #[inline]
    pub fn allows(self, qi: usize, kj: usize) -> bool {
        match self {
            MaskKind::Block => qi == kj,
            MaskKind::Backward => kj == qi || kj + 1 == qi,
            MaskKind::Forward => kj == qi || kj == qi + 1,
            MaskKind::Causal => kj <= qi,
            MaskKind::Full => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Block => "block",
            MaskKind::Backward => "backward",
            MaskKind::Forward => "forward",
            MaskKind::Causal => "causal",
            MaskKind::Full => "full",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(MaskKind::Block),
            "backward" => Ok(MaskKind::Backward),
            "forward" => Ok(MaskKind::Forward),
            "causal" => Ok(MaskKind::Causal),
            "full" => Ok(MaskKind::Full),
            other => Err(Error::Input(format!("unknown mask kind {other:?}"))),
        }
    }
}

#[inline]
pub fn block_index(frame: usize, block_size: usize) -> usize {
    frame / block_size
}

/// `n x n` mask for one layer; entry `(i, j)` is true when frame `i` may attend to frame `j`.
pub fn build_mask(kind: MaskKind, n: usize, block_size: usize) -> BoolMatrix {
    assert!(block_size >= 1, "block size must be positive");
    BoolMatrix::from_fn(n, n, |i, j| {
        kind.allows(block_index(i, block_size), block_index(j, block_size))
    })
}

/// Named schedules. Layer placements follow a 22-layer reference stack and are
/// rescaled for shallower models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small receptive field: 2 past blocks, 1 future block.
    Sr,
    /// Large receptive field: 2 past blocks, 2 future blocks.
    Lr,
    /// Unmasked attention everywhere (offline baseline).
    Full,
    /// Block-wise causal attention everywhere (cumulative-history baseline).
    Causal,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sr" => Ok(Preset::Sr),
            "lr" => Ok(Preset::Lr),
            "full" => Ok(Preset::Full),
            "causal" => Ok(Preset::Causal),
            other => Err(Error::Input(format!("unknown preset {other:?}"))),
        }
    }
}

const REFERENCE_DEPTH: usize = 22;
const REFERENCE_BACKWARD: [usize; 2] = [7, 14];

impl Preset {
    pub fn schedule(self, layers: usize, block_size_frames: usize) -> Result<MaskSchedule> {
        match self {
            Preset::Full => MaskSchedule::new(vec![MaskKind::Full; layers], block_size_frames),
            Preset::Causal => MaskSchedule::new(vec![MaskKind::Causal; layers], block_size_frames),
            Preset::Sr | Preset::Lr => {
                if layers < 4 {
                    return Err(Error::Config(format!(
                        "preset {self:?} needs at least 4 layers, got {layers}"
                    )));
                }
                let backward: Vec<usize> = REFERENCE_BACKWARD
                    .iter()
                    .map(|&l| (l * layers).div_ceil(REFERENCE_DEPTH))
                    .collect();
                let forward = match self {
                    Preset::Sr => vec![1],
                    _ => vec![1, layers],
                };
                MaskSchedule::from_placements(layers, block_size_frames, &backward, &forward)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub layer_masks: Vec<MaskKind>,
    pub block_size_frames: usize,
}

impl MaskSchedule {
    pub fn new(layer_masks: Vec<MaskKind>, block_size_frames: usize) -> Result<Self> {
        let s = Self {
            layer_masks,
            block_size_frames,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn all(kind: MaskKind, layers: usize, block_size_frames: usize) -> Result<Self> {
        Self::new(vec![kind; layers], block_size_frames)
    }

    /// Builds a schedule from 1-based layer numbers; unlisted layers use `Block`.
    pub fn from_placements(
        layers: usize,
        block_size_frames: usize,
        backward_1based: &[usize],
        forward_1based: &[usize],
    ) -> Result<Self> {
        let mut masks = vec![MaskKind::Block; layers];
        for (kind, list) in [
            (MaskKind::Backward, backward_1based),
            (MaskKind::Forward, forward_1based),
        ] {
            for &layer in list {
                if layer == 0 || layer > layers {
                    return Err(Error::Config(format!(
                        "layer {layer} outside 1..={layers}"
                    )));
                }
                if masks[layer - 1] != MaskKind::Block {
                    return Err(Error::Config(format!("layer {layer} assigned twice")));
                }
                masks[layer - 1] = kind;
            }
        }
        Self::new(masks, block_size_frames)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size_frames == 0 {
            return Err(Error::Config("block_size_frames must be >= 1".into()));
        }
        if self.layer_masks.is_empty() {
            return Err(Error::Config("schedule needs at least one layer".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layer_masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layer_masks.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)
            .map_err(|e| Error::Input(format!("schedule JSON: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Per-layer reach in blocks. `None` means unbounded (reaches the sequence edge).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub past_blocks: Option<usize>,
    pub future_blocks: Option<usize>,
}

impl ReceptiveField {
    pub fn bounded(past: usize, future: usize) -> Self {
        Self {
            past_blocks: Some(past),
            future_blocks: Some(future),
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.past_blocks.is_some() && self.future_blocks.is_some()
    }

    /// `(p + q + 1) * b`, or `None` if either side is unbounded.
    pub fn span_frames(&self, block_size: usize) -> Option<usize> {
        Some((self.past_blocks? + self.future_blocks? + 1) * block_size)
    }

    pub fn span_blocks(&self) -> Option<usize> {
        Some(self.past_blocks? + self.future_blocks? + 1)
    }
}

impl fmt::Display for ReceptiveField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = |v: Option<usize>| v.map_or_else(|| "all".to_string(), |n| n.to_string());
        write!(
            f,
            "past={} future={}",
            side(self.past_blocks),
            side(self.future_blocks)
        )
    }
}

pub fn receptive_field(schedule: &MaskSchedule) -> ReceptiveField {
    let count = |k: MaskKind| schedule.layer_masks.iter().filter(|&&m| m == k).count();
    let any = |k: MaskKind| schedule.layer_masks.contains(&k);
    let full = any(MaskKind::Full);
    ReceptiveField {
        past_blocks: (!full && !any(MaskKind::Causal)).then(|| count(MaskKind::Backward)),
        future_blocks: (!full).then(|| count(MaskKind::Forward)),
    }
}
