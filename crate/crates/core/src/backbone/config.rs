use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{MaskSchedule, Preset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    /// Channels of the generated feature frames.
    pub feature_dim: usize,
    pub token_vocab: usize,
    pub token_embed_dim: usize,
    pub speaker_dim: usize,
    /// Feature frames per token.
    pub upsample_factor: usize,
    /// Training-only dropout on attention probabilities and MLP activations.
    pub dropout: f32,
    pub mlp_ratio: usize,
    /// Add sinusoidal absolute-frame positions to the hidden input.
    pub positional: bool,
    pub norm_eps: f32,
    pub schedule: MaskSchedule,
}

impl ModelConfig {
    /// Desk-scale model: 4 layers, width 64, 4 heads, 8 feature channels,
    /// 32 tokens, 8-frame blocks, 4 frames per token, SR schedule.
    pub fn tiny() -> Self {
        Self {
            layers: 4,
            hidden_dim: 64,
            heads: 4,
            feature_dim: 8,
            token_vocab: 32,
            token_embed_dim: 16,
            speaker_dim: 8,
            upsample_factor: 4,
            dropout: 0.0,
            mlp_ratio: 4,
            positional: true,
            norm_eps: 1e-5,
            schedule: Preset::Sr.schedule(4, 8).expect("tiny SR schedule"),
        }
    }

    /// Reference-scale shape: 22 layers, width 1024, 16 heads, 80 mel
    /// channels, 24-frame blocks, 25 Hz tokens against 100 fps features.
    pub fn reference() -> Self {
        Self {
            layers: 22,
            hidden_dim: 1024,
            heads: 16,
            feature_dim: 80,
            token_vocab: 4096,
            token_embed_dim: 512,
            speaker_dim: 192,
            upsample_factor: 4,
            dropout: 0.1,
            mlp_ratio: 4,
            positional: true,
            norm_eps: 1e-6,
            schedule: Preset::Sr.schedule(22, 24).expect("reference SR schedule"),
        }
    }

    /// Same config with the schedule swapped for a preset of the same depth.
    pub fn with_preset(mut self, preset: Preset) -> Result<Self> {
        self.schedule = preset.schedule(self.layers, self.schedule.block_size_frames)?;
        Ok(self)
    }

    pub fn with_schedule(mut self, schedule: MaskSchedule) -> Result<Self> {
        self.layers = schedule.len();
        self.schedule = schedule;
        self.validate()?;
        Ok(self)
    }

    pub fn block_size(&self) -> usize {
        self.schedule.block_size_frames
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn cond_dim(&self) -> usize {
        self.token_embed_dim + self.speaker_dim
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.schedule.validate()?;
        if self.layers == 0 || self.hidden_dim == 0 || self.heads == 0 || self.feature_dim == 0 {
            return bad("layers, hidden_dim, heads and feature_dim must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return bad("hidden_dim must be even for sinusoidal features".into());
        }
        if self.upsample_factor == 0 {
            return bad("upsample_factor must be >= 1".into());
        }
        if self.token_vocab == 0 {
            return bad("token_vocab must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        if self.schedule.len() != self.layers {
            return bad(format!(
                "schedule has {} layers, model has {}",
                self.schedule.len(),
                self.layers
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_dim;
        let m = self.mlp_dim();
        let linear = |i: usize, o: usize| i * o + o;
        let per_layer = 4 * linear(h, h) + linear(h, m) + linear(m, h) + linear(h, 6 * h);
        self.token_vocab * self.token_embed_dim
            + linear(self.feature_dim + self.cond_dim(), h)
            + 2 * linear(h, h)
            + self.layers * per_layer
            + linear(h, self.feature_dim)
    }
}
