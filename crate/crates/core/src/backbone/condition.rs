use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Each token id repeated `factor` times, order preserved.
pub fn upsample_tokens(tokens: &[u32], factor: usize) -> Vec<u32> {
    tokens
        .iter()
        .flat_map(|&t| std::iter::repeat_n(t, factor))
        .collect()
}

/// Frame-aligned conditioning: token embeddings in the first
/// `token_embed_dim` columns, the broadcast speaker embedding after them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle<T = f32> {
    pub cond: Matrix<T>,
    /// Source ids of each frame; `None` for the null (unconditional) bundle.
    pub frame_ids: Option<Vec<u32>>,
}

impl<T: Real> ConditionBundle<T> {
    /// All-zeros bundle used for the unconditional branch.
    pub fn null(frames: usize, width: usize) -> Self {
        Self {
            cond: Matrix::zeros(frames, width),
            frame_ids: None,
        }
    }

    pub fn frames(&self) -> usize {
        self.cond.rows()
    }

    pub fn is_null(&self) -> bool {
        self.frame_ids.is_none()
    }

    pub fn null_like(&self) -> Self {
        Self::null(self.cond.rows(), self.cond.cols())
    }

    /// Rows `range` of the bundle.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            cond: self.cond.slice_rows(range.clone()),
            frame_ids: self.frame_ids.as_ref().map(|ids| ids[range].to_vec()),
        }
    }
}

pub(crate) fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= vocab) {
        return Err(Error::Input(format!(
            "token id {id} at frame {pos} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}

pub fn assemble_condition<T: Real>(
    frame_ids: &[u32],
    speaker: &[f32],
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<ConditionBundle<T>> {
    if speaker.len() != config.speaker_dim {
        return Err(Error::Input(format!(
            "speaker embedding has {} values, expected {}",
            speaker.len(),
            config.speaker_dim
        )));
    }
    check_ids(frame_ids, config.token_vocab)?;
    let e = config.token_embed_dim;
    let mut cond = Matrix::zeros(frame_ids.len(), config.cond_dim());
    for (f, &id) in frame_ids.iter().enumerate() {
        let row = cond.row_mut(f);
        row[..e].copy_from_slice(params.token_embed.row(id as usize));
        for (dst, &s) in row[e..].iter_mut().zip(speaker) {
            *dst = T::from_f32(s).unwrap();
        }
    }
    Ok(ConditionBundle {
        cond,
        frame_ids: Some(frame_ids.to_vec()),
    })
}
