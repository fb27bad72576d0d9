//! Perturbation probing of the model's receptive field.

use super::{block_index, receptive_field, ReceptiveField};
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Which output blocks moved when one input block was perturbed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeOutcome {
    pub probe_block: usize,
    pub total_blocks: usize,
    /// First and last output block whose rows differ bitwise from the baseline.
    pub changed_blocks: Option<(usize, usize)>,
}

impl ProbeOutcome {
    /// Observed reach, seen from the output side: an output block `k` blocks
    /// after the probe that moved has the probe in its past. A side that
    /// touches the sequence edge is reported as unbounded.
    pub fn as_field(&self) -> ReceptiveField {
        match self.changed_blocks {
            None => ReceptiveField::bounded(0, 0),
            Some((lo, hi)) => ReceptiveField {
                past_blocks: (hi + 1 < self.total_blocks).then(|| hi - self.probe_block),
                future_blocks: (lo > 0).then(|| self.probe_block - lo),
            },
        }
    }
}

/// Adds `+1.0` to every channel of the probe block and reports which output
/// blocks changed after one vector-field evaluation.
pub fn perturbation_support(
    model: &Model,
    frames: usize,
    probe_block: usize,
    seed: u64,
) -> Result<ProbeOutcome> {
    let config = &model.config;
    let b = config.block_size();
    let total_blocks = frames.div_ceil(b);
    if probe_block >= total_blocks {
        return Err(Error::Input(format!(
            "probe block {probe_block} outside {total_blocks} blocks"
        )));
    }
    let mut rng = SeededRng::new(seed, 0x5052_4f42);
    let x = Matrix::from_fn(frames, config.feature_dim, |_, _| rng.next_gaussian() as f32);
    let tokens: Vec<u32> = (0..frames)
        .map(|_| rng.below(config.token_vocab) as u32)
        .collect();
    let speaker: Vec<f32> = (0..config.speaker_dim)
        .map(|_| rng.next_gaussian() as f32)
        .collect();
    let t = rng.next_uniform();
    let cond = model.assemble_condition(&tokens, &speaker)?;

    let base = model.vector_field(&x, t, &cond, 0)?;
    let mut bumped = x.clone();
    for f in probe_block * b..((probe_block + 1) * b).min(frames) {
        for v in bumped.row_mut(f) {
            *v += 1.0;
        }
    }
    let moved = model.vector_field(&bumped, t, &cond, 0)?;
    let changed: Vec<usize> = (0..frames)
        .filter(|&f| {
            base.row(f)
                .iter()
                .zip(moved.row(f))
                .any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .map(|f| block_index(f, b))
        .collect();
    Ok(ProbeOutcome {
        probe_block,
        total_blocks,
        changed_blocks: changed.first().copied().zip(changed.last().copied()),
    })
}

/// Measures the receptive field of `model` around an interior probe block.
///
/// Bounded sides of the analytic field must fit strictly inside the sequence
/// with one spare block, otherwise the probe could not tell a clipped field
/// from a short one. Past reach shows up after the probe, future reach before it.
pub fn empirical_receptive_field(
    model: &Model,
    frames: usize,
    probe_block: usize,
    seed: u64,
) -> Result<ReceptiveField> {
    let analytic = receptive_field(&model.config.schedule);
    let total_blocks = frames.div_ceil(model.config.block_size());
    let need_past = analytic.past_blocks.map_or(0, |p| p + 1);
    let need_future = analytic.future_blocks.map_or(0, |q| q + 1);
    if probe_block < need_future || probe_block + need_past >= total_blocks {
        return Err(Error::BoundaryProbe {
            probe: probe_block,
            blocks: total_blocks,
            needed_past: need_past,
            needed_future: need_future,
        });
    }
    Ok(perturbation_support(model, frames, probe_block, seed)?.as_field())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{GateInit, ModelConfig, ModelParams};
    use crate::masks::{MaskKind, MaskSchedule, Preset};

    fn random_model(schedule: MaskSchedule, heads: usize, seed: u64) -> Model {
        let mut config = ModelConfig::tiny().with_schedule(schedule).unwrap();
        config.heads = heads;
        let params = ModelParams::init_with(&config, seed, GateInit::Random(0.5));
        Model::new(config, params).unwrap()
    }

    #[test]
    fn three_mask_stack_spans_three_blocks() {
        use MaskKind::*;
        let s = MaskSchedule::new(vec![Forward, Block, Backward], 4).unwrap();
        let model = random_model(s, 4, 1);
        let rf = empirical_receptive_field(&model, 40, 5, 9).unwrap();
        assert_eq!(rf, ReceptiveField::bounded(1, 1));
        assert_eq!(rf.span_blocks(), Some(3));
    }

    #[test]
    fn block_only_changes_stay_in_probe_block() {
        let s = MaskSchedule::all(MaskKind::Block, 3, 4).unwrap();
        let model = random_model(s, 2, 2);
        let out = perturbation_support(&model, 24, 3, 1).unwrap();
        assert_eq!(out.changed_blocks, Some((3, 3)));
    }

    #[test]
    fn sr_preset_reaches_two_back_one_forward() {
        let s = Preset::Sr.schedule(4, 8).unwrap();
        let model = random_model(s, 4, 3);
        let rf = empirical_receptive_field(&model, 80, 4, 4).unwrap();
        assert_eq!(rf, ReceptiveField::bounded(2, 1));
    }

    #[test]
    fn support_does_not_depend_on_head_count() {
        let s = Preset::Lr.schedule(5, 4).unwrap();
        let one = empirical_receptive_field(&random_model(s.clone(), 1, 7), 48, 5, 1).unwrap();
        let four = empirical_receptive_field(&random_model(s, 4, 7), 48, 5, 1).unwrap();
        assert_eq!(one, four);
        assert_eq!(one, ReceptiveField::bounded(2, 2));
    }

    #[test]
    fn boundary_probe_is_rejected() {
        let s = Preset::Sr.schedule(4, 8).unwrap();
        let model = random_model(s, 4, 3);
        assert!(matches!(
            empirical_receptive_field(&model, 80, 1, 0),
            Err(Error::BoundaryProbe { .. })
        ));
        assert!(matches!(
            empirical_receptive_field(&model, 80, 7, 0),
            Err(Error::BoundaryProbe { .. })
        ));
    }

    #[test]
    fn full_attention_reaches_both_edges() {
        let s = Preset::Full.schedule(4, 4).unwrap();
        let model = random_model(s, 4, 5);
        let rf = empirical_receptive_field(&model, 32, 3, 0).unwrap();
        assert_eq!(rf, receptive_field(&model.config.schedule));
        let s = Preset::Causal.schedule(4, 4).unwrap();
        let model = random_model(s, 4, 5);
        let rf = empirical_receptive_field(&model, 32, 3, 0).unwrap();
        assert_eq!(rf, receptive_field(&model.config.schedule));
    }

    #[test]
    fn zero_gates_confine_everything_to_the_probe() {
        let config = ModelConfig::tiny();
        let model = Model::init(config, 0).unwrap();
        let out = perturbation_support(&model, 64, 3, 0).unwrap();
        assert_eq!(out.changed_blocks, Some((3, 3)));
    }
}
