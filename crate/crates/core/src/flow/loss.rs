use rayon::prelude::*;

use super::{ot_flow_point, ot_target, VectorField};
use crate::backbone::{ConditionBundle, Dropout, Model, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real, SeededRng};

/// One regression example: noise, data, time and conditioning.
#[derive(Debug, Clone)]
pub struct FlowSample<T = f32> {
    pub x0: Matrix<T>,
    pub x1: Matrix<T>,
    pub t: f64,
    pub cond: ConditionBundle<T>,
    /// When set the whole bundle (tokens and speaker) is replaced by zeros.
    pub cond_dropped: bool,
    pub start_frame: usize,
}

impl<T: Real> FlowSample<T> {
    fn check(&self) -> Result<()> {
        if self.x0.shape() != self.x1.shape() || self.x0.rows() != self.cond.frames() {
            return Err(Error::Input(format!(
                "sample shapes disagree: x0 {:?}, x1 {:?}, {} condition frames",
                self.x0.shape(),
                self.x1.shape(),
                self.cond.frames()
            )));
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::Input(format!("sample time {} outside [0, 1]", self.t)));
        }
        Ok(())
    }

    pub fn effective_cond(&self) -> ConditionBundle<T> {
        if self.cond_dropped {
            self.cond.null_like()
        } else {
            self.cond.clone()
        }
    }

    pub fn cast<U: Real>(&self) -> FlowSample<U> {
        FlowSample {
            x0: self.x0.cast(),
            x1: self.x1.cast(),
            t: self.t,
            cond: ConditionBundle {
                cond: self.cond.cond.cast(),
                frame_ids: self.cond.frame_ids.clone(),
            },
            cond_dropped: self.cond_dropped,
            start_frame: self.start_frame,
        }
    }
}

fn element_count<T: Real>(batch: &[FlowSample<T>]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    batch.iter().try_for_each(|s| s.check())?;
    Ok(batch.iter().map(|s| s.x1.len()).sum())
}

fn squared_error<T: Real>(v: &Matrix<T>, target: &Matrix<T>) -> f64 {
    v.as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&a, &b)| {
            let d = (a - b).to_f64().unwrap();
            d * d
        })
        .sum()
}

/// Mean squared error over every frame, channel and sample, without gradients.
pub fn cfm_loss_value<T: Real, F: VectorField<T>>(field: &F, batch: &[FlowSample<T>]) -> Result<f64> {
    let n = element_count(batch)?;
    let parts = batch
        .par_iter()
        .map(|s| {
            let x_t = ot_flow_point(&s.x0, &s.x1, s.t)?;
            let target = ot_target(&s.x0, &s.x1)?;
            let v = field.eval(&x_t, s.t, &s.effective_cond(), s.start_frame)?;
            Ok(squared_error(&v, &target))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum::<f64>() / n as f64)
}

/// Loss and exact gradients for every parameter.
///
/// Samples are evaluated in parallel; their gradients are summed in batch
/// order, so the result does not depend on the thread count. When
/// `dropout_seed` is given and the model has a nonzero dropout rate, sample
/// `i` draws its dropout masks from stream `i` of that seed.
pub fn cfm_loss<T: Real>(
    model: &Model<T>,
    batch: &[FlowSample<T>],
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelParams<T>)> {
    let n = element_count(batch)?;
    let scale = T::lit(2.0 / n as f64);
    let parts = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let x_t = ot_flow_point(&s.x0, &s.x1, s.t)?;
            let target = ot_target(&s.x0, &s.x1)?;
            let mut dropout = dropout_seed.map(|seed| Dropout {
                rate: model.config.dropout,
                rng: SeededRng::new(seed, i as u64),
            });
            let (v, cache) =
                model.forward_train(&x_t, s.t, &s.effective_cond(), s.start_frame, dropout.as_mut())?;
            let sq = squared_error(&v, &target);
            let d_out = v.zip_map(&target, |a, b| (a - b) * scale)?;
            let grads = model.backward(&cache, &d_out)?;
            Ok((sq, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = parts.into_iter();
    let (mut total, mut grads) = iter.next().expect("batch is nonempty");
    for (sq, g) in iter {
        total += sq;
        grads.accumulate(&g);
    }
    Ok((total / n as f64, grads))
}
