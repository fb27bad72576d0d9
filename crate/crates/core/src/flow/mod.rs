//! OT conditional flow matching: straight-line paths, the regression loss,
//! classifier-free guidance and Euler integration.

mod loss;
mod train;

pub use loss::{cfm_loss, cfm_loss_value, FlowSample};
pub use train::{
    evaluation_batch, train_loop, write_loss_csv, Adam, DivergenceMonitor, LossPoint, TrainConfig, TrainReport,
};

use serde::{Deserialize, Serialize};

use crate::backbone::{ConditionBundle, Model};
use crate::error::{Error, Result};
use crate::numerics::rng::gaussian_at;
use crate::numerics::{Matrix, Real, SeededRng};

/// Anything that maps `(x_t, t, cond)` to a velocity of the same shape.
pub trait VectorField<T: Real = f32>: Sync {
    fn eval(
        &self,
        x_t: &Matrix<T>,
        t: f64,
        cond: &ConditionBundle<T>,
        start_frame: usize,
    ) -> Result<Matrix<T>>;
}

impl<T: Real> VectorField<T> for Model<T> {
    fn eval(
        &self,
        x_t: &Matrix<T>,
        t: f64,
        cond: &ConditionBundle<T>,
        start_frame: usize,
    ) -> Result<Matrix<T>> {
        self.vector_field(x_t, t, cond, start_frame)
    }
}

/// A plain function used as a vector field (handy for planted fields).
pub struct FieldFn<F>(pub F);

impl<F> VectorField for FieldFn<F>
where
    F: Fn(&Matrix, f64, &ConditionBundle) -> Matrix + Sync,
{
    fn eval(&self, x_t: &Matrix, t: f64, cond: &ConditionBundle, _start: usize) -> Result<Matrix> {
        Ok((self.0)(x_t, t, cond))
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Input(format!("flow time {t} outside [0, 1]")))
    }
}

/// `(1 - t) x0 + t x1`; exact at both endpoints.
pub fn ot_flow_point<T: Real>(x0: &Matrix<T>, x1: &Matrix<T>, t: f64) -> Result<Matrix<T>> {
    check_t(t)?;
    if t == 0.0 {
        return check_same(x0, x1).map(|_| x0.clone());
    }
    if t == 1.0 {
        return check_same(x0, x1).map(|_| x1.clone());
    }
    let t = T::lit(t);
    let s = T::one() - t;
    x0.zip_map(x1, |a, b| s * a + t * b)
        .map_err(|e| Error::Input(e.to_string()))
}

/// Regression target `x1 - x0`.
pub fn ot_target<T: Real>(x0: &Matrix<T>, x1: &Matrix<T>) -> Result<Matrix<T>> {
    x1.sub(x0).map_err(|e| Error::Input(e.to_string()))
}

fn check_same<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeSampler {
    /// `t = sigmoid(z)`, `z ~ N(mean, std^2)`.
    LogitNormal { mean: f64, std: f64 },
    Uniform,
}

impl Default for TimeSampler {
    fn default() -> Self {
        TimeSampler::LogitNormal {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl std::str::FromStr for TimeSampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logitnormal" | "logit_normal" | "logit-normal" => Ok(Self::default()),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!(
                "unknown t sampler {other:?} (expected logitnormal or uniform)"
            ))),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Training time in the open interval (0, 1).
pub fn sample_t(sampler: &TimeSampler, rng: &mut SeededRng) -> f64 {
    let t = match *sampler {
        TimeSampler::LogitNormal { mean, std } => sigmoid(mean + std * rng.next_gaussian()),
        TimeSampler::Uniform => rng.next_uniform(),
    };
    // Keep endpoints out even when the logit saturates in f64.
    t.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_alpha: f32,
    /// Noise seed for full-sequence sampling.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            cfg_alpha: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !self.cfg_alpha.is_finite() || self.cfg_alpha < 0.0 {
            return Err(Error::Config(format!(
                "cfg_alpha must be a non-negative number, got {}",
                self.cfg_alpha
            )));
        }
        Ok(())
    }
}

/// Standard normal noise for absolute frames `start..start + frames`; the
/// value at `(f, c)` depends only on `(seed, f, c)`.
pub fn position_noise(start: usize, frames: usize, dim: usize, seed: u64) -> Matrix {
    Matrix::from_fn(frames, dim, |f, c| {
        gaussian_at(seed, (start + f) as u64, c as u64) as f32
    })
}

/// `(1 + alpha) v(x, c) - alpha v(x, null)`. With `alpha == 0` only the
/// conditional branch is evaluated.
pub fn cfg_vector_field<F: VectorField>(
    field: &F,
    x: &Matrix,
    t: f64,
    cond: &ConditionBundle,
    alpha: f32,
    start_frame: usize,
) -> Result<Matrix> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::Config(format!("cfg_alpha {alpha} is negative")));
    }
    let vc = field.eval(x, t, cond, start_frame)?;
    if alpha == 0.0 {
        return Ok(vc);
    }
    let vu = field.eval(x, t, &cond.null_like(), start_frame)?;
    let a = alpha;
    vc.zip_map(&vu, |c, u| (1.0 + a) * c - a * u)
        .map_err(|e| Error::Invariant(e.to_string()))
}

/// Left-endpoint Euler from `t = 0` to `t = 1` in `steps` equal steps.
pub fn euler_sample<F: VectorField>(
    field: &F,
    x0: &Matrix,
    cond: &ConditionBundle,
    sampler: &SamplerConfig,
    start_frame: usize,
) -> Result<Matrix> {
    sampler.validate()?;
    let dt = 1.0 / sampler.steps as f32;
    let mut x = x0.clone();
    for k in 0..sampler.steps {
        let t = k as f64 / sampler.steps as f64;
        let v = cfg_vector_field(field, &x, t, cond, sampler.cfg_alpha, start_frame).map_err(
            |e| match e {
                Error::Numerical { location } => Error::Numerical {
                    location: format!("euler step {k}, {location}"),
                },
                other => other,
            },
        )?;
        for (xv, &vv) in x.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *xv += dt * vv;
        }
        if !x.all_finite() {
            return Err(Error::Numerical {
                location: format!("euler step {k}"),
            });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests;
