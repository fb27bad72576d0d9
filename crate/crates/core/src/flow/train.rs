use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{cfm_loss, position_noise, sample_t, FlowSample, TimeSampler};
use crate::backbone::{Model, ModelParams};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Loss above this multiple of the first step's loss counts toward divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive steps above the threshold before training is abandoned.
pub const DIVERGENCE_PATIENCE: usize = 100;

const BATCH_TAG: u64 = 0x4241_5443;
const DROPOUT_TAG: u64 = 0x4452_4f50;
const EVAL_TAG: u64 = 0x4556_414c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f32,
    /// Utterances are drawn until the batch holds at least this many frames.
    pub batch_frames: usize,
    pub cond_drop_rate: f64,
    pub t_sampler: TimeSampler,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-3,
            batch_frames: 128,
            cond_drop_rate: 0.3,
            t_sampler: TimeSampler::default(),
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_drop_rate) {
            return Err(Error::Config(format!(
                "cond_drop_rate {} outside [0, 1]",
                self.cond_drop_rate
            )));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate {} must be non-negative",
                self.learning_rate
            )));
        }
        if self.batch_frames == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_frames and log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: ModelParams,
    v: ModelParams,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams, config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for (((p, &g), m), v) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

fn clip_gradients(grads: &mut ModelParams, max_norm: f32) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|m| m.as_slice())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for m in grads.tensors_mut() {
            m.as_mut_slice().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Flags a run whose loss stays above `DIVERGENCE_FACTOR` times the first
/// observed loss for `DIVERGENCE_PATIENCE` consecutive steps.
#[derive(Debug, Clone, Default)]
pub struct DivergenceMonitor {
    initial: Option<f64>,
    above: usize,
}

impl DivergenceMonitor {
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.above += 1;
            if self.above >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged { step, loss });
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
    /// Every `log_every`-th step plus the last one.
    pub trace: Vec<LossPoint>,
}

fn flow_sample(
    model: &Model,
    utt: &Utterance,
    noise_seed: u64,
    t: f64,
    cond_dropped: bool,
) -> Result<FlowSample> {
    let config = &model.config;
    let ids = utt.frame_ids(config.upsample_factor);
    let cond = model.assemble_condition(&ids, &utt.speaker)?;
    Ok(FlowSample {
        x0: position_noise(0, utt.frames(), config.feature_dim, noise_seed),
        x1: utt.features.clone(),
        t,
        cond,
        cond_dropped,
        start_frame: 0,
    })
}

fn draw_batch(
    model: &Model,
    data: &[Utterance],
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<Vec<FlowSample>> {
    let mut batch = Vec::new();
    let mut frames = 0;
    while frames < config.batch_frames {
        let utt = &data[rng.below(data.len())];
        let noise_seed = rng.next_u64();
        let t = sample_t(&config.t_sampler, rng);
        let dropped = rng.bernoulli(config.cond_drop_rate);
        batch.push(flow_sample(model, utt, noise_seed, t, dropped)?);
        frames += utt.frames();
    }
    Ok(batch)
}

/// A fixed, condition-keeping batch over the first `count` utterances, used to
/// compare losses before and after training.
pub fn evaluation_batch(
    model: &Model,
    data: &[Utterance],
    count: usize,
    sampler: &TimeSampler,
    seed: u64,
) -> Result<Vec<FlowSample>> {
    let mut rng = SeededRng::new(seed, EVAL_TAG);
    data.iter()
        .take(count)
        .map(|utt| {
            let noise_seed = rng.next_u64();
            let t = sample_t(sampler, &mut rng);
            flow_sample(model, utt, noise_seed, t, false)
        })
        .collect()
}

/// Trains `model` in place with Adam on the flow-matching loss.
///
/// Every random choice (batch composition, noise, times, condition drops,
/// dropout) is keyed on `(seed, step)`, so equal seeds give equal traces.
pub fn train_loop(
    model: &mut Model,
    data: &[Utterance],
    config: &TrainConfig,
    seed: u64,
    mut on_log: impl FnMut(LossPoint),
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let root = SeededRng::new(seed, BATCH_TAG);
    let mut adam = Adam::new(&model.params, config);
    let mut losses = Vec::with_capacity(config.steps);
    let mut trace = Vec::new();
    let mut monitor = DivergenceMonitor::default();
    for step in 0..config.steps {
        let mut rng = root.fork(step as u64);
        let batch = draw_batch(model, data, config, &mut rng)?;
        let dropout_seed = (model.config.dropout > 0.0)
            .then(|| root.fork(DROPOUT_TAG ^ step as u64).next_u64());
        let (loss, mut grads) = cfm_loss(model, &batch, dropout_seed)?;
        if !loss.is_finite() {
            return Err(Error::Numerical {
                location: format!("training loss at step {step}"),
            });
        }
        if config.grad_clip > 0.0 {
            clip_gradients(&mut grads, config.grad_clip);
        }
        adam.step(&mut model.params, &grads);
        losses.push(loss);
        monitor.observe(step, loss)?;
        if step % config.log_every == 0 || step + 1 == config.steps {
            let point = LossPoint { step, loss };
            trace.push(point);
            on_log(point);
        }
    }
    Ok(TrainReport { losses, trace })
}

/// Writes `step,loss` rows.
pub fn write_loss_csv(path: &Path, trace: &[LossPoint]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for p in trace {
        out.push_str(&format!("{},{}\n", p.step, p.loss));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
