//! Full-batch first-order training loops.

use alloc::vec;
use alloc::vec::Vec;

use super::params::{hybrid_param_mut, model_param_mut, ParamGrads, TrainableSet};
use super::record::{alignment_gradients, joint_gradients};
use super::{AlignmentSample, JointSample};
use crate::error::{Error, Result};
use crate::hybrid::HybridLayer;
use crate::numerics::{Rng, Tensor};
use crate::streaming::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Heavy-ball SGD.
    Momentum {
        beta: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Momentum { beta: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl TrainConfig {
    pub fn new(steps: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            steps,
            learning_rate,
            seed,
            optimizer: Optimizer::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument {
                detail: alloc::format!("learning rate {}", self.learning_rate),
            });
        }
        Ok(())
    }
}

/// Loss history of one run. `loss_trace[i]` is the batch loss before
/// update `i`; `final_loss` is measured after the last update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

impl TrainRun {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace.first().copied().unwrap_or(self.final_loss)
    }

    /// Trailing mean over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.loss_trace.len());
        let mut acc = 0.0;
        for (i, &l) in self.loss_trace.iter().enumerate() {
            acc += l;
            if i >= w {
                acc -= self.loss_trace[i - w];
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }
}

/// Draws correlated frames: every frame of a sample is
/// `scale·(ρ·base + √(1−ρ²)·fresh)`.
fn correlated_frames(
    rng: &mut Rng,
    count: usize,
    tokens: usize,
    dim: usize,
    correlation: f64,
    scale: f64,
) -> Result<Vec<Tensor>> {
    let base = rng.normal_tensor([tokens, dim], 1.0);
    let rho = correlation.clamp(0.0, 1.0);
    let mix = libm::sqrt(1.0 - rho * rho);
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let fresh = rng.normal_tensor([tokens, dim], 1.0);
        frames.push(base.scale(rho * scale).add(&fresh.scale(mix * scale))?);
    }
    Ok(frames)
}

/// Synthetic teacher hidden states for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSampler {
    pub batch: usize,
    pub tokens: usize,
    pub history_frames: usize,
    /// Correlation between the frames of one sample; the recurrent branch
    /// can only help when the history says something about the present.
    pub correlation: f64,
    pub scale: f64,
}

impl AlignmentSampler {
    pub fn draw(&self, model_dim: usize, seed: u64) -> Result<Vec<AlignmentSample>> {
        let mut rng = Rng::new(seed);
        (0..self.batch)
            .map(|_| {
                let mut frames = correlated_frames(
                    &mut rng,
                    self.history_frames + 1,
                    self.tokens,
                    model_dim,
                    self.correlation,
                    self.scale,
                )?;
                let x_t = frames.pop().expect("at least one frame");
                Ok(AlignmentSample { history: frames, x_t })
            })
            .collect()
    }
}

/// Synthetic latents for joint distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSampler {
    pub batch: usize,
    pub tokens: usize,
    pub history_frames: usize,
    pub correlation: f64,
}

impl JointSampler {
    pub fn draw(&self, model_dim: usize, seed: u64) -> Result<Vec<JointSample>> {
        let mut rng = Rng::new(seed);
        (0..self.batch)
            .map(|_| {
                let history = correlated_frames(
                    &mut rng,
                    self.history_frames,
                    self.tokens,
                    model_dim,
                    self.correlation,
                    1.0,
                )?;
                let z = rng.normal_tensor([self.tokens, model_dim], 1.0);
                let t = 1.0 - rng.uniform();
                Ok(JointSample { history, z, t })
            })
            .collect()
    }
}

struct OptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl OptState {
    fn new() -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Update for every gradient entry, in entry order.
    fn deltas(&mut self, grads: &ParamGrads, cfg: &TrainConfig) -> Vec<Tensor> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let lr = cfg.learning_rate;
        grads
            .iter()
            .enumerate()
            .map(|(i, (_, g))| {
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &gj)| match cfg.optimizer {
                        Optimizer::Momentum { beta } => {
                            m[j] = beta * m[j] + gj;
                            -lr * m[j]
                        }
                        Optimizer::Adam { beta1, beta2, eps } => {
                            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                            let mh = m[j] / (1.0 - libm::pow(beta1, self.t as f64));
                            let vh = v[j] / (1.0 - libm::pow(beta2, self.t as f64));
                            -lr * mh / (libm::sqrt(vh) + eps)
                        }
                    })
                    .collect();
                Tensor::new(g.shape().to_vec(), data).expect("same shape as the gradient")
            })
            .collect()
    }
}

fn check_loss(loss: f64, initial: f64, step: usize) -> Result<()> {
    if !loss.is_finite() || loss > 1e6 * initial.max(1e-12) {
        return Err(Error::Divergence { step });
    }
    Ok(())
}

/// Stage 1: trains the recurrent parameters of `layer` (labeled `index`)
/// against its own frozen projections on a fixed batch drawn from
/// `sampler` with `cfg.seed`. Only the nine recurrent parameters move.
pub fn train_stage1(
    layer: &mut HybridLayer,
    index: usize,
    sampler: &AlignmentSampler,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    let data = sampler.draw(layer.proj().model_dim(), cfg.seed)?;
    let mut opt = OptState::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = alignment_gradients(layer, index, &data)?;
        check_loss(loss, trace.first().copied().unwrap_or(loss), step)?;
        trace.push(loss);
        for ((id, _), delta) in grads.iter().zip(opt.deltas(&grads, cfg)) {
            let p = hybrid_param_mut(layer, id.kind).expect("trainable parameter");
            *p = p.add(&delta)?;
        }
    }
    let final_loss = alignment_gradients(layer, index, &data)?.0;
    check_loss(final_loss, trace.first().copied().unwrap_or(final_loss), cfg.steps)?;
    Ok(TrainRun {
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        loss_trace: trace,
        final_loss,
    })
}

/// Stage 2: trains every hybrid layer's recurrent parameters and every
/// feedforward weight of `student` to match `teacher` velocities.
pub fn train_stage2(
    student: &mut ToyModel,
    teacher: &ToyModel,
    sampler: &JointSampler,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    let data = sampler.draw(student.dims().model_dim(), cfg.seed)?;
    let trainable = TrainableSet::stage2(student);
    let mut opt = OptState::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = joint_gradients(student, teacher, &data, &trainable)?;
        check_loss(loss, trace.first().copied().unwrap_or(loss), step)?;
        trace.push(loss);
        for ((id, _), delta) in grads.iter().zip(opt.deltas(&grads, cfg)) {
            let p = model_param_mut(student, *id).expect("trainable parameter");
            *p = p.add(&delta)?;
        }
    }
    let final_loss = joint_gradients(student, teacher, &data, &trainable)?.0;
    check_loss(final_loss, trace.first().copied().unwrap_or(final_loss), cfg.steps)?;
    Ok(TrainRun {
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        loss_trace: trace,
        final_loss,
    })
}
