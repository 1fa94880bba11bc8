//! Distillation of hybrid layers from their softmax teachers.
//!
//! Stage 1 aligns one hybrid layer with the frozen softmax attention it
//! replaces, both fed the same teacher hidden states (output MSE normalized
//! by `L·d`). Stage 2 matches the velocity of a partly hybrid toy model to
//! the all-softmax teacher.
//!
//! Each loss exists twice: a plain evaluation built on the inference kernels
//! (used by finite-difference checks and reporting) and a recording on the
//! gradient [`Tape`](crate::autodiff::Tape) (used for training). The recorded
//! state build goes through every history frame, so gradients flow through
//! the recurrence into `φ_k`, `φ_v` and the gate predictors.

mod params;
mod record;
mod train;

use alloc::vec::Vec;

pub use params::{
    hybrid_param, hybrid_param_mut, model_param, model_param_mut, ParamGrads, ParamId, ParamKind, TrainableSet,
};
pub use record::{alignment_gradients, joint_gradients};
pub use train::{train_stage1, train_stage2, AlignmentSampler, JointSampler, Optimizer, TrainConfig, TrainRun};

use crate::attention::{append_clean_frame, full_attention, KVCache, ProjectionSet};
use crate::error::{Error, Result};
use crate::hybrid::HybridLayer;
use crate::numerics::Tensor;
use crate::streaming::ToyModel;

/// Clean history frames (teacher hidden states at this layer) followed by
/// the noisy frame the loss is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSample {
    pub history: Vec<Tensor>,
    pub x_t: Tensor,
}

/// Clean latents of earlier frames, then the noisy latent `z` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub history: Vec<Tensor>,
    pub z: Tensor,
    pub t: f64,
}

/// `‖y' − y‖²_F / (L·d)` between the student's hybrid output and the
/// teacher's full attention on `x_t`, given the memories both already hold.
pub fn alignment_loss(
    student: &HybridLayer,
    teacher_proj: &ProjectionSet,
    teacher_cache: &KVCache,
    x_t: &Tensor,
    frame_index: usize,
) -> Result<f64> {
    if student.proj() != teacher_proj {
        return Err(Error::InvalidArgument {
            detail: "student and teacher must share the frozen projections".into(),
        });
    }
    let teacher = full_attention(x_t, teacher_cache, teacher_proj)?;
    let y = student.forward(x_t, frame_index)?;
    let diff = y.sub(&teacher)?;
    Ok(diff.frobenius_sq() / (x_t.rows() * x_t.cols()) as f64)
}

/// Builds the teacher cache and a fresh student state from the sample's
/// history, then evaluates [`alignment_loss`] on its noisy frame.
pub fn alignment_loss_on_sample(student: &HybridLayer, sample: &AlignmentSample) -> Result<f64> {
    let mut student = student.clone();
    student.state.reset();
    let proj = student.proj().clone();
    let mut cache = KVCache::new(student.state.matrices().precision());
    for (f, frame) in sample.history.iter().enumerate() {
        append_clean_frame(&mut cache, frame, &proj)?;
        student.absorb_clean_frame(frame, f)?;
    }
    alignment_loss(&student, &proj, &cache, &sample.x_t, sample.history.len())
}

/// Mean of [`alignment_loss_on_sample`] over a batch.
pub fn alignment_loss_batch(student: &HybridLayer, samples: &[AlignmentSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += alignment_loss_on_sample(student, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Velocity of `model` on `z` at time `t` after committing the history
/// frames through clean passes. The model itself is not modified.
pub fn velocity_after_history(model: &ToyModel, sample: &JointSample) -> Result<Tensor> {
    let mut m = model.clone();
    m.reset_memory();
    for (f, clean) in sample.history.iter().enumerate() {
        let (_, inputs) = m.run(clean, 0.0, f)?;
        for (layer, input) in m.layers.iter_mut().zip(&inputs) {
            layer.attn.commit(input, f)?;
        }
    }
    m.velocity(&sample.z, sample.t, sample.history.len())
}

/// `‖v_student − v_teacher‖²` on one sample.
pub fn joint_loss(student: &ToyModel, teacher: &ToyModel, sample: &JointSample) -> Result<f64> {
    let vs = velocity_after_history(student, sample)?;
    let vt = velocity_after_history(teacher, sample)?;
    Ok(vs.sub(&vt)?.frobenius_sq())
}

/// Mean of [`joint_loss`] over a batch.
pub fn joint_loss_batch(student: &ToyModel, teacher: &ToyModel, samples: &[JointSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += joint_loss(student, teacher, s)?;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests;
