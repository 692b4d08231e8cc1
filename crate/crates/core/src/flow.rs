//! Conditional flow matching: linear interpolation path, the matching
//! objective, and an Euler sampler along the generation trajectory.
//!
//! The velocity field regresses toward the displacement `x1 - x0` between a
//! standard-normal draw and the data target; sampling integrates the field
//! from noise at t = 0 to data at t = 1.

use crate::dataset::VideoCondition;
use crate::model::{ModelError, VelocityField};
use crate::seeding::substream;
use foleyflow_autograd::Tensor;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("interpolation timestep {0} outside [0, 1]")]
    BadTimestep(f64),
    #[error("x0 and x1 shapes differ: {x0:?} vs {x1:?}")]
    ShapeMismatch { x0: Vec<usize>, x1: Vec<usize> },
    #[error("frame counts differ in joint target: audio {audio} vs events {events}")]
    FrameMismatch { audio: usize, events: usize },
    #[error("non-finite loss at batch index {index}")]
    NonFiniteLoss { index: usize },
    #[error("non-finite state at sampler step {step}")]
    NonFiniteState { step: usize },
    #[error("sampler needs at least one step")]
    NoSteps,
    #[error("variant has no flow head; nothing to integrate")]
    NoFlowHead,
    #[error("model error: {0}")]
    Model(#[from] ModelError),
}

/// One training example for the matching objective.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x0: Tensor<f64>,
    pub x1: Tensor<f64>,
    pub t: f64,
    pub cond: VideoCondition,
}

/// `x_t = t * x1 + (1 - t) * x0`, elementwise.
pub fn interpolate(
    x0: &Tensor<f64>,
    x1: &Tensor<f64>,
    t: f64,
) -> Result<Tensor<f64>, FlowError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::BadTimestep(t));
    }
    if x0.shape() != x1.shape() {
        return Err(FlowError::ShapeMismatch {
            x0: x0.shape().to_vec(),
            x1: x1.shape().to_vec(),
        });
    }
    Ok(x0.zip(x1, |a, b| t * b + (1.0 - t) * a))
}

/// Channel-wise concatenation of the audio target with encoded event logits,
/// forming the joint flow target.
pub fn joint_target(
    audio_x1: &Tensor<f64>,
    event_logit_x1: &Tensor<f64>,
) -> Result<Tensor<f64>, FlowError> {
    if audio_x1.rows() != event_logit_x1.rows() {
        return Err(FlowError::FrameMismatch {
            audio: audio_x1.rows(),
            events: event_logit_x1.rows(),
        });
    }
    Ok(Tensor::concat_cols(&[audio_x1, event_logit_x1]))
}

/// Mean over batch, frames, and channels of the squared matching residual
/// `||v(t, C, x_t) - (x1 - x0)||^2` for an arbitrary velocity field.
pub fn cfm_loss_with<F>(mut field: F, batch: &[FlowSample]) -> Result<f64, FlowError>
where
    F: FnMut(f64, &VideoCondition, &Tensor<f64>) -> Result<Tensor<f64>, FlowError>,
{
    let mut total = 0.0;
    for (index, sample) in batch.iter().enumerate() {
        let x_t = interpolate(&sample.x0, &sample.x1, sample.t)?;
        let v = field(sample.t, &sample.cond, &x_t)?;
        let n = v.numel() as f64;
        let mut acc = 0.0;
        for ((&vv, &a), &b) in v.data().iter().zip(sample.x1.data()).zip(sample.x0.data()) {
            let r = vv - (a - b);
            acc += r * r;
        }
        let per = acc / n;
        if !per.is_finite() {
            return Err(FlowError::NonFiniteLoss { index });
        }
        total += per;
    }
    Ok(total / batch.len().max(1) as f64)
}

/// The matching loss of a model's flow head, evaluated without gradients.
pub fn cfm_loss(model: &VelocityField, batch: &[FlowSample]) -> Result<f64, FlowError> {
    cfm_loss_with(
        |t, cond, x_t| {
            let (velocity, _) = model.eval(t, cond, x_t)?;
            velocity.ok_or(FlowError::NoFlowHead)
        },
        batch,
    )
}

/// Standard-normal latent draw `[T x D]` from a dedicated stream.
pub fn noise_latents(t_frames: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = substream(seed, "flow-noise", &[]);
    Tensor::from_fn(t_frames, dim, |_, _| StandardNormal.sample(&mut rng))
}

/// Forward-Euler integration of an arbitrary velocity field from a given
/// start state: `x <- x + (1/n) * v(k/n, x)` for `k = 0..n-1`.
pub fn euler_integrate<F>(mut field: F, x0: Tensor<f64>, n_steps: usize) -> Result<Tensor<f64>, FlowError>
where
    F: FnMut(f64, &Tensor<f64>) -> Result<Tensor<f64>, FlowError>,
{
    if n_steps == 0 {
        return Err(FlowError::NoSteps);
    }
    let mut x = x0;
    let dt = 1.0 / n_steps as f64;
    for k in 0..n_steps {
        let t = k as f64 / n_steps as f64;
        let v = field(t, &x)?;
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteState { step: k });
        }
    }
    Ok(x)
}

/// Integrate the model's flow head from seeded noise. Deterministic given
/// (weights, condition, seed, step count).
pub fn euler_sample(
    model: &VelocityField,
    cond: &VideoCondition,
    t_frames: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Tensor<f64>, FlowError> {
    if !model.config.variant.has_flow_head() {
        return Err(FlowError::NoFlowHead);
    }
    let dim = model.config.latent_dim();
    let x0 = noise_latents(t_frames, dim, seed);
    euler_integrate(
        |t, x| {
            let (velocity, _) = model.eval(t, cond, x)?;
            velocity.ok_or(FlowError::NoFlowHead)
        },
        x0,
        n_steps,
    )
}
