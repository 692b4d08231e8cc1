//! Gradient-check battery: every engine op plus the training losses of
//! 2-layer model configs, all against central finite differences.

use crate::dataset::VideoCondition;
use crate::model::{BoundModel, ModelConfig, Variant, VelocityField};
use foleyflow_autograd::check::{builtin_cases, grad_check, GradCase, PointStream};
use foleyflow_autograd::{Tape, TapeError, Tensor, Var};
use std::sync::Arc;

fn tiny_model(variant: Variant, seed: u64) -> (VelocityField, VideoCondition, Tensor<f64>) {
    let cfg = ModelConfig {
        d_model: 12,
        n_layers: 2,
        n_heads: 2,
        d_audio: 3,
        n_classes: 2,
        variant,
        d_sem: 4,
        d_sync: 3,
        ff_mult: 2,
        head_scale: 10.0,
        cfg_dropout: 0.0,
    };
    let model = VelocityField::new(cfg, seed).expect("tiny config is valid");
    let t_frames = 6;
    let mut s = PointStream::new(seed ^ 0xA5A5);
    let cond = VideoCondition {
        semantic: s.tensor(3, cfg.d_sem),
        sync: s.tensor(t_frames * 2, cfg.d_sync),
    };
    let x_t = s.tensor(t_frames, cfg.latent_dim());
    (model, cond, x_t)
}

fn as_tape_err(e: crate::model::ModelError) -> TapeError {
    match e {
        crate::model::ModelError::Tape(t) => t,
        other => TapeError::InvalidValue {
            op: "model forward",
            what: other.to_string(),
        },
    }
}

/// Flow-matching loss on a 2-layer joint model, differentiated through
/// every parameter.
fn flow_loss_case(seed: u64) -> GradCase {
    GradCase::new("flow_matching_loss_2layer", 1e-5, move || {
        let (model, cond, x_t) = tiny_model(Variant::Joint, seed);
        let mut s = PointStream::new(seed ^ 0x77);
        let displacement = s.tensor(x_t.rows(), x_t.cols());
        let model = Arc::new(model);
        let points: Vec<Tensor<f64>> = model.params().to_vec();
        grad_check(
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let bound = BoundModel::from_vars(vars.to_vec());
                let out = model
                    .forward(tape, &bound, 0.37, &cond, &x_t)
                    .map_err(as_tape_err)?;
                let target = tape.input(displacement.clone());
                tape.mse(out.velocity.expect("joint flow head"), target)
            },
            &points,
            1e-6,
        )
    })
}

/// Combined flow + weighted BCE loss on a 2-layer parallel model.
fn combined_loss_case(seed: u64, w: f64) -> GradCase {
    GradCase::new("combined_loss_2layer_w1", 1e-5, move || {
        let (model, cond, x_t) = tiny_model(Variant::Parallel, seed);
        let mut s = PointStream::new(seed ^ 0x99);
        let displacement = s.tensor(x_t.rows(), x_t.cols());
        let frame_map = Tensor::from_fn(x_t.rows(), 2, |r, c| ((r + c) % 3 == 0) as u8 as f64);
        let model = Arc::new(model);
        let points: Vec<Tensor<f64>> = model.params().to_vec();
        grad_check(
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let bound = BoundModel::from_vars(vars.to_vec());
                let out = model
                    .forward(tape, &bound, 0.61, &cond, &x_t)
                    .map_err(as_tape_err)?;
                let target = tape.input(displacement.clone());
                let flow = tape.mse(out.velocity.expect("parallel flow head"), target)?;
                let targets = tape.input(frame_map.clone());
                let bce =
                    tape.bce_with_logits(out.event_logits.expect("event head"), targets)?;
                let weighted = tape.scale(bce, w)?;
                tape.add(flow, weighted)
            },
            &points,
            1e-6,
        )
    })
}

/// The full battery the `gradcheck` command runs.
pub fn full_suite(seed: u64) -> Vec<GradCase> {
    let mut cases = builtin_cases(seed);
    cases.push(flow_loss_case(seed));
    cases.push(combined_loss_case(seed, 1.0));
    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use foleyflow_autograd::check::run_cases;

    #[test]
    fn model_loss_gradients_match_finite_differences() {
        let outcomes = run_cases(&[flow_loss_case(3), combined_loss_case(3, 1.0)]);
        for o in &outcomes {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }
}
