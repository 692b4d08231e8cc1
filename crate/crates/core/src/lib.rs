//! Event-aware audio generation from silent-video conditions, desk scale.
//!
//! A flow-matching velocity field jointly denoises audio latents and
//! frame-level event logits under a two-stream video condition. Three head
//! layouts (event-only, parallel, joint), a synthetic percussive dataset
//! standing in for real front-ends, the full onset/classification metric
//! suite, and a deterministic trainer with a pretrain-extend-finetune path.

pub mod checks;
pub mod container;
pub mod dataset;
pub mod events;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod seeding;
pub mod trainer;
