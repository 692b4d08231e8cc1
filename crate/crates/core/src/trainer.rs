//! Training loop: combined objective, warmup/decay schedule, AdamW with
//! decoupled weight decay, bit-reproducible checkpoints, and the
//! pretrain-extend-finetune pathway.
//!
//! Reproducibility contract: every random draw comes from a stateless
//! substream keyed by (seed, purpose, step, slot), so batches and noise are
//! a pure function of the config regardless of worker parallelism, and
//! resuming from a checkpoint replays the exact step sequence.

use crate::container::{read_checkpoint, write_checkpoint, ContainerError};
use crate::dataset::{Dataset, DatasetClip, Split, Task, VideoCondition};
use crate::events::encode_logits;
use crate::flow::{interpolate, joint_target, FlowError};
use crate::model::{ModelConfig, ModelError, Variant, VelocityField};
use crate::par;
use crate::seeding::{subseed, substream};
use foleyflow_autograd::{Tape, TapeError, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at step {step} (batch clips {clip_ids:?})")]
    NonFiniteLoss { step: usize, clip_ids: Vec<String> },
    #[error("no clips in the {0} split")]
    EmptySplit(Split),
    #[error("stage-2 config is incompatible with the stage-1 backbone: {0}")]
    StageMismatch(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("flow error: {0}")]
    Flow(#[from] FlowError),
    #[error("tape error: {0}")]
    Tape(#[from] TapeError),
    #[error("codec error: {0}")]
    Codec(#[from] crate::events::CodecError),
    #[error("container error: {0}")]
    Container(#[from] ContainerError),
    #[error("checkpoint metadata error: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecayShape {
    #[default]
    Linear,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight on the event BCE term of the combined objective.
    pub w_bce: f64,
    /// Epsilon of the event-logit encoding.
    pub epsilon: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_steps: usize,
    pub decay_start: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub decay_shape: DecayShape,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
    #[serde(default)]
    pub cfg_dropout: f64,
}

fn default_head_scale() -> f64 {
    10.0
}

impl TrainConfig {
    /// Desk-scale defaults sized so a full run fits a single-core budget.
    pub fn desk_default(variant: Variant) -> Self {
        Self {
            variant,
            w_bce: 1.0,
            epsilon: 1e-5,
            lr_peak: 1e-4,
            lr_floor: 1e-5,
            warmup_steps: 100,
            decay_start: 1000,
            total_steps: 2000,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            decay_shape: DecayShape::Linear,
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            ff_mult: 4,
            head_scale: 10.0,
            cfg_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.warmup_steps < self.decay_start && self.decay_start < self.total_steps) {
            return Err(TrainError::BadConfig(format!(
                "need warmup {} < decay_start {} < total {}",
                self.warmup_steps, self.decay_start, self.total_steps
            )));
        }
        if self.lr_floor >= self.lr_peak {
            return Err(TrainError::BadConfig(format!(
                "lr_floor {} must be below lr_peak {}",
                self.lr_floor, self.lr_peak
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Model config for this trainer config over a given dataset geometry.
    pub fn model_config(
        &self,
        d_audio: usize,
        n_classes: usize,
        d_sem: usize,
        d_sync: usize,
    ) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_audio,
            n_classes,
            variant: self.variant,
            d_sem,
            d_sync,
            ff_mult: self.ff_mult,
            head_scale: self.head_scale,
            cfg_dropout: self.cfg_dropout,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("train config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::BadConfig(e.to_string()))
    }
}

/// Learning rate at a step: linear warmup to the peak, flat, then decay to
/// the floor at the final step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * step as f64 / cfg.warmup_steps as f64;
    }
    if step < cfg.decay_start {
        return cfg.lr_peak;
    }
    let span = (cfg.total_steps - cfg.decay_start) as f64;
    let frac = ((step - cfg.decay_start) as f64 / span).min(1.0);
    match cfg.decay_shape {
        DecayShape::Linear => cfg.lr_peak + (cfg.lr_floor - cfg.lr_peak) * frac,
        DecayShape::Exponential => cfg.lr_peak * (cfg.lr_floor / cfg.lr_peak).powf(frac),
    }
}

// ---- optimizer ------------------------------------------------------------

/// AdamW with decoupled weight decay; decay applies to matrices only.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
    pub steps_taken: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &[Tensor<f64>], cfg: &TrainConfig) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            steps_taken: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<f64>], grads: &[Tensor<f64>], lr: f64) {
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if p.shape().len() == 2 {
                self.weight_decay
            } else {
                0.0
            };
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *pv);
            }
        }
    }
}

// ---- batch construction -----------------------------------------------

/// Per-clip tensors precomputed once per run.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub id: String,
    pub cond: VideoCondition,
    /// Flow target: audio latents, or audio ++ encoded event logits (joint).
    pub x1: Tensor<f64>,
    pub frame_map: Tensor<f64>,
}

/// Precompute flow targets for every clip of a split.
pub fn prepare_clips(
    clips: &[&DatasetClip],
    variant: Variant,
    epsilon: f64,
) -> Result<Vec<PreparedClip>, TrainError> {
    clips
        .iter()
        .map(|c| {
            let x1 = match variant {
                Variant::Joint => {
                    let enc = encode_logits(&c.clip.annotation.frame_map, epsilon)?;
                    joint_target(&c.clip.audio_latents, &enc.logits)?
                }
                _ => c.clip.audio_latents.clone(),
            };
            Ok(PreparedClip {
                id: c.id.clone(),
                cond: c.clip.condition.clone(),
                x1,
                frame_map: c.clip.annotation.frame_map.clone(),
            })
        })
        .collect()
}

struct BatchSlot {
    clip_index: usize,
    x0: Tensor<f64>,
    t: f64,
    drop_cond: bool,
}

fn draw_batch(cfg: &TrainConfig, clips: &[PreparedClip], step: usize) -> Vec<BatchSlot> {
    let mut order_rng = substream(cfg.seed, "batch-order", &[step as u64]);
    (0..cfg.batch_size)
        .map(|slot| {
            let clip_index = order_rng.gen_range(0..clips.len());
            let mut noise_rng = substream(cfg.seed, "batch-noise", &[step as u64, slot as u64]);
            let shape = clips[clip_index].x1.shape().to_vec();
            let x0 = Tensor::new(
                shape.clone(),
                (0..shape.iter().product())
                    .map(|_| StandardNormal.sample(&mut noise_rng))
                    .collect(),
            )
            .expect("noise shape");
            let t: f64 = noise_rng.gen_range(0.0..1.0);
            let drop_cond = cfg.cfg_dropout > 0.0 && noise_rng.gen::<f64>() < cfg.cfg_dropout;
            BatchSlot {
                clip_index,
                x0,
                t,
                drop_cond,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub flow: f64,
    pub bce: f64,
    pub total: f64,
}

fn sample_grad(
    model: &VelocityField,
    clip: &PreparedClip,
    slot: &BatchSlot,
    cfg: &TrainConfig,
) -> Result<(StepLosses, Vec<Tensor<f64>>), TrainError> {
    let x_t = interpolate(&slot.x0, &clip.x1, slot.t)?;
    let cond = if slot.drop_cond {
        VideoCondition {
            semantic: Tensor::zeros(clip.cond.semantic.shape().to_vec()),
            sync: Tensor::zeros(clip.cond.sync.shape().to_vec()),
        }
    } else {
        clip.cond.clone()
    };
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let out = model.forward(&mut tape, &bound, slot.t, &cond, &x_t)?;

    let displacement = clip.x1.sub(&slot.x0);
    let (flow_var, bce_var, total_var) = match cfg.variant {
        Variant::Joint => {
            let target = tape.input(displacement);
            let flow = tape.mse(out.velocity.expect("joint has a flow head"), target)?;
            (Some(flow), None, flow)
        }
        Variant::Parallel => {
            let target = tape.input(displacement);
            let flow = tape.mse(out.velocity.expect("parallel has a flow head"), target)?;
            let targets = tape.input(clip.frame_map.clone());
            let bce = tape.bce_with_logits(
                out.event_logits.expect("parallel has an event head"),
                targets,
            )?;
            let weighted = tape.scale(bce, cfg.w_bce)?;
            let total = tape.add(flow, weighted)?;
            (Some(flow), Some(bce), total)
        }
        Variant::EventOnly => {
            let targets = tape.input(clip.frame_map.clone());
            let bce = tape.bce_with_logits(
                out.event_logits.expect("event head exists"),
                targets,
            )?;
            (None, Some(bce), bce)
        }
    };

    let losses = StepLosses {
        flow: flow_var.map_or(0.0, |v| tape.value(v).item()),
        bce: bce_var.map_or(0.0, |v| tape.value(v).item()),
        total: tape.value(total_var).item(),
    };
    let grads = tape.backward(total_var)?;
    Ok((losses, model.grads_of(&bound, &grads)))
}

/// One optimizer update over a freshly drawn batch. Per-sample gradients
/// run data-parallel; the reduction is in slot order, so the result is
/// independent of worker count.
pub fn train_step(
    model: &mut VelocityField,
    opt: &mut AdamW,
    clips: &[PreparedClip],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepLosses, TrainError> {
    let batch = draw_batch(cfg, clips, step);
    let results = par::par_try_map(&batch, |slot| {
        sample_grad(model, &clips[slot.clip_index], slot, cfg)
    })?;

    let inv = 1.0 / cfg.batch_size as f64;
    let mut mean = StepLosses {
        flow: 0.0,
        bce: 0.0,
        total: 0.0,
    };
    let mut grads: Vec<Tensor<f64>> = model
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape().to_vec()))
        .collect();
    for (losses, sample_grads) in &results {
        mean.flow += losses.flow * inv;
        mean.bce += losses.bce * inv;
        mean.total += losses.total * inv;
        for (acc, g) in grads.iter_mut().zip(sample_grads) {
            for (a, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += gv * inv;
            }
        }
    }
    if !mean.total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            clip_ids: batch
                .iter()
                .map(|s| clips[s.clip_index].id.clone())
                .collect(),
        });
    }

    // Global-norm gradient clipping.
    let norm: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > cfg.grad_clip {
        let scale = cfg.grad_clip / norm;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }

    opt.step(model.params_mut(), &grads, lr_at(step, cfg));
    Ok(mean)
}

// ---- logging ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub flow: f64,
    pub bce: f64,
    pub total: f64,
    pub wall_ms: u128,
}

/// Append-only training log: tab-separated rows, optionally mirrored to disk.
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    file: Option<std::fs::File>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self {
            rows: Vec::new(),
            file: None,
        }
    }

    pub fn to_file(path: &Path) -> Result<Self, TrainError> {
        let mut file = std::fs::File::create(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        writeln!(file, "step\tlr\tloss_flow\tloss_bce\tloss_total\twall_ms").map_err(
            |source| TrainError::Io {
                path: path.display().to_string(),
                source,
            },
        )?;
        Ok(Self {
            rows: Vec::new(),
            file: Some(file),
        })
    }

    fn push(&mut self, row: LogRow) {
        if let Some(f) = &mut self.file {
            let _ = writeln!(
                f,
                "{}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{}",
                row.step, row.lr, row.flow, row.bce, row.total, row.wall_ms
            );
        }
        self.rows.push(row);
    }
}

/// Run steps `[from, to)` of the schedule.
pub fn train_range(
    model: &mut VelocityField,
    opt: &mut AdamW,
    clips: &[PreparedClip],
    cfg: &TrainConfig,
    from: usize,
    to: usize,
    log: &mut TrainLog,
) -> Result<(), TrainError> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    for step in from..to {
        let start = Instant::now();
        let losses = train_step(model, opt, clips, cfg, step)?;
        log.push(LogRow {
            step,
            lr: lr_at(step, cfg),
            flow: losses.flow,
            bce: losses.bce,
            total: losses.total,
            wall_ms: start.elapsed().as_millis(),
        });
    }
    Ok(())
}

// ---- checkpointing ---------------------------------------------------

/// Everything needed to resume training or to sample later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkptMeta {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: usize,
    pub task: Task,
    pub train_duration_s: f64,
    pub latent_fps: f64,
    #[serde(default)]
    pub run_hash: Option<String>,
}

pub fn save_train_checkpoint(
    path: &Path,
    model: &VelocityField,
    opt: &AdamW,
    meta: &CkptMeta,
) -> Result<(), TrainError> {
    let mut c = model.to_container();
    for (name, t) in model.param_names().iter().zip(&opt.m) {
        c.push_f64(format!("adam.m.{name}"), t.clone());
    }
    for (name, t) in model.param_names().iter().zip(&opt.v) {
        c.push_f64(format!("adam.v.{name}"), t.clone());
    }
    c.push_f64(
        "adam.steps_taken",
        Tensor::scalar(opt.steps_taken as f64),
    );
    let meta_json = serde_json::to_string_pretty(meta)?;
    write_checkpoint(path, &meta_json, &c)?;
    Ok(())
}

pub fn load_train_checkpoint(
    path: &Path,
) -> Result<(VelocityField, AdamW, CkptMeta), TrainError> {
    let (meta_json, container) = read_checkpoint(path)?;
    let meta: CkptMeta = serde_json::from_str(&meta_json)?;
    let mut model = VelocityField::new(meta.model_config, 0)?;
    model.load_params(&container, path)?;
    let mut opt = AdamW::new(model.params(), &meta.train_config);
    let missing = |name: &str| TrainError::Model(ModelError::MissingParam(name.to_string()));
    for (i, name) in model.param_names().to_vec().iter().enumerate() {
        let m_key = format!("adam.m.{name}");
        let v_key = format!("adam.v.{name}");
        opt.m[i] = container.get(&m_key).ok_or_else(|| missing(&m_key))?.to_f64();
        opt.v[i] = container.get(&v_key).ok_or_else(|| missing(&v_key))?.to_f64();
    }
    opt.steps_taken = container
        .get("adam.steps_taken")
        .ok_or_else(|| missing("adam.steps_taken"))?
        .to_f64()
        .item() as usize;
    Ok((model, opt, meta))
}

/// Read `CkptMeta` without loading tensors into a model.
pub fn peek_meta(path: &Path) -> Result<CkptMeta, TrainError> {
    let (meta_json, _) = read_checkpoint(path)?;
    Ok(serde_json::from_str(&meta_json)?)
}

// ---- high-level runs ----------------------------------------------------

/// Train a fresh model of `cfg.variant` on a dataset's train split.
pub fn train_from_scratch(
    dataset: &Dataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(VelocityField, AdamW), TrainError> {
    cfg.validate()?;
    let dims = dataset.manifest.dims;
    let model_cfg = cfg.model_config(
        dims.d_audio,
        dataset.manifest.n_classes,
        dims.d_sem,
        dims.d_sync,
    );
    let mut model = VelocityField::new(model_cfg, subseed(cfg.seed, "model-seed", &[]))?;
    let mut opt = AdamW::new(model.params(), cfg);
    let train_clips = dataset.split(Split::Train);
    let prepared = prepare_clips(&train_clips, cfg.variant, cfg.epsilon)?;
    train_range(&mut model, &mut opt, &prepared, cfg, 0, cfg.total_steps, log)?;
    Ok((model, opt))
}

/// Stage 1 of the finetune pathway: an audio-only joint backbone with zero
/// event classes, whose flow target is the audio latents alone.
pub fn train_audio_backbone(
    dataset: &Dataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(VelocityField, AdamW), TrainError> {
    if cfg.variant != Variant::Joint {
        return Err(TrainError::StageMismatch(
            "the audio backbone uses the joint variant".into(),
        ));
    }
    cfg.validate()?;
    let dims = dataset.manifest.dims;
    let backbone_cfg = cfg.model_config(dims.d_audio, 0, dims.d_sem, dims.d_sync);
    let mut backbone = VelocityField::new(backbone_cfg, subseed(cfg.seed, "model-seed", &[]))?;
    let mut opt = AdamW::new(backbone.params(), cfg);
    let prepared_audio: Vec<PreparedClip> = dataset
        .split(Split::Train)
        .iter()
        .map(|c| PreparedClip {
            id: c.id.clone(),
            cond: c.clip.condition.clone(),
            x1: c.clip.audio_latents.clone(),
            frame_map: c.clip.annotation.frame_map.clone(),
        })
        .collect();
    train_range(
        &mut backbone,
        &mut opt,
        &prepared_audio,
        cfg,
        0,
        cfg.total_steps,
        log,
    )?;
    Ok((backbone, opt))
}

/// Stage 1: train an audio-only joint backbone (zero event classes).
/// Stage 2: widen the latent by the class count (zero-initialized) and train
/// the full joint objective. Returns (backbone, finetuned).
pub fn pretrain_then_finetune(
    dataset: &Dataset,
    cfg_pre: &TrainConfig,
    cfg_ft: &TrainConfig,
    log_pre: &mut TrainLog,
    log_ft: &mut TrainLog,
) -> Result<(VelocityField, VelocityField, AdamW), TrainError> {
    if cfg_pre.variant != Variant::Joint || cfg_ft.variant != Variant::Joint {
        return Err(TrainError::StageMismatch(
            "both stages must use the joint variant".into(),
        ));
    }
    cfg_pre.validate()?;
    cfg_ft.validate()?;
    let dims = dataset.manifest.dims;
    let (backbone, _) = train_audio_backbone(dataset, cfg_pre, log_pre)?;
    let train_clips = dataset.split(Split::Train);

    // Stage 2: widen and finetune on the joint objective.
    let n_classes = dataset.manifest.n_classes;
    let stage2_cfg = cfg_ft.model_config(dims.d_audio, n_classes, dims.d_sem, dims.d_sync);
    let mut finetuned = backbone.extend_for_events(n_classes)?;
    if finetuned.config != stage2_cfg {
        return Err(TrainError::StageMismatch(format!(
            "extended config {:?} vs stage-2 config {:?}",
            finetuned.config, stage2_cfg
        )));
    }
    let mut opt_ft = AdamW::new(finetuned.params(), cfg_ft);
    let prepared_joint = prepare_clips(&train_clips, Variant::Joint, cfg_ft.epsilon)?;
    train_range(
        &mut finetuned,
        &mut opt_ft,
        &prepared_joint,
        cfg_ft,
        0,
        cfg_ft.total_steps,
        log_ft,
    )?;
    Ok((backbone, finetuned, opt_ft))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, GenConfig};

    fn tiny_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            total_steps: 12,
            warmup_steps: 2,
            decay_start: 6,
            batch_size: 2,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ff_mult: 2,
            seed: 5,
            ..TrainConfig::desk_default(variant)
        }
    }

    fn tiny_dataset() -> Dataset {
        let cfg = GenConfig {
            n_train: 4,
            n_val: 1,
            n_test: 2,
            duration_s: 2.0,
            test_duration_s: 2.0,
            ..GenConfig::onset(4, 2, 11)
        };
        build_dataset(&cfg).unwrap()
    }

    #[test]
    fn lr_schedule_hits_the_pinned_points() {
        let cfg = TrainConfig::desk_default(Variant::Joint);
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(cfg.warmup_steps, &cfg), 1e-4);
        assert_eq!(lr_at(cfg.decay_start - 1, &cfg), 1e-4);
        assert!((lr_at(cfg.total_steps, &cfg) - 1e-5).abs() < 1e-18);
        // strictly between peak and floor mid-decay
        let mid = lr_at((cfg.decay_start + cfg.total_steps) / 2, &cfg);
        assert!(mid < 1e-4 && mid > 1e-5);
        let exp_cfg = TrainConfig {
            decay_shape: DecayShape::Exponential,
            ..cfg
        };
        assert!((lr_at(exp_cfg.total_steps, &exp_cfg) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn config_validation_and_toml_round_trip() {
        let cfg = TrainConfig::desk_default(Variant::Parallel);
        cfg.validate().unwrap();
        let bad = TrainConfig {
            decay_start: 50,
            warmup_steps: 100,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let text = cfg.to_toml();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn zero_bce_weight_reduces_to_pure_flow_loss() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            w_bce: 0.0,
            ..tiny_cfg(Variant::Parallel)
        };
        let dims = ds.manifest.dims;
        let mcfg = cfg.model_config(dims.d_audio, 1, dims.d_sem, dims.d_sync);
        let mut model = VelocityField::new(mcfg, 1).unwrap();
        let mut opt = AdamW::new(model.params(), &cfg);
        let clips = prepare_clips(&ds.split(Split::Train), cfg.variant, cfg.epsilon).unwrap();
        let losses = train_step(&mut model, &mut opt, &clips, &cfg, 0).unwrap();
        assert_eq!(losses.total, losses.flow);
        assert!(losses.bce > 0.0, "bce is still reported");
    }

    #[test]
    fn unit_bce_weight_sums_the_terms() {
        let ds = tiny_dataset();
        let cfg = tiny_cfg(Variant::Parallel);
        assert_eq!(cfg.w_bce, 1.0);
        let dims = ds.manifest.dims;
        let mcfg = cfg.model_config(dims.d_audio, 1, dims.d_sem, dims.d_sync);
        let mut model = VelocityField::new(mcfg, 1).unwrap();
        let mut opt = AdamW::new(model.params(), &cfg);
        let clips = prepare_clips(&ds.split(Split::Train), cfg.variant, cfg.epsilon).unwrap();
        let losses = train_step(&mut model, &mut opt, &clips, &cfg, 0).unwrap();
        assert!((losses.total - (losses.flow + losses.bce)).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits_drive_bce_to_zero() {
        // Oracle: logits at +-20 against the exact binary targets.
        let map = Tensor::from_fn(10, 2, |r, c| ((r + c) % 3 == 0) as u8 as f64);
        let logits = map.map(|y| if y == 1.0 { 20.0 } else { -20.0 });
        let mut tape = Tape::<f64>::new();
        let z = tape.input(logits);
        let y = tape.input(map);
        let loss = tape.bce_with_logits(z, y).unwrap();
        assert!(tape.value(loss).item() <= 1e-6);
    }

    #[test]
    fn event_only_total_is_bce_alone() {
        let ds = tiny_dataset();
        let cfg = tiny_cfg(Variant::EventOnly);
        let dims = ds.manifest.dims;
        let mcfg = cfg.model_config(dims.d_audio, 1, dims.d_sem, dims.d_sync);
        let mut model = VelocityField::new(mcfg, 1).unwrap();
        let mut opt = AdamW::new(model.params(), &cfg);
        let clips = prepare_clips(&ds.split(Split::Train), cfg.variant, cfg.epsilon).unwrap();
        let losses = train_step(&mut model, &mut opt, &clips, &cfg, 0).unwrap();
        assert_eq!(losses.flow, 0.0);
        assert_eq!(losses.total, losses.bce);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let ds = tiny_dataset();
        let cfg = tiny_cfg(Variant::Joint);
        let run = || {
            let mut log = TrainLog::in_memory();
            let (model, _) = train_from_scratch(&ds, &cfg, &mut log).unwrap();
            (
                log.rows.iter().map(|r| r.total).collect::<Vec<f64>>(),
                model.params().to_vec(),
            )
        };
        let (losses_a, params_a) = run();
        let (losses_b, params_b) = run();
        assert_eq!(losses_a, losses_b);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let ds = tiny_dataset();
        let cfg = tiny_cfg(Variant::Joint);
        let dims = ds.manifest.dims;
        let clips = prepare_clips(&ds.split(Split::Train), cfg.variant, cfg.epsilon).unwrap();
        let mcfg = cfg.model_config(dims.d_audio, 1, dims.d_sem, dims.d_sync);

        // Straight 10-step run.
        let mut model_a = VelocityField::new(mcfg, subseed(cfg.seed, "model-seed", &[])).unwrap();
        let mut opt_a = AdamW::new(model_a.params(), &cfg);
        let mut log = TrainLog::in_memory();
        train_range(&mut model_a, &mut opt_a, &clips, &cfg, 0, 10, &mut log).unwrap();

        // 5 steps, checkpoint, reload, 5 more.
        let mut model_b = VelocityField::new(mcfg, subseed(cfg.seed, "model-seed", &[])).unwrap();
        let mut opt_b = AdamW::new(model_b.params(), &cfg);
        train_range(&mut model_b, &mut opt_b, &clips, &cfg, 0, 5, &mut log).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let meta = CkptMeta {
            model_config: mcfg,
            train_config: cfg.clone(),
            step: 5,
            task: ds.manifest.task,
            train_duration_s: ds.manifest.train_duration_s,
            latent_fps: ds.manifest.latent_fps,
            run_hash: None,
        };
        save_train_checkpoint(&path, &model_b, &opt_b, &meta).unwrap();
        let (mut model_c, mut opt_c, meta_back) = load_train_checkpoint(&path).unwrap();
        assert_eq!(meta_back.step, 5);
        train_range(&mut model_c, &mut opt_c, &clips, &cfg, 5, 10, &mut log).unwrap();

        assert_eq!(model_a.params(), model_c.params());
        assert_eq!(opt_a.m, opt_c.m);
        assert_eq!(opt_a.v, opt_c.v);
    }

    #[test]
    fn loss_decreases_for_every_variant() {
        let ds = tiny_dataset();
        for variant in [Variant::EventOnly, Variant::Parallel, Variant::Joint] {
            let cfg = TrainConfig {
                total_steps: 60,
                warmup_steps: 5,
                decay_start: 30,
                ..tiny_cfg(variant)
            };
            let mut log = TrainLog::in_memory();
            train_from_scratch(&ds, &cfg, &mut log).unwrap();
            let totals: Vec<f64> = log.rows.iter().map(|r| r.total).collect();
            let n = totals.len();
            let median = |xs: &[f64]| {
                let mut v = xs.to_vec();
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                v[v.len() / 2]
            };
            let early = median(&totals[..n / 5]);
            let late = median(&totals[n - n / 5..]);
            assert!(
                late < early,
                "{variant}: early {early} late {late} should decrease"
            );
        }
    }

    #[test]
    fn finetune_pathway_preserves_then_learns() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            total_steps: 8,
            warmup_steps: 2,
            decay_start: 4,
            ..tiny_cfg(Variant::Joint)
        };
        let mut lp = TrainLog::in_memory();
        let mut lf = TrainLog::in_memory();
        let (backbone, finetuned, _) =
            pretrain_then_finetune(&ds, &cfg, &cfg, &mut lp, &mut lf).unwrap();
        assert_eq!(backbone.config.n_classes, 0);
        assert_eq!(finetuned.config.n_classes, 1);
        assert_eq!(lp.rows.len(), 8);
        assert_eq!(lf.rows.len(), 8);
    }
}
