//! Conditional velocity-field network with three head layouts.
//!
//! A stack of transformer blocks over latent tokens, each block conditioned
//! three ways: a timestep embedding added to every token, cross-attention
//! into low-rate semantic tokens, and an additive bias-free projection of
//! the frame-aligned sync stream at the block entry.
//!
//! Head layouts:
//! * `Joint` — one flow head over concatenated audio+event channels;
//!   consumers split the output.
//! * `Parallel` — a flow head over audio channels plus a three-layer MLP
//!   event head fed by the final block output concatenated with a projected
//!   sync stream.
//! * `EventOnly` — the MLP event head alone; no flow head exists.

use crate::container::{read_checkpoint, write_checkpoint, Container, ContainerError};
use crate::dataset::VideoCondition;
use crate::seeding::substream;
use foleyflow_autograd::{Axis, Tape, TapeError, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("{what}: expected {expected} channels, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("sync stream has {sync_frames} frames, below the {latent_frames} latent frames to align to")]
    SyncAlignment {
        sync_frames: usize,
        latent_frames: usize,
    },
    #[error("timestep {0} is not finite")]
    BadTimestep(f64),
    #[error("extension requires a joint-variant backbone with zero event classes, got {variant:?} with {n_classes}")]
    NotAnAudioBackbone { variant: Variant, n_classes: usize },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
    #[error("tape error: {0}")]
    Tape(#[from] TapeError),
    #[error("container error: {0}")]
    Container(#[from] ContainerError),
    #[error("checkpoint metadata parse error: {0}")]
    Meta(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    EventOnly,
    Parallel,
    Joint,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "event_only" => Some(Variant::EventOnly),
            "parallel" => Some(Variant::Parallel),
            "joint" => Some(Variant::Joint),
            _ => None,
        }
    }

    pub fn has_event_head(&self) -> bool {
        matches!(self, Variant::EventOnly | Variant::Parallel)
    }

    pub fn has_flow_head(&self) -> bool {
        !matches!(self, Variant::EventOnly)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::EventOnly => write!(f, "event_only"),
            Variant::Parallel => write!(f, "parallel"),
            Variant::Joint => write!(f, "joint"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_audio: usize,
    pub n_classes: usize,
    pub variant: Variant,
    pub d_sem: usize,
    pub d_sync: usize,
    pub ff_mult: usize,
    /// Fixed gain on the flow head so zero-initialized weights can reach
    /// the large event-logit channels within a short schedule.
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
    /// Classifier-free-guidance condition dropout; hook only, default off.
    #[serde(default)]
    pub cfg_dropout: f64,
}

fn default_head_scale() -> f64 {
    10.0
}

impl ModelConfig {
    pub fn desk_default(
        variant: Variant,
        d_audio: usize,
        n_classes: usize,
        d_sem: usize,
        d_sync: usize,
    ) -> Self {
        Self {
            d_model: 48,
            n_layers: 3,
            n_heads: 4,
            d_audio,
            n_classes,
            variant,
            d_sem,
            d_sync,
            ff_mult: 4,
            head_scale: 10.0,
            cfg_dropout: 0.0,
        }
    }

    /// Channel count of x_t and of the flow-head output.
    pub fn latent_dim(&self) -> usize {
        match self.variant {
            Variant::Joint => self.d_audio + self.n_classes,
            Variant::Parallel | Variant::EventOnly => self.d_audio,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::BadConfig(
                "d_model must be even for the sinusoidal timestep embedding".into(),
            ));
        }
        if self.n_layers == 0 || self.ff_mult == 0 {
            return Err(ModelError::BadConfig(
                "n_layers and ff_mult must be positive".into(),
            ));
        }
        if self.latent_dim() == 0 {
            return Err(ModelError::BadConfig("latent dim is zero".into()));
        }
        if self.variant.has_event_head() && self.n_classes == 0 {
            return Err(ModelError::BadConfig(
                "event head requires n_classes >= 1".into(),
            ));
        }
        Ok(())
    }
}

// ---- parameter layout ---------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
}

#[derive(Debug, Clone)]
struct Block {
    sync_proj: Lin,
    ln1: Ln,
    attn: Attn,
    ln_ca: Ln,
    cross: Attn,
    ln2: Ln,
    ff1: Lin,
    ff2: Lin,
}

#[derive(Debug, Clone)]
struct Layout {
    in_proj: Lin,
    sem_proj: Lin,
    time1: Lin,
    time2: Lin,
    blocks: Vec<Block>,
    out_ln: Ln,
    flow_head: Option<Lin>,
    event_sync_proj: Option<Lin>,
    event_mlp: Option<[Lin; 3]>,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct ParamBuilder {
    names: Vec<String>,
    tensors: Vec<Tensor<f64>>,
    rng: rand_chacha::ChaCha8Rng,
}

impl ParamBuilder {
    fn mat(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let t = match init {
            Init::Normal => {
                let std = 0.02;
                Tensor::from_fn(rows, cols, |_, _| {
                    let n: f64 = StandardNormal.sample(&mut self.rng);
                    n * std
                })
            }
            Init::Zeros => Tensor::zeros(vec![rows, cols]),
            Init::Ones => Tensor::full(vec![rows, cols], 1.0),
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn vec(&mut self, name: String, n: usize, init: Init) -> usize {
        let t = match init {
            Init::Normal => {
                let std = 0.02;
                Tensor::vector(
                    (0..n)
                        .map(|_| {
                            let s: f64 = StandardNormal.sample(&mut self.rng);
                            s * std
                        })
                        .collect(),
                )
            }
            Init::Zeros => Tensor::vector(vec![0.0; n]),
            Init::Ones => Tensor::vector(vec![1.0; n]),
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, zero: bool) -> Lin {
        let init = if zero { Init::Zeros } else { Init::Normal };
        let w = self.mat(format!("{name}.w"), d_in, d_out, init);
        let b = self.vec(format!("{name}.b"), d_out, Init::Zeros);
        Lin { w, b: Some(b) }
    }

    fn linear_no_bias(&mut self, name: &str, d_in: usize, d_out: usize) -> Lin {
        let w = self.mat(format!("{name}.w"), d_in, d_out, Init::Normal);
        Lin { w, b: None }
    }

    fn ln(&mut self, name: &str, d: usize) -> Ln {
        let gamma = self.vec(format!("{name}.gamma"), d, Init::Ones);
        let beta = self.vec(format!("{name}.beta"), d, Init::Zeros);
        Ln { gamma, beta }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{name}.q"), d, d, false),
            k: self.linear(&format!("{name}.k"), d, d, false),
            v: self.linear(&format!("{name}.v"), d, d, false),
            o: self.linear(&format!("{name}.o"), d, d, false),
        }
    }
}

fn build_layout(config: &ModelConfig, seed: u64) -> (Layout, Vec<String>, Vec<Tensor<f64>>) {
    let mut b = ParamBuilder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng: substream(seed, "model-init", &[]),
    };
    let d = config.d_model;
    let layout = Layout {
        in_proj: b.linear("in_proj", config.latent_dim(), d, false),
        sem_proj: b.linear("sem_proj", config.d_sem, d, false),
        time1: b.linear("time.l1", d, d, false),
        time2: b.linear("time.l2", d, d, false),
        blocks: (0..config.n_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                Block {
                    // Bias-free so zero sync contributes exactly nothing.
                    sync_proj: b.linear_no_bias(&format!("{p}.sync_proj"), config.d_sync, d),
                    ln1: b.ln(&format!("{p}.ln1"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    ln_ca: b.ln(&format!("{p}.ln_ca"), d),
                    cross: b.attn(&format!("{p}.cross"), d),
                    ln2: b.ln(&format!("{p}.ln2"), d),
                    ff1: b.linear(&format!("{p}.ff1"), d, d * config.ff_mult, false),
                    ff2: b.linear(&format!("{p}.ff2"), d * config.ff_mult, d, false),
                }
            })
            .collect(),
        out_ln: b.ln("out_ln", d),
        flow_head: config
            .variant
            .has_flow_head()
            .then(|| b.linear("flow_head", d, config.latent_dim(), true)),
        event_sync_proj: config
            .variant
            .has_event_head()
            .then(|| b.linear_no_bias("event_sync_proj", config.d_sync, d)),
        event_mlp: config.variant.has_event_head().then(|| {
            [
                b.linear("event_head.l1", 2 * d, d, false),
                b.linear("event_head.l2", d, d, false),
                b.linear("event_head.l3", d, config.n_classes, true),
            ]
        }),
    };
    (layout, b.names, b.tensors)
}

// ---- the model ------------------------------------------------------------

/// Sinusoidal features of the timestep, `[1 x d]`.
fn time_features(t: f64, d: usize) -> Tensor<f64> {
    let half = d / 2;
    let mut data = Vec::with_capacity(d);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        data.push((t * 1000.0 * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        data.push((t * 1000.0 * freq).cos());
    }
    Tensor::matrix(1, d, data).expect("time feature shape")
}

/// Alignment of the sync stream onto the latent grid: each latent frame
/// averages the sync frames it spans, so bump energy lands on the frame
/// grid independent of index parity.
pub fn align_sync(sync: &Tensor<f64>, latent_frames: usize) -> Result<Tensor<f64>, ModelError> {
    let t_sync = sync.rows();
    if t_sync < latent_frames {
        return Err(ModelError::SyncAlignment {
            sync_frames: t_sync,
            latent_frames,
        });
    }
    let ratio = t_sync as f64 / latent_frames as f64;
    let mut out = Tensor::zeros(vec![latent_frames, sync.cols()]);
    for t in 0..latent_frames {
        let lo = ((t as f64 * ratio) as usize).min(t_sync - 1);
        let hi = (((t + 1) as f64 * ratio) as usize).clamp(lo + 1, t_sync);
        let inv = 1.0 / (hi - lo) as f64;
        for c in 0..sync.cols() {
            let mut acc = 0.0;
            for s in lo..hi {
                acc += sync.at(s, c);
            }
            out.set(t, c, acc * inv);
        }
    }
    Ok(out)
}

/// Fixed sinusoidal positional features for the latent token stream.
fn positional_features(t_frames: usize, d: usize) -> Tensor<f64> {
    let half = d / 2;
    Tensor::from_fn(t_frames, d, |t, c| {
        let i = c % half;
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        if c < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Model parameters plus layout; forward passes record onto a caller tape.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<f64>>,
}

/// Tape handles for one bound forward pass.
pub struct BoundModel {
    vars: Vec<Var>,
}

impl BoundModel {
    /// Bind externally supplied leaves (e.g. a gradient checker driving the
    /// parameters as its probe points). Count must match the param list.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

/// Forward output; presence of each head follows the variant.
pub struct ModelOutput {
    pub velocity: Option<Var>,
    pub event_logits: Option<Var>,
}

impl VelocityField {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (_, names, params) = build_layout(&config, seed);
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Insert every parameter on the tape. Trainable binds mark them as
    /// differentiable leaves.
    pub fn bind(&self, tape: &mut Tape<f64>, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone().with_grad())
                } else {
                    tape.input(p.clone())
                }
            })
            .collect();
        BoundModel { vars }
    }

    /// Gradient tensors for all parameters, in parameter order, zeros where
    /// a parameter did not participate.
    pub fn grads_of(
        &self,
        bound: &BoundModel,
        grads: &foleyflow_autograd::Gradients<f64>,
    ) -> Vec<Tensor<f64>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| match grads.wrt(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.shape().to_vec()),
            })
            .collect()
    }

    fn lin(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundModel,
        x: Var,
        l: Lin,
    ) -> Result<Var, TapeError> {
        let h = tape.matmul(x, bound.vars[l.w])?;
        match l.b {
            Some(b) => tape.add_bias(h, bound.vars[b]),
            None => Ok(h),
        }
    }

    fn norm(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundModel,
        x: Var,
        l: Ln,
    ) -> Result<Var, TapeError> {
        tape.layer_norm(x, bound.vars[l.gamma], bound.vars[l.beta], 1e-5)
    }

    fn mha(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundModel,
        x_q: Var,
        x_kv: Var,
        a: &Attn,
    ) -> Result<Var, TapeError> {
        let q = self.lin(tape, bound, x_q, a.q)?;
        let k = self.lin(tape, bound, x_kv, a.k)?;
        let v = self.lin(tape, bound, x_kv, a.v)?;
        let d_head = self.config.d_model / self.config.n_heads;
        let sizes = vec![d_head; self.config.n_heads];
        let qs = tape.split(Axis::Cols, q, &sizes)?;
        let ks = tape.split(Axis::Cols, k, &sizes)?;
        let vs = tape.split(Axis::Cols, v, &sizes)?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            heads.push(tape.attention(qs[h], ks[h], vs[h])?);
        }
        let cat = tape.concat(Axis::Cols, &heads)?;
        self.lin(tape, bound, cat, a.o)
    }

    /// Record the forward pass. `x_t` is `[T x latent_dim]`; the condition
    /// streams come straight from a clip. Returns head outputs as tape vars.
    pub fn forward(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundModel,
        t: f64,
        cond: &VideoCondition,
        x_t: &Tensor<f64>,
    ) -> Result<ModelOutput, ModelError> {
        if !t.is_finite() {
            return Err(ModelError::BadTimestep(t));
        }
        if x_t.cols() != self.config.latent_dim() {
            return Err(ModelError::DimMismatch {
                what: "x_t",
                expected: self.config.latent_dim(),
                got: x_t.cols(),
            });
        }
        if cond.semantic.cols() != self.config.d_sem {
            return Err(ModelError::DimMismatch {
                what: "semantic condition",
                expected: self.config.d_sem,
                got: cond.semantic.cols(),
            });
        }
        if cond.sync.cols() != self.config.d_sync {
            return Err(ModelError::DimMismatch {
                what: "sync condition",
                expected: self.config.d_sync,
                got: cond.sync.cols(),
            });
        }
        let t_frames = x_t.rows();
        let sync_aligned = align_sync(&cond.sync, t_frames)?;
        let layout = self.layout();

        let x_in = tape.input(x_t.clone());
        let sem_in = tape.input(cond.semantic.clone());
        let sync_in = tape.input(sync_aligned);

        let mut x = self.lin(tape, bound, x_in, layout.in_proj)?;

        // Latent tokens carry fixed sinusoidal positions; semantic tokens
        // deliberately do not (set-style conditioning).
        let pos = tape.input(positional_features(t_frames, self.config.d_model));
        x = tape.add(x, pos)?;

        // Timestep embedding, added to every token.
        let tf = tape.input(time_features(t, self.config.d_model));
        let te = self.lin(tape, bound, tf, layout.time1)?;
        let te = tape.gelu(te)?;
        let te = self.lin(tape, bound, te, layout.time2)?;
        let te = tape.reshape(te, vec![self.config.d_model])?;
        x = tape.add_bias(x, te)?;

        // Semantic tokens carry no positional encoding: conditioning treats
        // them as a set.
        let sem = self.lin(tape, bound, sem_in, layout.sem_proj)?;

        for block in &layout.blocks {
            let sync_add = self.lin(tape, bound, sync_in, block.sync_proj)?;
            x = tape.add(x, sync_add)?;

            let h = self.norm(tape, bound, x, block.ln1)?;
            let sa = self.mha(tape, bound, h, h, &block.attn)?;
            x = tape.add(x, sa)?;

            let h = self.norm(tape, bound, x, block.ln_ca)?;
            let ca = self.mha(tape, bound, h, sem, &block.cross)?;
            x = tape.add(x, ca)?;

            let h = self.norm(tape, bound, x, block.ln2)?;
            let f = self.lin(tape, bound, h, block.ff1)?;
            let f = tape.gelu(f)?;
            let f = self.lin(tape, bound, f, block.ff2)?;
            x = tape.add(x, f)?;
        }

        let trunk = self.norm(tape, bound, x, layout.out_ln)?;

        let velocity = match layout.flow_head {
            Some(fh) => {
                let raw = self.lin(tape, bound, trunk, fh)?;
                Some(tape.scale(raw, self.config.head_scale)?)
            }
            None => None,
        };
        let event_logits = match (&layout.event_sync_proj, &layout.event_mlp) {
            (Some(esp), Some(mlp)) => {
                let branch = self.lin(tape, bound, sync_in, *esp)?;
                let joined = tape.concat(Axis::Cols, &[trunk, branch])?;
                let h = self.lin(tape, bound, joined, mlp[0])?;
                let h = tape.gelu(h)?;
                let h = self.lin(tape, bound, h, mlp[1])?;
                let h = tape.gelu(h)?;
                Some(self.lin(tape, bound, h, mlp[2])?)
            }
            _ => None,
        };
        Ok(ModelOutput {
            velocity,
            event_logits,
        })
    }

    /// Convenience eval: run forward on a scratch tape and return values.
    pub fn eval(
        &self,
        t: f64,
        cond: &VideoCondition,
        x_t: &Tensor<f64>,
    ) -> Result<(Option<Tensor<f64>>, Option<Tensor<f64>>), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, t, cond, x_t)?;
        Ok((
            out.velocity.map(|v| tape.value(v).clone()),
            out.event_logits.map(|v| tape.value(v).clone()),
        ))
    }

    fn layout(&self) -> Layout {
        // Rebuilding the layout is index bookkeeping only; tensors are not
        // touched. Keeps Layout derivable from config alone for loading.
        let (layout, names, _) = build_layout(&self.config, 0);
        debug_assert_eq!(names, self.names);
        layout
    }

    /// Grow an audio-only joint backbone (`n_classes == 0`) to `n_classes`
    /// event channels. New input rows and output columns are zero, so the
    /// audio velocity at init is identical to the backbone's whenever the
    /// event channels of x_t are zero.
    pub fn extend_for_events(&self, n_classes: usize) -> Result<VelocityField, ModelError> {
        if self.config.variant != Variant::Joint || self.config.n_classes != 0 {
            return Err(ModelError::NotAnAudioBackbone {
                variant: self.config.variant,
                n_classes: self.config.n_classes,
            });
        }
        let new_config = ModelConfig {
            n_classes,
            ..self.config
        };
        let mut extended = VelocityField::new(new_config, 0)?;
        let old: std::collections::HashMap<&str, &Tensor<f64>> = self
            .names
            .iter()
            .map(|n| n.as_str())
            .zip(self.params.iter())
            .collect();
        for (name, tensor) in extended.names.iter().zip(extended.params.iter_mut()) {
            let src = old
                .get(name.as_str())
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            *tensor = match name.as_str() {
                "in_proj.w" => {
                    // [d_audio x d_model] -> [(d_audio + C) x d_model]
                    let mut t = Tensor::zeros(vec![
                        self.config.d_audio + n_classes,
                        self.config.d_model,
                    ]);
                    for r in 0..src.rows() {
                        for c in 0..src.cols() {
                            t.set(r, c, src.at(r, c));
                        }
                    }
                    t
                }
                "flow_head.w" => {
                    // [d_model x d_audio] -> [d_model x (d_audio + C)]
                    let mut t =
                        Tensor::zeros(vec![self.config.d_model, self.config.d_audio + n_classes]);
                    for r in 0..src.rows() {
                        for c in 0..src.cols() {
                            t.set(r, c, src.at(r, c));
                        }
                    }
                    t
                }
                "flow_head.b" => {
                    let mut data = src.data().to_vec();
                    data.extend(std::iter::repeat(0.0).take(n_classes));
                    Tensor::vector(data)
                }
                _ => (*src).clone(),
            };
        }
        Ok(extended)
    }

    // ---- checkpointing --------------------------------------------------

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (name, t) in self.names.iter().zip(&self.params) {
            c.push_f64(format!("param.{name}"), t.clone());
        }
        c
    }

    pub fn load_params(&mut self, c: &Container, path: &Path) -> Result<(), ModelError> {
        for (name, t) in self.names.iter().zip(self.params.iter_mut()) {
            let key = format!("param.{name}");
            let entry = c
                .get(&key)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            let loaded = entry.to_f64();
            if loaded.shape() != t.shape() {
                return Err(ModelError::ConfigMismatch(format!(
                    "{}: parameter `{name}` has shape {:?}, expected {:?}",
                    path.display(),
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }

    /// Write a standalone model checkpoint (no optimizer state).
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::to_string_pretty(&self.config)?;
        write_checkpoint(path, &meta, &self.to_container())?;
        Ok(())
    }

    /// Load a standalone model checkpoint; the stored config must equal
    /// `expected` when given.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<VelocityField, ModelError> {
        let (meta, container) = read_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_str(&meta)?;
        if let Some(exp) = expected {
            if *exp != config {
                return Err(ModelError::ConfigMismatch(format!(
                    "{}: stored config differs from the requested one",
                    path.display()
                )));
            }
        }
        let mut model = VelocityField::new(config, 0)?;
        model.load_params(&container, path)?;
        Ok(model)
    }
}
