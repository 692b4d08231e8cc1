//! Synthetic percussive-clip generator and on-disk dataset format.
//!
//! Stands in for a real hits dataset and its pretrained feature front-ends.
//! Each clip carries audio latents (sums of per-hit decaying impulses along
//! per-class signature directions), a two-stream video condition (low-rate
//! semantic tokens that encode the class set, high-rate sync features that
//! encode hit timing), and frame-level event annotations.

use crate::container::{Container, ContainerError};
use crate::par;
use crate::seeding::{substream, subseed};
use foleyflow_autograd::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Time-major latent matrix `[T x D]`.
pub type LatentSeq = Tensor<f64>;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Impulse-response decay time constant, in latent frames.
pub const DECAY_FRAMES: f64 = 4.0;
/// Stddev of the per-hit perturbation of the class signature direction.
pub const SIGNATURE_NOISE: f64 = 0.05;
const FLOOR_NOISE: f64 = 0.01;
const SEMANTIC_NOISE: f64 = 0.1;
const SYNC_NOISE: f64 = 0.02;
/// Sync smear half-width in sync frames; kernel is exp(-|d|).
const SYNC_SMEAR: i64 = 3;
/// Sync timing jitter bound, in latent frames (spec bound: at most one).
const SYNC_JITTER_FRAMES: f64 = 0.3;
/// Root seed for globally fixed vectors (class signatures, prototypes).
const FIXED_BASIS_SEED: u64 = 0x0f01_ef10;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("hit {index} at {time_s}s is outside the clip [0, {duration_s}s)")]
    HitOutOfRange {
        index: usize,
        time_s: f64,
        duration_s: f64,
    },
    #[error("hit {index} has class {class_id}, but the clip declares {n_classes} classes")]
    ClassOutOfRange {
        index: usize,
        class_id: usize,
        n_classes: usize,
    },
    #[error(
        "hits {first} and {second} are {gap_s:.4}s apart, below the minimum {min_gap_s:.4}s"
    )]
    HitsTooClose {
        first: usize,
        second: usize,
        gap_s: f64,
        min_gap_s: f64,
    },
    #[error("clip has zero frames")]
    ZeroLength,
    #[error("target duration {target_s}s is not an integer multiple of {duration_s}s (pass allow_truncate to cut)")]
    NotAMultiple { target_s: f64, duration_s: f64 },
    #[error("container error: {0}")]
    Container(#[from] ContainerError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),
    #[error("manifest version {found}, expected {expected}")]
    ManifestVersion { found: u32, expected: u32 },
    #[error("clip `{clip_id}`: missing or unreadable file `{file}`: {detail}")]
    MissingClipFile {
        clip_id: String,
        file: String,
        detail: String,
    },
    #[error("clip `{clip_id}`: manifest/file inconsistency: {what}")]
    Inconsistent { clip_id: String, what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub time_s: f64,
    pub class_id: usize,
}

/// Full description of one synthetic clip; generation is a pure function of
/// this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub duration_s: f64,
    pub latent_fps: f64,
    pub n_classes: usize,
    pub hits: Vec<Hit>,
    pub seed: u64,
}

impl ClipSpec {
    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.latent_fps).round() as usize
    }

    /// Hits must lie in the clip, carry valid classes, and be at least two
    /// frames apart so each occupies a distinct frame.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_frames() == 0 {
            return Err(DatasetError::ZeroLength);
        }
        for (i, h) in self.hits.iter().enumerate() {
            if !(0.0..self.duration_s).contains(&h.time_s) {
                return Err(DatasetError::HitOutOfRange {
                    index: i,
                    time_s: h.time_s,
                    duration_s: self.duration_s,
                });
            }
            if h.class_id >= self.n_classes {
                return Err(DatasetError::ClassOutOfRange {
                    index: i,
                    class_id: h.class_id,
                    n_classes: self.n_classes,
                });
            }
        }
        let min_gap = 2.0 / self.latent_fps;
        let mut order: Vec<usize> = (0..self.hits.len()).collect();
        order.sort_by(|&a, &b| {
            self.hits[a]
                .time_s
                .partial_cmp(&self.hits[b].time_s)
                .unwrap()
        });
        for w in order.windows(2) {
            let gap = self.hits[w[1]].time_s - self.hits[w[0]].time_s;
            if gap < min_gap {
                return Err(DatasetError::HitsTooClose {
                    first: w[0],
                    second: w[1],
                    gap_s: gap,
                    min_gap_s: min_gap,
                });
            }
        }
        Ok(())
    }
}

/// Dimensions of the synthetic feature streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_audio: usize,
    pub d_sem: usize,
    pub d_sync: usize,
    /// Sync frames per latent frame (>= 1).
    pub sync_rate_mult: usize,
    /// Number of low-rate semantic tokens per clip.
    pub sem_tokens: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            d_audio: 20,
            d_sem: 16,
            d_sync: 8,
            sync_rate_mult: 2,
            sem_tokens: 8,
        }
    }
}

/// Two-stream condition: low-rate class-bearing semantic tokens and
/// high-rate timing-bearing sync features.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoCondition {
    pub semantic: Tensor<f64>,
    pub sync: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventAnnotation {
    pub events: Vec<Hit>,
    /// Binary `[T x C]` map, one row per latent frame.
    pub frame_map: Tensor<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub audio_latents: LatentSeq,
    pub condition: VideoCondition,
    pub annotation: EventAnnotation,
    pub spec: ClipSpec,
}

/// Fixed per-class signature direction in audio-latent space.
pub fn class_signature(class_id: usize, d_audio: usize) -> Vec<f64> {
    let mut rng = substream(
        FIXED_BASIS_SEED,
        "class-signature",
        &[class_id as u64, d_audio as u64],
    );
    (0..d_audio).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Fixed per-class prototype in semantic-feature space.
pub fn class_prototype(class_id: usize, d_sem: usize) -> Vec<f64> {
    let mut rng = substream(
        FIXED_BASIS_SEED,
        "class-prototype",
        &[class_id as u64, d_sem as u64],
    );
    (0..d_sem).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Fixed classless direction the sync impulse train points along.
fn sync_pattern(d_sync: usize) -> Vec<f64> {
    let mut rng = substream(FIXED_BASIS_SEED, "sync-pattern", &[d_sync as u64]);
    let v: Vec<f64> = (0..d_sync).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Nearest latent frame to `time_s`; exact half-frame ties round toward the
/// earlier frame (with a 1e-9 guard against representation dust), and the
/// result is clamped onto the grid.
pub fn nearest_frame(time_s: f64, fps: f64, n_frames: usize) -> usize {
    let f = time_s * fps;
    let floor = f.floor();
    let frac = f - floor;
    let frame = if frac > 0.5 + 1e-9 {
        floor as i64 + 1
    } else {
        floor as i64
    };
    frame.clamp(0, n_frames.saturating_sub(1) as i64) as usize
}

/// Rasterize events onto the frame grid as a binary `[T x C]` map.
pub fn rasterize(
    events: &[Hit],
    latent_fps: f64,
    n_frames: usize,
    n_classes: usize,
) -> Result<Tensor<f64>, DatasetError> {
    let mut map = Tensor::zeros(vec![n_frames, n_classes]);
    for (i, h) in events.iter().enumerate() {
        if h.class_id >= n_classes {
            return Err(DatasetError::ClassOutOfRange {
                index: i,
                class_id: h.class_id,
                n_classes,
            });
        }
        let t = nearest_frame(h.time_s, latent_fps, n_frames);
        map.set(t, h.class_id, 1.0);
    }
    Ok(map)
}

/// Generate one clip. Pure in (spec, feature dims): identical inputs yield
/// bit-identical clips.
pub fn generate_clip(spec: &ClipSpec, dims: &FeatureDims) -> Result<SyntheticClip, DatasetError> {
    spec.validate()?;
    let t_frames = spec.n_frames();
    let d_audio = dims.d_audio;
    let mut rng = substream(spec.seed, "clip-noise", &[]);

    // Audio: noise floor plus per-hit decaying impulses along (signature +
    // per-hit jitter) directions.
    let mut audio = Tensor::zeros(vec![t_frames, d_audio]);
    for v in audio.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = FLOOR_NOISE * n;
    }
    let mut sorted_hits = spec.hits.clone();
    sorted_hits.sort_by(|a, b| a.time_s.partial_cmp(&b.time_s).unwrap());
    for hit in &sorted_hits {
        let mut dir = class_signature(hit.class_id, d_audio);
        for d in dir.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *d += SIGNATURE_NOISE * n;
        }
        let start = nearest_frame(hit.time_s, spec.latent_fps, t_frames);
        let reach = (t_frames - start).min(16 * DECAY_FRAMES as usize);
        for k in 0..reach {
            let amp = (-(k as f64) / DECAY_FRAMES).exp();
            let row = start + k;
            for (c, &dv) in dir.iter().enumerate() {
                let cur = audio.at(row, c);
                audio.set(row, c, cur + amp * dv);
            }
        }
    }

    // Semantic tokens: noisy prototypes of the classes present (class set
    // only; deliberately weak timing).
    let present: Vec<usize> = {
        let mut cls: Vec<usize> = sorted_hits.iter().map(|h| h.class_id).collect();
        cls.sort_unstable();
        cls.dedup();
        cls
    };
    let mut semantic = Tensor::zeros(vec![dims.sem_tokens, dims.d_sem]);
    for tok in 0..dims.sem_tokens {
        if present.is_empty() {
            for c in 0..dims.d_sem {
                let n: f64 = StandardNormal.sample(&mut rng);
                semantic.set(tok, c, SEMANTIC_NOISE * n);
            }
        } else {
            let proto = class_prototype(present[tok % present.len()], dims.d_sem);
            for (c, &p) in proto.iter().enumerate() {
                let n: f64 = StandardNormal.sample(&mut rng);
                semantic.set(tok, c, p + SEMANTIC_NOISE * n);
            }
        }
    }

    // Sync: smeared impulse train at the high rate, jittered by at most one
    // latent frame, along a fixed classless pattern.
    let t_sync = t_frames * dims.sync_rate_mult;
    let pattern = sync_pattern(dims.d_sync);
    let mut sync = Tensor::zeros(vec![t_sync, dims.d_sync]);
    for v in sync.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v = SYNC_NOISE * n;
    }
    let jitter_dist = Uniform::new_inclusive(-SYNC_JITTER_FRAMES, SYNC_JITTER_FRAMES);
    for hit in &sorted_hits {
        let jitter_frames: f64 = jitter_dist.sample(&mut rng);
        let jittered = (hit.time_s + jitter_frames / spec.latent_fps)
            .clamp(0.0, spec.duration_s - 1e-9);
        let center = nearest_frame(
            jittered,
            spec.latent_fps * dims.sync_rate_mult as f64,
            t_sync,
        ) as i64;
        for ds in -SYNC_SMEAR..=SYNC_SMEAR {
            let idx = center + ds;
            if idx < 0 || idx >= t_sync as i64 {
                continue;
            }
            let amp = (-(ds.abs() as f64)).exp();
            for (c, &p) in pattern.iter().enumerate() {
                let cur = sync.at(idx as usize, c);
                sync.set(idx as usize, c, cur + amp * p);
            }
        }
    }

    let frame_map = rasterize(&sorted_hits, spec.latent_fps, t_frames, spec.n_classes)?;
    Ok(SyntheticClip {
        audio_latents: audio,
        condition: VideoCondition { semantic, sync },
        annotation: EventAnnotation {
            events: sorted_hits.clone(),
            frame_map,
        },
        spec: ClipSpec {
            hits: sorted_hits,
            ..spec.clone()
        },
    })
}

/// Tile a clip (latents, condition, frame map, events) to `target_s`.
/// `target_s` must be an integer multiple of the clip duration unless
/// truncation is explicitly allowed.
pub fn loop_to_duration(
    clip: &SyntheticClip,
    target_s: f64,
    allow_truncate: bool,
) -> Result<SyntheticClip, DatasetError> {
    let t_frames = clip.spec.n_frames();
    if t_frames == 0 {
        return Err(DatasetError::ZeroLength);
    }
    let ratio = target_s / clip.spec.duration_s;
    let whole = ratio.round();
    let is_multiple = (ratio - whole).abs() < 1e-9 && whole >= 1.0;
    if !is_multiple && !allow_truncate {
        return Err(DatasetError::NotAMultiple {
            target_s,
            duration_s: clip.spec.duration_s,
        });
    }
    let copies = if is_multiple {
        whole as usize
    } else {
        ratio.ceil() as usize
    };

    let mut audio = clip.audio_latents.tile_rows(copies);
    let mut sync = clip.condition.sync.tile_rows(copies);
    let mut frame_map = clip.annotation.frame_map.tile_rows(copies);
    let semantic = clip.condition.semantic.clone();
    let mut events = Vec::with_capacity(clip.annotation.events.len() * copies);
    for k in 0..copies {
        let offset = k as f64 * clip.spec.duration_s;
        for h in &clip.annotation.events {
            events.push(Hit {
                time_s: h.time_s + offset,
                class_id: h.class_id,
            });
        }
    }

    let target_frames = (target_s * clip.spec.latent_fps).round() as usize;
    let sync_mult = clip.condition.sync.rows() / t_frames;
    if target_frames < audio.rows() {
        audio = audio.take_rows(target_frames);
        sync = sync.take_rows(target_frames * sync_mult);
        frame_map = frame_map.take_rows(target_frames);
        events.retain(|h| h.time_s < target_s);
    }

    Ok(SyntheticClip {
        audio_latents: audio,
        condition: VideoCondition { semantic, sync },
        annotation: EventAnnotation { events, frame_map },
        spec: ClipSpec {
            duration_s: target_s,
            ..clip.spec.clone()
        },
    })
}

// ---- dataset-level construction ---------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Single event class; long clips; measures hit timing.
    Onset,
    /// 17 material classes; short single-class test clips.
    Material,
}

impl Task {
    pub fn n_classes(&self) -> usize {
        match self {
            Task::Onset => 1,
            Task::Material => 17,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::Onset => write!(f, "onset"),
            Task::Material => write!(f, "material"),
        }
    }
}

/// Parameters for building a dataset from a single root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: Task,
    pub n_train: usize,
    pub n_val: usize,
    /// Onset task only; the material test split is always 11 clips of
    /// `test_duration_s` per class.
    pub n_test: usize,
    pub duration_s: f64,
    pub test_duration_s: f64,
    pub latent_fps: f64,
    pub dims: FeatureDims,
    pub seed: u64,
}

impl GenConfig {
    pub fn onset(n_train: usize, n_test: usize, seed: u64) -> Self {
        Self {
            task: Task::Onset,
            n_train,
            n_val: (n_train / 10).max(1),
            n_test,
            duration_s: 8.0,
            test_duration_s: 8.0,
            latent_fps: 25.0,
            dims: FeatureDims::default(),
            seed,
        }
    }

    pub fn material(n_train: usize, seed: u64) -> Self {
        Self {
            task: Task::Material,
            n_train,
            n_val: 34, // two short clips per class
            n_test: 11 * 17,
            duration_s: 8.0,
            test_duration_s: 2.0,
            latent_fps: 25.0,
            dims: FeatureDims::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub split: Split,
    pub file: String,
    pub spec: ClipSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub task: Task,
    pub latent_fps: f64,
    pub train_duration_s: f64,
    pub n_classes: usize,
    pub dims: FeatureDims,
    #[serde(default)]
    pub run_hash: Option<String>,
    pub clips: Vec<ClipRecord>,
}

#[derive(Debug, Clone)]
pub struct DatasetClip {
    pub id: String,
    pub split: Split,
    pub clip: SyntheticClip,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub clips: Vec<DatasetClip>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> Vec<&DatasetClip> {
        self.clips.iter().filter(|c| c.split == s).collect()
    }
}

fn sample_hit_times(
    rng: &mut impl Rng,
    n_hits: usize,
    duration_s: f64,
    fps: f64,
) -> Vec<f64> {
    // Rejection-sample until the two-frame spacing invariant holds; shrink
    // the hit count if a crowded draw cannot be placed.
    let min_gap = 2.5 / fps;
    let lo = 0.05 * duration_s;
    let hi = 0.95 * duration_s;
    let mut n = n_hits;
    loop {
        'attempt: for _ in 0..200 {
            let mut times: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in times.windows(2) {
                if w[1] - w[0] < min_gap {
                    continue 'attempt;
                }
            }
            return times;
        }
        if n <= 1 {
            return vec![duration_s / 2.0];
        }
        n -= 1;
    }
}

fn build_spec(cfg: &GenConfig, split: Split, index: usize) -> ClipSpec {
    let split_tag = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    let seed = subseed(cfg.seed, "clip-seed", &[split_tag.len() as u64, index as u64]);
    let mut rng = substream(cfg.seed, split_tag, &[index as u64]);
    let duration = match (cfg.task, split) {
        (Task::Material, Split::Test) | (Task::Material, Split::Val) => cfg.test_duration_s,
        _ => cfg.duration_s,
    };
    let (n_hits, classes): (usize, Vec<usize>) = match cfg.task {
        Task::Onset => {
            let n = rng.gen_range(1..=6);
            (n, vec![0; n])
        }
        Task::Material => {
            // Single material per clip; balanced across classes.
            let class = index % 17;
            let n = if duration < 4.0 {
                rng.gen_range(1..=3)
            } else {
                rng.gen_range(2..=6)
            };
            (n, vec![class; n])
        }
    };
    let times = sample_hit_times(&mut rng, n_hits, duration, cfg.latent_fps);
    let hits = times
        .into_iter()
        .zip(classes)
        .map(|(time_s, class_id)| Hit { time_s, class_id })
        .collect();
    ClipSpec {
        duration_s: duration,
        latent_fps: cfg.latent_fps,
        n_classes: cfg.task.n_classes(),
        hits,
        seed,
    }
}

/// Build the full dataset in memory. Clip generation is pure per clip and
/// runs data-parallel.
pub fn build_dataset(cfg: &GenConfig) -> Result<Dataset, DatasetError> {
    let mut records: Vec<(String, Split, ClipSpec)> = Vec::new();
    for i in 0..cfg.n_train {
        records.push((format!("train_{i:05}"), Split::Train, build_spec(cfg, Split::Train, i)));
    }
    for i in 0..cfg.n_val {
        records.push((format!("val_{i:05}"), Split::Val, build_spec(cfg, Split::Val, i)));
    }
    for i in 0..cfg.n_test {
        records.push((format!("test_{i:05}"), Split::Test, build_spec(cfg, Split::Test, i)));
    }

    let dims = cfg.dims;
    let clips = par::par_try_map(&records, |(id, split, spec)| {
        generate_clip(spec, &dims).map(|clip| DatasetClip {
            id: id.clone(),
            split: *split,
            clip,
        })
    })?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        task: cfg.task,
        latent_fps: cfg.latent_fps,
        train_duration_s: cfg.duration_s,
        n_classes: cfg.task.n_classes(),
        dims: cfg.dims,
        run_hash: None,
        clips: records
            .iter()
            .map(|(id, split, spec)| ClipRecord {
                id: id.clone(),
                split: *split,
                file: format!("{id}.ftc"),
                spec: spec.clone(),
            })
            .collect(),
    };
    Ok(Dataset { manifest, clips })
}

/// Write manifest + one tensor container per clip.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&ds.manifest)?;
    std::fs::write(&manifest_path, json).map_err(|source| DatasetError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    for (record, dsclip) in ds.manifest.clips.iter().zip(&ds.clips) {
        let mut c = Container::new();
        c.push_f32("audio", dsclip.clip.audio_latents.to_f32());
        c.push_f32("semantic", dsclip.clip.condition.semantic.to_f32());
        c.push_f32("sync", dsclip.clip.condition.sync.to_f32());
        c.push_f32("frame_map", dsclip.clip.annotation.frame_map.to_f32());
        c.write(&dir.join(&record.file))?;
    }
    Ok(())
}

/// Read a dataset directory back. Latent payloads come back at container
/// (f32) precision; annotations are reconstructed from the manifest specs.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|source| DatasetError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetError::ManifestVersion {
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let records = manifest.clips.clone();
    let clips = par::par_try_map(&records, |record| {
        let path = dir.join(&record.file);
        let container = Container::read(&path).map_err(|e| match e {
            ContainerError::Io { .. } => DatasetError::MissingClipFile {
                clip_id: record.id.clone(),
                file: record.file.clone(),
                detail: e.to_string(),
            },
            other => DatasetError::Container(other),
        })?;
        let audio = container.require(&path, "audio")?.to_f64();
        let semantic = container.require(&path, "semantic")?.to_f64();
        let sync = container.require(&path, "sync")?.to_f64();
        let frame_map = container.require(&path, "frame_map")?.to_f64();
        let t = record.spec.n_frames();
        if audio.rows() != t || frame_map.rows() != t {
            return Err(DatasetError::Inconsistent {
                clip_id: record.id.clone(),
                what: format!(
                    "spec implies {t} frames but file has audio {} / frame_map {}",
                    audio.rows(),
                    frame_map.rows()
                ),
            });
        }
        let mut sorted_hits = record.spec.hits.clone();
        sorted_hits.sort_by(|a, b| a.time_s.partial_cmp(&b.time_s).unwrap());
        Ok(DatasetClip {
            id: record.id.clone(),
            split: record.split,
            clip: SyntheticClip {
                audio_latents: audio,
                condition: VideoCondition { semantic, sync },
                annotation: EventAnnotation {
                    events: sorted_hits,
                    frame_map,
                },
                spec: record.spec.clone(),
            },
        })
    })?;
    Ok(Dataset { manifest, clips })
}
