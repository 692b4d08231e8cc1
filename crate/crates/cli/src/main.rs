//! Pipeline entry point.
//!
//! Subcommands: `synth-data`, `train`, `sample`, `evaluate`, `report`,
//! `gradcheck`. Exit codes: 0 success, 2 usage error, 3 data error,
//! 4 numeric failure. One root seed per command; every consumer derives
//! its own substream.

mod manifest;

use clap::{Args, Parser, Subcommand};
use foleyflow_autograd::check::run_cases;
use foleyflow_core::container::Container;
use foleyflow_core::dataset::{
    build_dataset, read_dataset, write_dataset, Dataset, DatasetError, GenConfig, Split, Task,
};
use foleyflow_core::events::{read_onsets, write_onsets, CodecError, OnsetRow};
use foleyflow_core::flow::FlowError;
use foleyflow_core::metrics::{render_comparison, MetricsError, MetricsReport};
use foleyflow_core::model::{ModelError, Variant};
use foleyflow_core::pipeline::{
    evaluate, predictions_to_eval, rows_to_eval, sample_split, DecodeOptions, EvalOptions,
    EvalPrediction, PipelineError,
};
use foleyflow_core::trainer::{
    load_train_checkpoint, peek_meta, prepare_clips, pretrain_then_finetune,
    save_train_checkpoint, train_range, AdamW, CkptMeta, TrainConfig, TrainError, TrainLog,
};
use foleyflow_core::{model::VelocityField, seeding::subseed};
use manifest::{sha256_hex, RunManifest};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "foleyflow", version, about = "Event-aware audio generation on synthetic percussive clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (manifest + one tensor container per clip).
    SynthData(SynthDataArgs),
    /// Train a model variant on a dataset.
    Train(TrainArgs),
    /// Sample a trained checkpoint over a dataset split.
    Sample(SampleArgs),
    /// Score predictions against a dataset split.
    Evaluate(EvaluateArgs),
    /// Render a comparison table from evaluation reports.
    Report(ReportArgs),
    /// Finite-difference checks for every registered differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// onset | material
    #[arg(long)]
    task: String,
    /// Number of training clips.
    #[arg(long, default_value_t = 500)]
    clips: usize,
    /// Test clips (onset task; the material test split is fixed at 11 per class).
    #[arg(long)]
    test_clips: Option<usize>,
    /// Training clip duration in seconds.
    #[arg(long, default_value_t = 8.0)]
    duration: f64,
    /// Latent frame rate.
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from synth-data).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML train config; defaults per variant when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// event_only | parallel | joint (required without --config)
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from a checkpoint, continuing its step count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stage 1 of the finetune pathway: train the joint backbone on audio
    /// alone (zero event classes).
    #[arg(long, default_value_t = false)]
    audio_only: bool,
    /// Stage 2 of the finetune pathway: extend this audio-only backbone by
    /// the dataset's class count and finetune the joint objective.
    #[arg(long)]
    finetune_from: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Euler integration steps.
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Peak-picking probability threshold.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Peak-picking minimum gap in frames.
    #[arg(long, default_value_t = 2)]
    min_gap: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Sample output directory (onsets.tsv + gen.ftc).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Row label in comparison tables.
    #[arg(long, default_value = "Joint Heads")]
    model_label: String,
    #[arg(long, default_value = "Scratch")]
    training_label: String,
    /// Onset matching tolerance in seconds.
    #[arg(long, default_value_t = 0.1)]
    tolerance: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation report JSON files, in row order.
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test fixture: add a case with a deliberately wrong gradient.
    #[arg(long, hide = true, default_value_t = false)]
    inject_failure: bool,
}

// ---- error classification ------------------------------------------------

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::BadConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFiniteLoss { .. } | FlowError::NonFiniteState { .. } => {
                CliError::Numeric(e.to_string())
            }
            FlowError::BadTimestep(_) | FlowError::NoSteps => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::BadConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::NonFiniteLogit { .. } => CliError::Numeric(e.to_string()),
            CodecError::EpsilonOutOfRange(_)
            | CodecError::BadThreshold(_)
            | CodecError::BadMinGap => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::NegativeTolerance(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Dataset(d) => d.into(),
            PipelineError::Flow(f) => f.into(),
            PipelineError::Model(m) => m.into(),
            PipelineError::Codec(c) => c.into(),
            PipelineError::Metrics(m) => m.into(),
            PipelineError::LatentDimMismatch { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<foleyflow_core::container::ContainerError> for CliError {
    fn from(e: foleyflow_core::container::ContainerError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!(
            "unknown split `{other}` (expected train|val|test)"
        ))),
    }
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    Variant::parse(s).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown variant `{s}` (expected event_only|parallel|joint)"
        ))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData(args) => cmd_synth_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Report(args) => cmd_report(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

// ---- commands ------------------------------------------------------------

fn cmd_synth_data(args: SynthDataArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let task = match args.task.as_str() {
        "onset" => Task::Onset,
        "material" => Task::Material,
        other => {
            return Err(CliError::Usage(format!(
                "unknown task `{other}` (expected onset|material)"
            )))
        }
    };
    let mut gen = match task {
        Task::Onset => GenConfig::onset(
            args.clips,
            args.test_clips.unwrap_or((args.clips / 5).max(1)),
            args.seed,
        ),
        Task::Material => GenConfig::material(args.clips, args.seed),
    };
    gen.duration_s = args.duration;
    gen.latent_fps = args.fps;

    let config_hash = sha256_hex(
        serde_json::to_string(&gen)
            .map_err(|e| CliError::Data(e.to_string()))?
            .as_bytes(),
    );
    let mut run = RunManifest::new(
        "synth-data",
        config_hash,
        vec![args.seed],
        vec![],
        vec![args.out.display().to_string()],
    );

    let mut ds = build_dataset(&gen)?;
    ds.manifest.run_hash = Some(run.manifest_hash.clone());
    write_dataset(&ds, &args.out)?;
    run.timing_s = start.elapsed().as_secs_f64();
    run.write(&args.out)?;

    let (n_train, n_val, n_test) = (
        ds.split(Split::Train).len(),
        ds.split(Split::Val).len(),
        ds.split(Split::Test).len(),
    );
    println!(
        "wrote {} clips ({n_train} train / {n_val} val / {n_test} test, task {task}) to {}",
        ds.clips.len(),
        args.out.display()
    );
    println!("manifest hash {}", run.manifest_hash);
    Ok(())
}

fn load_or_default_config(args: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            TrainConfig::from_toml(&text)?
        }
        None => {
            let variant = args.variant.as_deref().ok_or_else(|| {
                CliError::Usage("pass --variant or --config".to_string())
            })?;
            TrainConfig::desk_default(parse_variant(variant)?)
        }
    };
    if let Some(v) = &args.variant {
        cfg.variant = parse_variant(v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let ds = read_dataset(&args.data)?;
    std::fs::create_dir_all(&args.out)?;

    let cfg = load_or_default_config(&args)?;
    let config_hash = sha256_hex(cfg.to_toml().as_bytes());
    let mut run = RunManifest::new(
        "train",
        config_hash,
        vec![cfg.seed],
        vec![args.data.display().to_string()],
        vec![args.out.display().to_string()],
    );

    let mut log = TrainLog::to_file(&args.out.join("train_log.tsv"))?;
    let ckpt_path = args.out.join("checkpoint.ckpt");
    let dims = ds.manifest.dims;

    let meta_for = |model: &VelocityField, cfg: &TrainConfig, step: usize| CkptMeta {
        model_config: model.config,
        train_config: cfg.clone(),
        step,
        task: ds.manifest.task,
        train_duration_s: ds.manifest.train_duration_s,
        latent_fps: ds.manifest.latent_fps,
        run_hash: Some(run.manifest_hash.clone()),
    };

    if let Some(resume_path) = &args.resume {
        let (mut model, mut opt, meta) = load_train_checkpoint(resume_path)?;
        let cfg = meta.train_config.clone();
        let clips = prepare_clips(&ds.split(Split::Train), cfg.variant, cfg.epsilon)?;
        train_range(
            &mut model,
            &mut opt,
            &clips,
            &cfg,
            meta.step,
            cfg.total_steps,
            &mut log,
        )?;
        let meta = meta_for(&model, &cfg, cfg.total_steps);
        save_train_checkpoint(&ckpt_path, &model, &opt, &meta)?;
    } else if let Some(backbone_path) = &args.finetune_from {
        // Stage 2 of the finetune pathway.
        let (backbone, _, backbone_meta) = load_train_checkpoint(backbone_path)?;
        if backbone_meta.model_config.n_classes != 0 {
            return Err(CliError::Usage(
                "--finetune-from expects an audio-only backbone (train it with --audio-only)"
                    .into(),
            ));
        }
        let mut model = backbone.extend_for_events(ds.manifest.n_classes)?;
        let mut opt = AdamW::new(model.params(), &cfg);
        let clips = prepare_clips(&ds.split(Split::Train), cfg.variant, cfg.epsilon)?;
        train_range(&mut model, &mut opt, &clips, &cfg, 0, cfg.total_steps, &mut log)?;
        let meta = meta_for(&model, &cfg, cfg.total_steps);
        save_train_checkpoint(&ckpt_path, &model, &opt, &meta)?;
    } else if args.audio_only {
        if cfg.variant != Variant::Joint {
            return Err(CliError::Usage(
                "--audio-only pretrains the joint backbone; use --variant joint".into(),
            ));
        }
        let (model, opt) = foleyflow_core::trainer::train_audio_backbone(&ds, &cfg, &mut log)?;
        let meta = meta_for(&model, &cfg, cfg.total_steps);
        save_train_checkpoint(&ckpt_path, &model, &opt, &meta)?;
    } else {
        let model_cfg = cfg.model_config(
            dims.d_audio,
            ds.manifest.n_classes,
            dims.d_sem,
            dims.d_sync,
        );
        let mut model = VelocityField::new(model_cfg, subseed(cfg.seed, "model-seed", &[]))?;
        let mut opt = AdamW::new(model.params(), &cfg);
        let clips = prepare_clips(&ds.split(Split::Train), cfg.variant, cfg.epsilon)?;
        train_range(&mut model, &mut opt, &clips, &cfg, 0, cfg.total_steps, &mut log)?;
        let meta = meta_for(&model, &cfg, cfg.total_steps);
        save_train_checkpoint(&ckpt_path, &model, &opt, &meta)?;
    }

    std::fs::write(args.out.join("config.toml"), cfg.to_toml())?;
    run.timing_s = start.elapsed().as_secs_f64();
    run.write(&args.out)?;
    println!(
        "trained {} for {} steps in {:.1}s -> {}",
        cfg.variant,
        cfg.total_steps,
        run.timing_s,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let split = parse_split(&args.split)?;
    if args.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let ds = read_dataset(&args.data)?;
    let (model, _, meta) = load_train_checkpoint(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;

    let config_hash = sha256_hex(
        format!(
            "{}|{}|{}|{}|{}",
            meta.run_hash.clone().unwrap_or_default(),
            args.steps,
            args.threshold,
            args.min_gap,
            split_name(split),
        )
        .as_bytes(),
    );
    let mut run = RunManifest::new(
        "sample",
        config_hash,
        vec![args.seed],
        vec![
            args.checkpoint.display().to_string(),
            args.data.display().to_string(),
        ],
        vec![args.out.display().to_string()],
    );

    let decode = DecodeOptions {
        threshold: args.threshold,
        min_gap_frames: args.min_gap,
    };
    let preds = sample_split(&model, &meta, &ds, split, args.steps, args.seed, decode)?;

    let mut rows: Vec<OnsetRow> = Vec::new();
    let mut container = Container::new();
    for p in &preds {
        rows.extend(p.onset_rows());
        container.push_f32(format!("probs.{}", p.clip_id), p.frame_probs.to_f32());
        if let Some(gen) = &p.gen_audio {
            container.push_f32(format!("gen_audio.{}", p.clip_id), gen.to_f32());
        }
    }
    write_onsets(&args.out.join("onsets.tsv"), &rows)?;
    container.write(&args.out.join("gen.ftc"))?;
    run.timing_s = start.elapsed().as_secs_f64();
    run.write(&args.out)?;
    println!(
        "sampled {} clips ({} onsets) in {:.1}s -> {}",
        preds.len(),
        rows.len(),
        run.timing_s,
        args.out.display()
    );
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let split = parse_split(&args.split)?;
    let ds = read_dataset(&args.data)?;
    let rows = read_onsets(&args.pred.join("onsets.tsv"))?;
    if rows.is_empty() {
        eprintln!(
            "warning: no predicted onsets in {}; metrics will be zero",
            args.pred.join("onsets.tsv").display()
        );
    }

    let clip_ids: Vec<String> = ds.split(split).iter().map(|c| c.id.clone()).collect();
    let mut eval_inputs = rows_to_eval(&rows, &clip_ids);

    // Pull per-clip probabilities and generated audio when the sample
    // command exported them.
    let gen_path = args.pred.join("gen.ftc");
    if gen_path.exists() {
        let container = Container::read(&gen_path)?;
        for (name, data) in &container.entries {
            if let Some(clip_id) = name.strip_prefix("probs.") {
                if let Some(entry) = eval_inputs.get_mut(clip_id) {
                    entry.pred_class = Some(foleyflow_core::events::clip_vote(
                        &data.to_f64(),
                        0.5,
                    ));
                }
            } else if let Some(clip_id) = name.strip_prefix("gen_audio.") {
                if let Some(entry) = eval_inputs.get_mut(clip_id) {
                    entry.gen_audio = Some(data.to_f64());
                }
            }
        }
    }

    let opts = EvalOptions {
        tolerance_s: args.tolerance,
        ..EvalOptions::default()
    };
    let mut report = evaluate(
        &ds,
        split,
        &eval_inputs,
        (&args.model_label, &args.training_label),
        opts,
    )?;

    let config_hash = sha256_hex(format!("{}|{}", args.tolerance, split_name(split)).as_bytes());
    let mut run = RunManifest::new(
        "evaluate",
        config_hash,
        vec![],
        vec![
            args.data.display().to_string(),
            args.pred.display().to_string(),
        ],
        vec![args.out.display().to_string()],
    );
    report.run_hash = Some(run.manifest_hash.clone());
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(&args.out, json)?;
    run.timing_s = start.elapsed().as_secs_f64();
    if let Some(dir) = args.out.parent() {
        if dir.as_os_str().is_empty() {
            run.write(Path::new("."))?;
        } else {
            run.write(dir)?;
        }
    }
    print!("{}", render_comparison(&[report]));
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    if args.reports.is_empty() {
        return Err(CliError::Usage("pass at least one report file".into()));
    }
    let mut reports: Vec<MetricsReport> = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let text = std::fs::read_to_string(path)?;
        reports.push(serde_json::from_str(&text).map_err(|e| {
            CliError::Data(format!("{}: {e}", path.display()))
        })?);
    }
    let table = render_comparison(&reports);
    if let Some(out) = &args.out {
        std::fs::write(out, &table)?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut cases = foleyflow_core::checks::full_suite(args.seed);
    if args.inject_failure {
        cases.push(foleyflow_autograd::check::injected_bad_gradient_case());
    }
    let outcomes = run_cases(&cases);
    let mut failed = 0;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {:<28} {}", o.name, o.detail);
        if !o.passed {
            failed += 1;
        }
    }
    println!(
        "{} of {} gradient checks passed in {:.1}s",
        outcomes.len() - failed,
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::Numeric(format!(
            "{failed} gradient check(s) failed"
        )));
    }
    Ok(())
}
