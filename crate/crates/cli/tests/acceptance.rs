//! Acceptance suite: every release criterion, one pass/fail line each.
//!
//! The heavy criteria (the synthetic onset benchmark and the finetune
//! ordering check) train real models and dominate the runtime; lighter
//! criteria verify gradient correctness, flow identities, codec round
//! trips, metric oracles, and whole-pipeline determinism through the
//! installed binary. Heavy criteria serialize on a mutex so per-variant
//! wall-clock budgets are measured without contention.

use foleyflow_autograd::Tensor;
use foleyflow_core::dataset::{build_dataset, GenConfig, Split, VideoCondition};
use foleyflow_core::events::{decode_probs, encode_logits};
use foleyflow_core::flow::{
    cfm_loss_with, euler_integrate, interpolate, noise_latents, FlowSample,
};
use foleyflow_core::metrics::{average_precision, match_onsets, mcd, ScoredOnset, MCD_SCALE};
use foleyflow_core::model::Variant;
use foleyflow_core::pipeline::{
    evaluate, predictions_to_eval, sample_split, DecodeOptions, EvalOptions,
};
use foleyflow_core::seeding::substream;
use foleyflow_core::trainer::{
    pretrain_then_finetune, train_audio_backbone, train_from_scratch, CkptMeta, TrainConfig,
    TrainLog,
};
use foleyflow_core::model::VelocityField;
use rand::Rng;
use std::collections::BTreeMap;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

fn pass(name: &str, detail: String) {
    println!("[PASS] {name}: {detail}");
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_foleyflow")
}

/// Heavy criteria run one at a time so wall-clock budgets are honest.
fn heavy_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(std::sync::PoisonError::into_inner)
}

/// Gradient correctness: every op and the flow/combined losses on 2-layer
/// configs match finite differences within 1e-5; the CLI battery finishes
/// inside 60 seconds.
#[test]
fn criterion_gradient_correctness() {
    let _guard = heavy_lock();
    let start = Instant::now();
    let out = Command::new(binary())
        .arg("gradcheck")
        .output()
        .expect("gradcheck runs");
    let elapsed = start.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "gradcheck failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(
        stdout.contains("flow_matching_loss_2layer") && stdout.contains("combined_loss_2layer"),
        "battery must include the training losses:\n{stdout}"
    );
    assert!(!stdout.contains("[FAIL]"), "{stdout}");
    assert!(elapsed < 60.0, "gradcheck took {elapsed:.1}s, budget 60s");
    pass(
        "gradient correctness",
        format!("all ops + both losses <= 1e-5 rel, {elapsed:.1}s < 60s"),
    );
}

/// Flow identities: interpolation endpoints bit-exact; the oracle field
/// v = x1 - x0 has exactly zero matching loss; Euler with a constant field
/// reaches x1 exactly for any step count.
#[test]
fn criterion_flow_identities() {
    let mut rng = substream(42, "acceptance-flow", &[]);
    let x0 = Tensor::from_fn(9, 5, |_, _| rng.gen_range(-2.0..2.0));
    let x1 = Tensor::from_fn(9, 5, |_, _| rng.gen_range(-2.0..2.0));
    assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
    assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);

    let cond = VideoCondition {
        semantic: Tensor::zeros(vec![2, 4]),
        sync: Tensor::zeros(vec![18, 2]),
    };
    let batch: Vec<FlowSample> = (0..5)
        .map(|i| FlowSample {
            x0: Tensor::from_fn(9, 5, |r, c| ((r + c + i) as f64).sin()),
            x1: Tensor::from_fn(9, 5, |r, c| ((2 * r + c + i) as f64).cos()),
            t: i as f64 / 5.0,
            cond: cond.clone(),
        })
        .collect();
    let mut idx = 0usize;
    let loss = cfm_loss_with(
        |_, _, _| {
            let d = batch[idx].x1.sub(&batch[idx].x0);
            idx += 1;
            Ok(d)
        },
        &batch,
    )
    .unwrap();
    assert_eq!(loss, 0.0, "oracle field must yield exactly zero loss");

    for n_steps in [1usize, 2, 3, 25, 100] {
        let start = noise_latents(9, 5, 77);
        let displacement = x1.sub(&start);
        let out = euler_integrate(|_, _| Ok(displacement.clone()), start, n_steps).unwrap();
        for (got, want) in out.data().iter().zip(x1.data()) {
            assert!(
                (got - want).abs() < 1e-12,
                "constant field missed x1 at {n_steps} steps"
            );
        }
    }
    pass(
        "flow identities",
        "t=0/t=1 bit-exact, oracle loss exactly 0, constant-field Euler exact".into(),
    );
}

/// Codec round trips: threshold(decode(encode(y))) == y, exhaustively over
/// all 2^24 binary maps at T=8, C=3 (plus randomized larger maps), and the
/// encode-value oracle at eps = 1e-5.
#[test]
fn criterion_codec_round_trips() {
    let _guard = heavy_lock();
    let eps = 1e-5;
    let start = Instant::now();
    // Exhaustive enumeration: every binary map with 24 cells.
    let mut map = Tensor::zeros(vec![8, 3]);
    let mut count = 0u64;
    for bits in 0u32..(1 << 24) {
        for cell in 0..24 {
            map.data_mut()[cell] = f64::from((bits >> cell) & 1);
        }
        let probs = decode_probs(&encode_logits(&map, eps).unwrap().logits).unwrap();
        for (cell, (&p, &y)) in probs.data().iter().zip(map.data()).enumerate() {
            let recovered = f64::from(p >= 0.5);
            assert_eq!(recovered, y, "map {bits:#x} cell {cell}");
        }
        count += 1;
    }
    assert_eq!(count, 1 << 24);

    // Randomized beyond the exhaustive sizes.
    let mut rng = substream(9, "codec-accept", &[]);
    for _ in 0..200 {
        let t = rng.gen_range(9..64);
        let c = rng.gen_range(1..12);
        let bigger = Tensor::from_fn(t, c, |_, _| f64::from(rng.gen_bool(0.2)));
        let probs = decode_probs(&encode_logits(&bigger, eps).unwrap().logits).unwrap();
        let thresholded = probs.map(|p| if p >= 0.5 { 1.0 } else { 0.0 });
        assert_eq!(thresholded, bigger);
    }

    // encode(1, 1e-5) against the high-precision oracle ln((1-eps)/eps).
    let enc = encode_logits(&Tensor::matrix(1, 1, vec![1.0]).unwrap(), eps).unwrap();
    let oracle = ((1.0 - eps) / eps).ln();
    assert!((enc.logits.data()[0] - 11.5129).abs() < 1e-3);
    assert!((enc.logits.data()[0] - oracle).abs() < 1e-12);
    pass(
        "codec round trips",
        format!(
            "exhaustive 2^24 maps at T=8,C=3 in {:.1}s + randomized; encode(1,1e-5) ~ 11.5129",
            start.elapsed().as_secs_f64()
        ),
    );
}

/// Metric oracles: brute-force matching on >= 1000 random instances, the
/// hand-enumerated AP example, and the analytic MCD cases.
#[test]
fn criterion_metric_oracles() {
    fn brute(refs: &[f64], preds: &[f64], tol: f64, p: usize, used: &mut Vec<bool>) -> usize {
        if p == preds.len() {
            return 0;
        }
        let mut best = brute(refs, preds, tol, p + 1, used);
        for r in 0..refs.len() {
            if !used[r] && (refs[r] - preds[p]).abs() <= tol {
                used[r] = true;
                best = best.max(1 + brute(refs, preds, tol, p + 1, used));
                used[r] = false;
            }
        }
        best
    }
    let mut rng = substream(77, "accept-match", &[]);
    for _ in 0..1000 {
        let n = rng.gen_range(0..=8);
        let m = rng.gen_range(0..=8);
        let refs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let preds: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..3.0)).collect();
        let got = match_onsets(&refs, &preds, 0.1).unwrap().n_matched();
        let want = brute(&refs, &preds, 0.1, 0, &mut vec![false; refs.len()]);
        assert_eq!(got, want, "{refs:?} vs {preds:?}");
    }

    // AP on the 3-prediction example: (1 + 2/3)/2 = 83.33%.
    let mut refs = BTreeMap::new();
    refs.insert("c".to_string(), vec![1.0, 2.0]);
    let preds = vec![
        ScoredOnset { clip_id: "c".into(), time_s: 1.01, confidence: 0.9 },
        ScoredOnset { clip_id: "c".into(), time_s: 5.0, confidence: 0.8 },
        ScoredOnset { clip_id: "c".into(), time_s: 2.03, confidence: 0.7 },
    ];
    let ap = average_precision(&preds, &refs, 0.1).unwrap();
    assert!((ap - 83.333333).abs() <= 0.01, "{ap}");

    // MCD constant-offset analytic case and coefficient-0 exclusion.
    let base = Tensor::from_fn(7, 13, |r, c| (r as f64 - c as f64) * 0.21);
    let delta = 1.234;
    let mut off = base.clone();
    for r in 0..7 {
        off.set(r, 5, base.at(r, 5) + delta);
    }
    let got = mcd(&off, &base).unwrap();
    assert!((got - MCD_SCALE * delta).abs() < 1e-9);
    let mut c0 = base.clone();
    for r in 0..7 {
        c0.set(r, 0, base.at(r, 0) - 77.0);
    }
    assert_eq!(mcd(&c0, &base).unwrap(), 0.0);
    pass(
        "metric oracles",
        "1000-case matching oracle, AP 83.33 +- 0.01, MCD analytic cases".into(),
    );
}

// ---- heavy criteria: shared trained benchmark ------------------------------

struct BenchOutcome {
    reports: BTreeMap<&'static str, foleyflow_core::metrics::MetricsReport>,
    wall_minutes: BTreeMap<&'static str, f64>,
    untrained_ap: f64,
}

fn onset_benchmark() -> &'static BenchOutcome {
    static CELL: OnceLock<BenchOutcome> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = build_dataset(&GenConfig::onset(500, 100, 1)).expect("dataset");
        let mut reports = BTreeMap::new();
        let mut wall = BTreeMap::new();

        for (key, variant) in [
            ("joint", Variant::Joint),
            ("parallel", Variant::Parallel),
            ("event_only", Variant::EventOnly),
        ] {
            let start = Instant::now();
            let cfg = TrainConfig::desk_default(variant);
            let mut log = TrainLog::in_memory();
            let (model, _) = train_from_scratch(&ds, &cfg, &mut log).expect("training");
            let meta = CkptMeta {
                model_config: model.config,
                train_config: cfg.clone(),
                step: cfg.total_steps,
                task: ds.manifest.task,
                train_duration_s: ds.manifest.train_duration_s,
                latent_fps: ds.manifest.latent_fps,
                run_hash: None,
            };
            let preds = sample_split(
                &model,
                &meta,
                &ds,
                Split::Test,
                25,
                7,
                DecodeOptions::default(),
            )
            .expect("sampling");
            let eval_in = predictions_to_eval(&preds, 0.5);
            let report = evaluate(
                &ds,
                Split::Test,
                &eval_in,
                (key, "Scratch"),
                EvalOptions::default(),
            )
            .expect("evaluation");
            wall.insert(key, start.elapsed().as_secs_f64() / 60.0);
            reports.insert(key, report);
        }

        // Untrained reference: a fresh model with its zero-initialized heads.
        let cfg = TrainConfig::desk_default(Variant::Joint);
        let dims = ds.manifest.dims;
        let mcfg = cfg.model_config(dims.d_audio, 1, dims.d_sem, dims.d_sync);
        let untrained = VelocityField::new(mcfg, 999).expect("model");
        let meta = CkptMeta {
            model_config: untrained.config,
            train_config: cfg,
            step: 0,
            task: ds.manifest.task,
            train_duration_s: ds.manifest.train_duration_s,
            latent_fps: ds.manifest.latent_fps,
            run_hash: None,
        };
        let preds = sample_split(
            &untrained,
            &meta,
            &ds,
            Split::Test,
            25,
            7,
            DecodeOptions::default(),
        )
        .expect("untrained sampling");
        let eval_in = predictions_to_eval(&preds, 0.5);
        let untrained_report = evaluate(
            &ds,
            Split::Test,
            &eval_in,
            ("untrained", "None"),
            EvalOptions::default(),
        )
        .expect("untrained eval");

        BenchOutcome {
            reports,
            wall_minutes: wall,
            untrained_ap: untrained_report.ap_pct,
        }
    })
}

/// Synthetic benchmark: trained parallel and joint reach AP >= 90% and
/// count match >= 80%; event-only reaches AP >= 80%; all three beat an
/// untrained model by >= 40 AP points; each variant fits 20 CPU minutes.
#[test]
fn criterion_synthetic_benchmark() {
    let _guard = heavy_lock();
    let bench = onset_benchmark();
    for key in ["joint", "parallel", "event_only"] {
        let report = &bench.reports[key];
        let wall = bench.wall_minutes[key];
        assert!(wall <= 20.0, "{key}: {wall:.1} min exceeds the 20 min budget");
        let ap_floor = if key == "event_only" { 80.0 } else { 90.0 };
        assert!(
            report.ap_pct >= ap_floor,
            "{key}: AP {:.1}% below {ap_floor}%",
            report.ap_pct
        );
        if key != "event_only" {
            assert!(
                report.count_match_pct >= 80.0,
                "{key}: count match {:.1}% below 80%",
                report.count_match_pct
            );
        }
        assert!(
            report.ap_pct - bench.untrained_ap >= 40.0,
            "{key}: AP {:.1}% vs untrained {:.1}% gap below 40",
            report.ap_pct,
            bench.untrained_ap
        );
        pass(
            "synthetic benchmark",
            format!(
                "{key}: AP {:.1}%, count match {:.1}%, acc {:.1}%, {wall:.1} min (untrained AP {:.1}%)",
                report.ap_pct, report.count_match_pct, report.onset_acc_pct, bench.untrained_ap
            ),
        );
    }
}

/// Finetune preservation: immediately after extension the audio velocities
/// equal the backbone's exactly when the event channels of x_t are zero.
#[test]
fn criterion_finetune_preservation() {
    let _guard = heavy_lock();
    let ds = build_dataset(&GenConfig {
        n_train: 6,
        n_val: 1,
        n_test: 2,
        duration_s: 2.0,
        test_duration_s: 2.0,
        ..GenConfig::onset(6, 2, 55)
    })
    .unwrap();
    let cfg = TrainConfig {
        total_steps: 40,
        warmup_steps: 4,
        decay_start: 20,
        batch_size: 4,
        d_model: 32,
        n_layers: 2,
        ..TrainConfig::desk_default(Variant::Joint)
    };
    // A trained (non-zero) backbone makes the equality non-trivial.
    let (backbone, _) = train_audio_backbone(&ds, &cfg, &mut TrainLog::in_memory()).unwrap();
    let extended = backbone.extend_for_events(1).unwrap();

    let clip = &ds.split(Split::Test)[0].clip;
    let frames = clip.spec.n_frames();
    let x_audio = noise_latents(frames, 20, 3);
    let x_joint = Tensor::concat_cols(&[&x_audio, &Tensor::zeros(vec![frames, 1])]);
    for t in [0.0, 0.33, 0.9] {
        let (vb, _) = backbone.eval(t, &clip.condition, &x_audio).unwrap();
        let (ve, _) = extended.eval(t, &clip.condition, &x_joint).unwrap();
        let vb = vb.unwrap();
        let parts = ve.unwrap().split_cols(&[20, 1]);
        assert_eq!(parts[0], vb, "audio velocity differs at t={t}");
    }
    pass(
        "finetune preservation",
        "extended audio velocity bit-equal to the backbone at zero event input".into(),
    );
}

/// Directional ordering: the finetuned joint model's AP and clip accuracy
/// are >= the scratch joint model's (3-seed median) on the material task,
/// and `report` renders the four-row table with the paper-style columns.
#[test]
fn criterion_directional_ordering_and_report() {
    let _guard = heavy_lock();
    let mut scratch_ap = Vec::new();
    let mut scratch_acc = Vec::new();
    let mut ft_ap = Vec::new();
    let mut ft_acc = Vec::new();

    for seed in [1u64, 2, 3] {
        let ds = build_dataset(&GenConfig {
            n_train: 68, // four clips per class
            n_val: 17,
            n_test: 17 * 3,
            duration_s: 4.0,
            test_duration_s: 2.0,
            ..GenConfig::material(68, 100 + seed)
        })
        .unwrap();
        let small = TrainConfig {
            total_steps: 500,
            warmup_steps: 25,
            decay_start: 250,
            batch_size: 4,
            d_model: 32,
            n_layers: 2,
            seed,
            ..TrainConfig::desk_default(Variant::Joint)
        };

        let (scratch_model, _) =
            train_from_scratch(&ds, &small, &mut TrainLog::in_memory()).unwrap();
        let (_, ft_model, _) = pretrain_then_finetune(
            &ds,
            &small,
            &small,
            &mut TrainLog::in_memory(),
            &mut TrainLog::in_memory(),
        )
        .unwrap();

        for (model, aps, accs) in [
            (&scratch_model, &mut scratch_ap, &mut scratch_acc),
            (&ft_model, &mut ft_ap, &mut ft_acc),
        ] {
            let meta = CkptMeta {
                model_config: model.config,
                train_config: small.clone(),
                step: small.total_steps,
                task: ds.manifest.task,
                train_duration_s: ds.manifest.train_duration_s,
                latent_fps: ds.manifest.latent_fps,
                run_hash: None,
            };
            let preds = sample_split(
                model,
                &meta,
                &ds,
                Split::Test,
                25,
                seed,
                DecodeOptions::default(),
            )
            .unwrap();
            let eval_in = predictions_to_eval(&preds, 0.5);
            let report = evaluate(
                &ds,
                Split::Test,
                &eval_in,
                ("Joint Heads", "Scratch"),
                EvalOptions::default(),
            )
            .unwrap();
            aps.push(report.ap_pct);
            accs.push(report.clip_acc_pct);
        }
    }

    let median = |xs: &mut Vec<f64>| {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    };
    let (s_ap, f_ap) = (median(&mut scratch_ap), median(&mut ft_ap));
    let (s_acc, f_acc) = (median(&mut scratch_acc), median(&mut ft_acc));
    assert!(
        f_ap >= s_ap,
        "finetuned AP median {f_ap:.1} below scratch {s_ap:.1} (per-seed: ft {ft_ap:?} scratch {scratch_ap:?})"
    );
    assert!(
        f_acc >= s_acc,
        "finetuned clip acc median {f_acc:.1} below scratch {s_acc:.1} (per-seed: ft {ft_acc:?} scratch {scratch_acc:?})"
    );
    pass(
        "directional ordering",
        format!(
            "finetune AP {f_ap:.1} >= scratch {s_ap:.1}; clip acc {f_acc:.1} >= {s_acc:.1} (3-seed medians)"
        ),
    );

    // Four-row comparison table through the report command.
    let dir = tempfile::tempdir().unwrap();
    let mk = |model: &str, training: &str, mcd: Option<f64>| foleyflow_core::metrics::MetricsReport {
        model: model.into(),
        training: training.into(),
        count_match_pct: 50.0,
        onset_acc_pct: 70.0,
        ap_pct: 90.0,
        mcd,
        clip_acc_pct: 50.0,
        confusion: vec![vec![1]],
        tolerance_s: 0.1,
        per_clip: vec![],
        run_hash: None,
    };
    let rows = [
        ("event_only.json", mk("Event Head Only", "Scratch", None)),
        ("parallel.json", mk("Parallel Heads", "Scratch", Some(8.31))),
        ("joint.json", mk("Joint Heads", "Scratch", Some(8.27))),
        (
            "finetune.json",
            mk("Joint Heads (finetune)", "Finetune", Some(8.22)),
        ),
    ];
    let mut args = vec!["report".to_string()];
    for (name, report) in &rows {
        let path = dir.path().join(name);
        std::fs::write(&path, serde_json::to_string(report).unwrap()).unwrap();
        args.push(path.display().to_string());
    }
    let out = Command::new(binary()).args(&args).output().unwrap();
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "Count match(%)",
        "Acc(%)",
        "AP(%)",
        "MCD",
        "Event Head Only",
        "Parallel Heads",
        "Joint Heads",
        "Joint Heads (finetune)",
        "no audio",
    ] {
        assert!(table.contains(needle), "missing `{needle}` in:\n{table}");
    }
    let out2 = Command::new(binary()).args(&args).output().unwrap();
    assert_eq!(out.stdout, out2.stdout, "report output must be byte-stable");
    pass(
        "report table",
        "four paper-style rows, byte-stable output".into(),
    );
}

/// Determinism: two full synth-data + train + sample + evaluate pipelines
/// through the binary produce hash-identical reports.
#[test]
fn criterion_pipeline_determinism() {
    let _guard = heavy_lock();
    let root = tempfile::tempdir().unwrap();
    let mut reports: Vec<Vec<u8>> = Vec::new();
    for run in ["a", "b"] {
        let dir = root.path().join(run);
        std::fs::create_dir_all(&dir).unwrap();
        let sh = |args: &[&str]| {
            let out = Command::new(binary())
                .current_dir(&dir)
                .args(args)
                .output()
                .unwrap();
            assert!(
                out.status.success(),
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        };
        // Tiny but complete pipeline; identical relative paths in both runs.
        sh(&[
            "synth-data", "--task", "onset", "--clips", "8", "--test-clips", "3",
            "--duration", "2", "--seed", "5", "--out", "data",
        ]);
        std::fs::write(
            dir.join("train.toml"),
            TrainConfig {
                total_steps: 30,
                warmup_steps: 3,
                decay_start: 15,
                batch_size: 2,
                d_model: 16,
                n_layers: 1,
                seed: 5,
                ..TrainConfig::desk_default(Variant::Joint)
            }
            .to_toml(),
        )
        .unwrap();
        sh(&["train", "--data", "data", "--config", "train.toml", "--out", "run"]);
        sh(&[
            "sample", "--checkpoint", "run/checkpoint.ckpt", "--data", "data",
            "--steps", "8", "--seed", "5", "--out", "run/sample",
        ]);
        sh(&[
            "evaluate", "--data", "data", "--pred", "run/sample", "--out", "run/report.json",
        ]);
        reports.push(std::fs::read(dir.join("run/report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1], "reports differ between identical runs");
    let digest = foleyflow_core::seeding::derive_seed(0, std::str::from_utf8(&reports[0]).unwrap(), &[]);
    pass(
        "pipeline determinism",
        format!(
            "two end-to-end runs byte-identical (report digest {})",
            hex_prefix(&digest)
        ),
    );
}

fn hex_prefix(bytes: &[u8; 32]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}
