//! Full single-variant benchmark at default configs: build the onset
//! dataset, train, sample the test split, evaluate, print the report row.

use foleyflow_core::dataset::{build_dataset, GenConfig, Split};
use foleyflow_core::metrics::render_comparison;
use foleyflow_core::model::Variant;
use foleyflow_core::pipeline::{
    evaluate, predictions_to_eval, sample_split, DecodeOptions, EvalOptions,
};
use foleyflow_core::trainer::{train_from_scratch, CkptMeta, TrainConfig, TrainLog};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args
        .get(1)
        .and_then(|s| Variant::parse(s))
        .unwrap_or(Variant::Joint);
    let n_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let n_test: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100);
    let steps: Option<usize> = args.get(4).and_then(|s| s.parse().ok());
    let euler_steps: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(25);

    let t0 = Instant::now();
    let ds = build_dataset(&GenConfig::onset(n_train, n_test, 1)).unwrap();
    println!("dataset: {} clips in {:.1}s", ds.clips.len(), t0.elapsed().as_secs_f64());

    let mut cfg = TrainConfig::desk_default(variant);
    if let Some(s) = steps {
        cfg.total_steps = s;
        cfg.decay_start = s / 2;
        cfg.warmup_steps = (s / 20).max(1);
    }
    let t0 = Instant::now();
    let mut log = TrainLog::in_memory();
    let (model, _) = train_from_scratch(&ds, &cfg, &mut log).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let first = &log.rows[..20.min(log.rows.len())];
    let last = &log.rows[log.rows.len().saturating_sub(20)..];
    println!(
        "train: {:.1} min; loss {:.4} -> {:.4} (flow {:.4} bce {:.4})",
        train_secs / 60.0,
        first.iter().map(|r| r.total).sum::<f64>() / first.len() as f64,
        last.iter().map(|r| r.total).sum::<f64>() / last.len() as f64,
        last.iter().map(|r| r.flow).sum::<f64>() / last.len() as f64,
        last.iter().map(|r| r.bce).sum::<f64>() / last.len() as f64,
    );

    let meta = CkptMeta {
        model_config: model.config,
        train_config: cfg.clone(),
        step: cfg.total_steps,
        task: ds.manifest.task,
        train_duration_s: ds.manifest.train_duration_s,
        latent_fps: ds.manifest.latent_fps,
        run_hash: None,
    };
    let t0 = Instant::now();
    let preds = sample_split(
        &model,
        &meta,
        &ds,
        Split::Test,
        euler_steps,
        7,
        DecodeOptions::default(),
    )
    .unwrap();
    println!("sample: {:.1}s for {} clips", t0.elapsed().as_secs_f64(), preds.len());

    let eval_inputs = predictions_to_eval(&preds, 0.5);
    let report = evaluate(
        &ds,
        Split::Test,
        &eval_inputs,
        (&format!("{variant}"), "Scratch"),
        EvalOptions::default(),
    )
    .unwrap();

    // Failure breakdown: how do predictions deviate per clip?
    let mut extra = 0usize;
    let mut missing = 0usize;
    let mut offsets = 0usize;
    let mut worst: Vec<(i64, &str, usize, usize, usize)> = report
        .per_clip
        .iter()
        .map(|c| {
            extra += c.n_pred.saturating_sub(c.n_matched);
            missing += c.n_ref.saturating_sub(c.n_matched);
            offsets += usize::from(c.n_ref == c.n_pred && c.n_matched < c.n_ref);
            (
                (c.n_pred as i64 - c.n_ref as i64).abs() + (c.n_ref - c.n_matched) as i64,
                c.clip_id.as_str(),
                c.n_ref,
                c.n_pred,
                c.n_matched,
            )
        })
        .collect();
    worst.sort_by(|a, b| b.0.cmp(&a.0));
    println!(
        "totals: {} spurious preds, {} missed refs, {} equal-count-but-offset clips",
        extra, missing, offsets
    );
    for (badness, id, n_ref, n_pred, n_matched) in worst.iter().take(8) {
        println!("  {id}: ref {n_ref} pred {n_pred} matched {n_matched} (badness {badness})");
    }
    println!("{}", render_comparison(&[report]));
}
