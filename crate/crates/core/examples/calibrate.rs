//! Timing probe: seconds per training step and per sampled clip at a given
//! model size, to size the default configs against a wall-clock budget.

use foleyflow_core::dataset::{build_dataset, GenConfig, Split};
use foleyflow_core::flow::euler_sample;
use foleyflow_core::model::{Variant, VelocityField};
use foleyflow_core::seeding::subseed;
use foleyflow_core::trainer::{prepare_clips, train_step, AdamW, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let d_model: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(48);
    let n_layers: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_heads: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);

    let gen = GenConfig {
        n_train: 32,
        n_val: 2,
        n_test: 4,
        ..GenConfig::onset(32, 4, 1)
    };
    let t0 = Instant::now();
    let ds = build_dataset(&gen).unwrap();
    println!("dataset: {} clips in {:.2}s", ds.clips.len(), t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        d_model,
        n_layers,
        n_heads,
        batch_size: batch,
        ..TrainConfig::desk_default(Variant::Joint)
    };
    let dims = ds.manifest.dims;
    let mcfg = cfg.model_config(dims.d_audio, 1, dims.d_sem, dims.d_sync);
    let mut model = VelocityField::new(mcfg, subseed(cfg.seed, "model-seed", &[])).unwrap();
    println!("model: {} params", model.n_params());
    let mut opt = AdamW::new(model.params(), &cfg);
    let clips = prepare_clips(&ds.split(Split::Train), cfg.variant, cfg.epsilon).unwrap();

    // warmup
    train_step(&mut model, &mut opt, &clips, &cfg, 0).unwrap();
    let n = 8;
    let t0 = Instant::now();
    for step in 1..=n {
        train_step(&mut model, &mut opt, &clips, &cfg, step).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() / n as f64;
    println!(
        "train: {per_step:.3}s/step  -> {:.1} min for 2000 steps",
        per_step * 2000.0 / 60.0
    );

    let test = ds.split(Split::Test);
    let t0 = Instant::now();
    let _ = euler_sample(&model, &test[0].clip.condition, 200, 25, 7).unwrap();
    println!("sample: {:.3}s per clip at 25 euler steps", t0.elapsed().as_secs_f64());
}
