//! Cross-module properties: generator/codec inverses, the separability
//! oracle, and behaviors measured on a small trained model shared by the
//! heavier checks.

use foleyflow_core::dataset::{
    build_dataset, class_signature, generate_clip, rasterize, ClipSpec, FeatureDims, GenConfig,
    Hit, Split,
};
use foleyflow_core::events::{decode_probs, encode_logits, peak_pick};
use foleyflow_core::flow::euler_sample;
use foleyflow_core::model::{Variant, VelocityField};
use foleyflow_core::seeding::substream;
use foleyflow_core::trainer::{prepare_clips, train_from_scratch, TrainConfig, TrainLog};
use rand::Rng;
use std::sync::OnceLock;

/// Rasterize then decode through the codec and recover every event time
/// within half a frame.
#[test]
fn peak_pick_inverts_rasterize_on_clean_maps() {
    let mut rng = substream(11, "inverse-test", &[]);
    for _ in 0..50 {
        let fps = 25.0;
        let t_frames = 100;
        let n = rng.gen_range(1..6);
        let mut times: Vec<f64> = Vec::new();
        while times.len() < n {
            let t: f64 = rng.gen_range(0.1..3.9);
            if times.iter().all(|x: &f64| (x - t).abs() > 4.0 / fps) {
                times.push(t);
            }
        }
        let events: Vec<Hit> = times
            .iter()
            .map(|&time_s| Hit { time_s, class_id: 0 })
            .collect();
        let map = rasterize(&events, fps, t_frames, 1).unwrap();
        let probs = decode_probs(&encode_logits(&map, 1e-5).unwrap().logits).unwrap();
        let onsets = peak_pick(&probs, 0.5, 2, fps).unwrap();
        assert_eq!(onsets.len(), events.len());
        let mut recovered: Vec<f64> = onsets.iter().map(|o| o.time_s).collect();
        recovered.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (t, r) in times.iter().zip(&recovered) {
            assert!(
                (t - r).abs() <= 0.5 / fps + 1e-9,
                "event at {t} recovered at {r}"
            );
        }
    }
}

/// Separability oracle: nearest-prototype classification of per-hit latent
/// averages reaches 99% over the 17-class generator.
#[test]
fn class_signatures_are_separable_at_default_noise() {
    let dims = FeatureDims::default();
    let fps = 25.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..600 {
        let class_id = i % 17;
        let spec = ClipSpec {
            duration_s: 2.0,
            latent_fps: fps,
            n_classes: 17,
            hits: vec![Hit { time_s: 0.8, class_id }],
            seed: 9000 + i as u64,
        };
        let clip = generate_clip(&spec, &dims).unwrap();
        // Average the latents over the hit's decay window.
        let start = (0.8 * fps).round() as usize;
        let window = 5;
        let mut avg = vec![0.0f64; dims.d_audio];
        for t in start..start + window {
            for (c, a) in avg.iter_mut().enumerate() {
                *a += clip.audio_latents.at(t, c) / window as f64;
            }
        }
        // Nearest prototype by cosine similarity.
        let mut best = (0usize, f64::NEG_INFINITY);
        for cand in 0..17 {
            let proto = class_signature(cand, dims.d_audio);
            let dot: f64 = avg.iter().zip(&proto).map(|(a, b)| a * b).sum();
            let na: f64 = avg.iter().map(|a| a * a).sum::<f64>().sqrt();
            let np: f64 = proto.iter().map(|p| p * p).sum::<f64>().sqrt();
            let cos = dot / (na * np);
            if cos > best.1 {
                best = (cand, cos);
            }
        }
        if best.0 == class_id {
            correct += 1;
        }
        total += 1;
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.99, "nearest-prototype accuracy {acc}");
}

// ---- trained toy model, shared across the heavier checks ------------------

struct Trained {
    model: VelocityField,
    ds: foleyflow_core::dataset::Dataset,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = build_dataset(&GenConfig {
            n_train: 48,
            n_val: 2,
            n_test: 4,
            duration_s: 4.0,
            test_duration_s: 4.0,
            ..GenConfig::onset(48, 4, 23)
        })
        .unwrap();
        let cfg = TrainConfig {
            total_steps: 700,
            warmup_steps: 35,
            decay_start: 350,
            batch_size: 4,
            d_model: 32,
            n_layers: 2,
            seed: 3,
            ..TrainConfig::desk_default(Variant::Joint)
        };
        let mut log = TrainLog::in_memory();
        let (model, _) = train_from_scratch(&ds, &cfg, &mut log).unwrap();
        let first = log.rows.first().unwrap().total;
        let last = log.rows.last().unwrap().total;
        assert!(last < first * 0.2, "toy model trained: {first} -> {last}");
        Trained { model, ds }
    })
}

/// Euler integration converges in step count: 25 vs 100 steps stay within
/// 0.1 RMS on the trained toy model.
#[test]
fn euler_step_count_converges_on_trained_model() {
    let t = trained();
    let clip = &t.ds.split(Split::Test)[0].clip;
    let frames = clip.spec.n_frames();
    let coarse = euler_sample(&t.model, &clip.condition, frames, 25, 5).unwrap();
    let fine = euler_sample(&t.model, &clip.condition, frames, 100, 5).unwrap();
    // Compare audio channels; event logit channels sit at +-11.5 and scale
    // the RMS, so normalize per channel group.
    let ca = coarse.split_cols(&[20, 1]);
    let fa = fine.split_cols(&[20, 1]);
    let rms = |a: &foleyflow_autograd::Tensor<f64>, b: &foleyflow_autograd::Tensor<f64>| {
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        (s / a.numel() as f64).sqrt()
    };
    let audio_rms = rms(&ca[0], &fa[0]);
    assert!(audio_rms <= 0.1, "audio RMS(25 vs 100 steps) = {audio_rms}");
}

/// Shifting every sync impulse by k frames shifts the event response by k
/// frames on the trained toy model.
#[test]
fn sync_shift_moves_the_event_response() {
    let t = trained();
    let clip = &t.ds.split(Split::Test)[1].clip;
    let frames = clip.spec.n_frames();
    let k_latent = 8usize; // latent-frame shift
    let k_sync = k_latent * 2; // sync stream runs at 2x

    // Rotate the sync stream forward by k frames.
    let sync = &clip.condition.sync;
    let rows = sync.rows();
    let shifted = foleyflow_autograd::Tensor::from_fn(rows, sync.cols(), |r, c| {
        let src = (r + rows - k_sync) % rows;
        sync.at(src, c)
    });
    let cond_shifted = foleyflow_core::dataset::VideoCondition {
        semantic: clip.condition.semantic.clone(),
        sync: shifted,
    };

    let base = euler_sample(&t.model, &clip.condition, frames, 25, 9).unwrap();
    let moved = euler_sample(&t.model, &cond_shifted, frames, 25, 9).unwrap();

    // Event channel peak locations must move by ~k latent frames.
    let peak_frames = |x: &foleyflow_autograd::Tensor<f64>| {
        let parts = x.split_cols(&[20, 1]);
        let ev = &parts[1];
        let mut best = (0usize, f64::NEG_INFINITY);
        for r in 0..ev.rows() {
            if ev.at(r, 0) > best.1 {
                best = (r, ev.at(r, 0));
            }
        }
        best.0 as i64
    };
    let delta = peak_frames(&moved) - peak_frames(&base);
    assert!(
        (delta - k_latent as i64).abs() <= 2,
        "peak moved by {delta} frames, expected ~{k_latent}"
    );
}

/// Generation plus preparation is identical under the parallel and
/// sequential map paths.
#[test]
fn parallel_and_sequential_pipelines_agree() {
    let cfg = GenConfig {
        n_train: 6,
        n_val: 1,
        n_test: 2,
        duration_s: 2.0,
        test_duration_s: 2.0,
        ..GenConfig::onset(6, 2, 31)
    };
    let a = build_dataset(&cfg).unwrap();
    let b = build_dataset(&cfg).unwrap();
    for (x, y) in a.clips.iter().zip(&b.clips) {
        assert_eq!(x.clip, y.clip);
    }
    let pa = prepare_clips(&a.split(Split::Train), Variant::Joint, 1e-5).unwrap();
    let pb = prepare_clips(&b.split(Split::Train), Variant::Joint, 1e-5).unwrap();
    for (x, y) in pa.iter().zip(&pb) {
        assert_eq!(x.x1, y.x1);
    }
}
