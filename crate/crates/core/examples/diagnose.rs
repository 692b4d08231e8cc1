//! Inspect what a trained joint model emits at sampling time: channel
//! scales, logit ranges, gradient norms, peak behavior vs ground truth.

use foleyflow_core::dataset::{build_dataset, GenConfig, Split};
use foleyflow_core::events::{decode_probs, peak_pick};
use foleyflow_core::flow::euler_sample;
use foleyflow_core::metrics::SpectralDecoder;
use foleyflow_core::model::{Variant, VelocityField};
use foleyflow_core::seeding::subseed;
use foleyflow_core::trainer::{prepare_clips, train_step, AdamW, TrainConfig};

fn std_of(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).and_then(|s| Variant::parse(s)).unwrap_or(Variant::Joint);
    let n_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(600);

    let ds = build_dataset(&GenConfig::onset(n_train, 8, 1)).unwrap();
    let cfg = TrainConfig {
        total_steps: steps,
        warmup_steps: (steps / 20).max(1),
        decay_start: steps / 2,
        ..TrainConfig::desk_default(variant)
    };
    let dims = ds.manifest.dims;
    let mcfg = cfg.model_config(dims.d_audio, 1, dims.d_sem, dims.d_sync);
    let mut model = VelocityField::new(mcfg, subseed(cfg.seed, "model-seed", &[])).unwrap();
    let mut opt = AdamW::new(model.params(), &cfg);
    let clips = prepare_clips(&ds.split(Split::Train), cfg.variant, cfg.epsilon).unwrap();

    for step in 0..steps {
        let losses = train_step(&mut model, &mut opt, &clips, &cfg, step).unwrap();
        if step % (steps / 10).max(1) == 0 {
            println!("step {step:5}  total {:.4}", losses.total);
        }
    }

    // Flow-head weight scale tells us how big the outputs can get.
    for (name, p) in model.param_names().iter().zip(model.params()) {
        if name.starts_with("flow_head") {
            let mx = p.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            println!("{name}: max |w| = {mx:.4}");
        }
    }

    let test = ds.split(Split::Test);
    let clip = &test[0];
    let t_frames = clip.clip.spec.n_frames();
    let (gen_audio, logits) = match variant {
        Variant::Joint => {
            let x_hat = euler_sample(&model, &clip.clip.condition, t_frames, 25, 7).unwrap();
            let parts = x_hat.split_cols(&[20, 1]);
            (parts[0].clone(), parts[1].clone())
        }
        Variant::Parallel => {
            let x_hat = euler_sample(&model, &clip.clip.condition, t_frames, 25, 7).unwrap();
            let (_, lg) = model.eval(1.0, &clip.clip.condition, &x_hat).unwrap();
            (x_hat, lg.unwrap())
        }
        Variant::EventOnly => {
            let x0 = foleyflow_core::flow::noise_latents(t_frames, 20, 7);
            let (_, lg) = model.eval(0.0, &clip.clip.condition, &x0).unwrap();
            (x0, lg.unwrap())
        }
    };
    let (gen_audio, logits) = (&gen_audio, &logits);

    println!(
        "audio std: gen {:.3} vs ref {:.3}",
        std_of(gen_audio.data()),
        std_of(clip.clip.audio_latents.data())
    );
    let lo = logits.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("event logits: min {lo:.2} max {hi:.2}");

    let probs = decode_probs(logits).unwrap();
    let onsets = peak_pick(&probs, 0.5, 2, 25.0).unwrap();
    let truth: Vec<f64> = clip.clip.annotation.events.iter().map(|h| h.time_s).collect();
    println!(
        "true onsets: {truth:?}\npred onsets: {:?}",
        onsets.iter().map(|o| (o.time_s, o.confidence)).collect::<Vec<_>>()
    );
    // Probability trace around each true onset.
    for &t in &truth {
        let f = (t * 25.0).round() as usize;
        let lo_f = f.saturating_sub(3);
        let window: Vec<f64> = (lo_f..(f + 4).min(t_frames))
            .map(|i| (probs.at(i, 0) * 100.0).round() / 100.0)
            .collect();
        println!("probs around {t:.2}s (frame {f}): {window:?}");
    }

    let dec = SpectralDecoder::default_for(20);
    let m = foleyflow_core::metrics::mcd(
        &dec.cepstra(gen_audio),
        &dec.cepstra(&clip.clip.audio_latents),
    )
    .unwrap();
    println!("clip MCD: {m:.2}");

    // Irreducible floor: same hits, different generator seed.
    let mut spec2 = clip.clip.spec.clone();
    spec2.seed ^= 0xDEAD;
    let twin = foleyflow_core::dataset::generate_clip(&spec2, &ds.manifest.dims).unwrap();
    let floor = foleyflow_core::metrics::mcd(
        &dec.cepstra(&twin.audio_latents),
        &dec.cepstra(&clip.clip.audio_latents),
    )
    .unwrap();
    println!("MCD floor (seed twin): {floor:.2}");
    let zero = foleyflow_core::metrics::mcd(
        &dec.cepstra(&foleyflow_autograd::Tensor::zeros(vec![t_frames, 20])),
        &dec.cepstra(&clip.clip.audio_latents),
    )
    .unwrap();
    println!("MCD of silence vs ref: {zero:.2}");
}
