//! Sampling and evaluation orchestration over dataset splits.
//!
//! `sample_split` runs the trained model over every clip of a split: short
//! clips are looped up to the training duration before inference and only
//! the first original-duration window of predictions is kept. `evaluate`
//! turns predictions plus references into a `MetricsReport`.

use crate::dataset::{loop_to_duration, Dataset, DatasetClip, DatasetError, Split};
use crate::events::{clip_vote, decode_probs, peak_pick, CodecError, Onset, OnsetRow};
use crate::flow::{euler_sample, noise_latents, FlowError};
use crate::metrics::{
    average_precision, classification_report, count_match, match_onsets, mcd, onset_accuracy,
    AccDenominator, ClipCounts, ClipReport, MetricsError, MetricsReport, ScoredOnset,
    SpectralDecoder,
};
use crate::model::{ModelError, Variant, VelocityField};
use crate::par;
use crate::seeding::subseed;
use crate::trainer::CkptMeta;
use foleyflow_autograd::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("dataset error: {0}")]
    Dataset(#[from] DatasetError),
    #[error("flow error: {0}")]
    Flow(#[from] FlowError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("codec error: {0}")]
    Codec(#[from] CodecError),
    #[error("metrics error: {0}")]
    Metrics(#[from] MetricsError),
    #[error("checkpoint was trained on {expected} latent channels but the dataset provides {got}")]
    LatentDimMismatch { expected: usize, got: usize },
}

/// Post-processing knobs for turning frame probabilities into onsets.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub threshold: f64,
    pub min_gap_frames: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            threshold: crate::events::DEFAULT_THRESHOLD,
            min_gap_frames: crate::events::DEFAULT_MIN_GAP_FRAMES,
        }
    }
}

/// Predictions for one clip, truncated to the clip's original window.
#[derive(Debug, Clone)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub onsets: Vec<Onset>,
    pub frame_probs: Tensor<f64>,
    /// Generated audio latents; absent for the event-only variant.
    pub gen_audio: Option<Tensor<f64>>,
}

impl ClipPrediction {
    pub fn onset_rows(&self) -> Vec<OnsetRow> {
        self.onsets
            .iter()
            .map(|o| OnsetRow {
                clip_id: self.clip_id.clone(),
                time_s: o.time_s,
                class_id: o.class_id,
                confidence: o.confidence,
            })
            .collect()
    }
}

fn predict_clip(
    model: &VelocityField,
    meta: &CkptMeta,
    dsclip: &DatasetClip,
    n_steps: usize,
    seed: u64,
    decode: DecodeOptions,
    clip_index: usize,
) -> Result<ClipPrediction, PipelineError> {
    let cfg = &model.config;
    let original_frames = dsclip.clip.spec.n_frames();

    // Loop short clips up to the training duration before inference.
    let looped;
    let clip = if dsclip.clip.spec.duration_s < meta.train_duration_s {
        looped = loop_to_duration(&dsclip.clip, meta.train_duration_s, false)?;
        &looped
    } else {
        &dsclip.clip
    };
    if cfg.d_audio != clip.audio_latents.cols() {
        return Err(PipelineError::LatentDimMismatch {
            expected: cfg.d_audio,
            got: clip.audio_latents.cols(),
        });
    }
    let t_frames = clip.spec.n_frames();
    let clip_seed = subseed(seed, "sample-clip", &[clip_index as u64]);

    let (gen_audio_full, logits_full) = match cfg.variant {
        Variant::Joint => {
            let x_hat = euler_sample(model, &clip.condition, t_frames, n_steps, clip_seed)?;
            let parts = x_hat.split_cols(&[cfg.d_audio, cfg.n_classes]);
            (Some(parts[0].clone()), parts[1].clone())
        }
        Variant::Parallel => {
            let x_hat = euler_sample(model, &clip.condition, t_frames, n_steps, clip_seed)?;
            // Event logits read out at the end of the trajectory.
            let (_, logits) = model.eval(1.0, &clip.condition, &x_hat)?;
            (Some(x_hat), logits.expect("parallel has an event head"))
        }
        Variant::EventOnly => {
            // No trajectory; average the t = 0 readout over several noise
            // draws to approximate the expected logits.
            let draws = 8usize;
            let mut mean: Option<Tensor<f64>> = None;
            for d in 0..draws {
                let x0 = noise_latents(
                    t_frames,
                    cfg.latent_dim(),
                    subseed(clip_seed, "event-readout", &[d as u64]),
                );
                let (_, logits) = model.eval(0.0, &clip.condition, &x0)?;
                let logits = logits.expect("event head exists");
                mean = Some(match mean {
                    Some(acc) => acc.add(&logits),
                    None => logits,
                });
            }
            (None, mean.expect("at least one draw").scale(1.0 / draws as f64))
        }
    };

    // Keep only the first original-duration window.
    let logits = logits_full.take_rows(original_frames);
    let gen_audio = gen_audio_full.map(|g| g.take_rows(original_frames));
    let frame_probs = decode_probs(&logits)?;
    let onsets = peak_pick(
        &frame_probs,
        decode.threshold,
        decode.min_gap_frames,
        dsclip.clip.spec.latent_fps,
    )?;
    Ok(ClipPrediction {
        clip_id: dsclip.id.clone(),
        onsets,
        frame_probs,
        gen_audio,
    })
}

/// Run the model over every clip of a split, in parallel per clip,
/// deterministically in (weights, dataset, seed, step count).
pub fn sample_split(
    model: &VelocityField,
    meta: &CkptMeta,
    dataset: &Dataset,
    split: Split,
    n_steps: usize,
    seed: u64,
    decode: DecodeOptions,
) -> Result<Vec<ClipPrediction>, PipelineError> {
    let clips = dataset.split(split);
    let indexed: Vec<(usize, &DatasetClip)> = clips.into_iter().enumerate().collect();
    par::par_try_map(&indexed, |(idx, dsclip)| {
        predict_clip(model, meta, dsclip, n_steps, seed, decode, *idx)
    })
}

/// Per-clip prediction inputs for evaluation; `from_predictions` covers the
/// in-process path and the CLI rebuilds these from exported files.
#[derive(Debug, Clone, Default)]
pub struct EvalPrediction {
    pub onsets: Vec<(f64, usize, f64)>, // (time_s, class_id, confidence)
    pub pred_class: Option<usize>,
    pub gen_audio: Option<Tensor<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub tolerance_s: f64,
    pub acc_denominator: AccDenominator,
    /// Activity gate for clip voting when a prediction has frame probs.
    pub vote_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tolerance_s: crate::metrics::DEFAULT_TOLERANCE_S,
            acc_denominator: AccDenominator::default(),
            vote_threshold: 0.5,
        }
    }
}

pub fn predictions_to_eval(preds: &[ClipPrediction], vote_threshold: f64) -> BTreeMap<String, EvalPrediction> {
    preds
        .iter()
        .map(|p| {
            (
                p.clip_id.clone(),
                EvalPrediction {
                    onsets: p
                        .onsets
                        .iter()
                        .map(|o| (o.time_s, o.class_id, o.confidence))
                        .collect(),
                    pred_class: Some(clip_vote(&p.frame_probs, vote_threshold)),
                    gen_audio: p.gen_audio.clone(),
                },
            )
        })
        .collect()
}

/// Group exported onset rows by clip, for evaluating from files. Clips with
/// no rows must still appear (empty) via the reference id list.
pub fn rows_to_eval(rows: &[OnsetRow], clip_ids: &[String]) -> BTreeMap<String, EvalPrediction> {
    let mut map: BTreeMap<String, EvalPrediction> = clip_ids
        .iter()
        .map(|id| (id.clone(), EvalPrediction::default()))
        .collect();
    for row in rows {
        map.entry(row.clip_id.clone())
            .or_default()
            .onsets
            .push((row.time_s, row.class_id, row.confidence));
    }
    for pred in map.values_mut() {
        if pred.pred_class.is_none() && !pred.onsets.is_empty() {
            // Modal onset class, ties toward the lower id.
            let max_class = pred.onsets.iter().map(|o| o.1).max().unwrap_or(0);
            let mut counts = vec![0usize; max_class + 1];
            for &(_, c, _) in &pred.onsets {
                counts[c] += 1;
            }
            let mut best = 0;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = c;
                }
            }
            pred.pred_class = Some(best);
        }
    }
    map
}

/// Score predictions against the reference split. Prediction clip ids must
/// match the split's clip ids exactly.
pub fn evaluate(
    dataset: &Dataset,
    split: Split,
    predictions: &BTreeMap<String, EvalPrediction>,
    model_label: (&str, &str),
    opts: EvalOptions,
) -> Result<MetricsReport, PipelineError> {
    let refs = dataset.split(split);
    if refs.is_empty() {
        return Err(PipelineError::Metrics(MetricsError::EmptyTestSet));
    }
    let ref_ids: BTreeMap<&str, &DatasetClip> =
        refs.iter().map(|c| (c.id.as_str(), *c)).collect();
    let missing: Vec<String> = ref_ids
        .keys()
        .filter(|id| !predictions.contains_key(**id))
        .map(|s| s.to_string())
        .collect();
    let unknown: Vec<String> = predictions
        .keys()
        .filter(|id| !ref_ids.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(PipelineError::Metrics(MetricsError::ClipIdMismatch {
            missing,
            unknown,
        }));
    }

    let n_classes = dataset.manifest.n_classes;
    let decoder = SpectralDecoder::default_for(dataset.manifest.dims.d_audio);

    let mut per_clip = Vec::with_capacity(refs.len());
    let mut counts = Vec::with_capacity(refs.len());
    let mut scored: Vec<ScoredOnset> = Vec::new();
    let mut ref_map: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut ref_labels = Vec::new();
    let mut pred_labels = Vec::new();
    let mut mcd_values = Vec::new();

    for dsclip in &refs {
        let pred = &predictions[&dsclip.id];
        let ref_times: Vec<f64> = dsclip
            .clip
            .annotation
            .events
            .iter()
            .map(|h| h.time_s)
            .collect();
        let pred_times: Vec<f64> = pred.onsets.iter().map(|&(t, _, _)| t).collect();
        let matched = match_onsets(&ref_times, &pred_times, opts.tolerance_s)?;
        counts.push(ClipCounts {
            n_ref: ref_times.len(),
            n_pred: pred_times.len(),
            n_matched: matched.n_matched(),
        });
        ref_map.insert(dsclip.id.clone(), ref_times.clone());
        for &(t, _, conf) in &pred.onsets {
            scored.push(ScoredOnset {
                clip_id: dsclip.id.clone(),
                time_s: t,
                confidence: conf,
            });
        }

        let ref_class = dsclip
            .clip
            .annotation
            .events
            .first()
            .map_or(0, |h| h.class_id);
        let pred_class = pred.pred_class.unwrap_or(0);
        ref_labels.push(ref_class);
        pred_labels.push(pred_class);

        let clip_mcd = match &pred.gen_audio {
            Some(gen) => {
                let gen_ceps = decoder.cepstra(gen);
                let ref_ceps = decoder.cepstra(&dsclip.clip.audio_latents.take_rows(gen.rows()));
                Some(mcd(&gen_ceps, &ref_ceps)?)
            }
            None => None,
        };
        if let Some(v) = clip_mcd {
            mcd_values.push(v);
        }
        per_clip.push(ClipReport {
            clip_id: dsclip.id.clone(),
            n_ref: ref_times.len(),
            n_pred: pred_times.len(),
            n_matched: matched.n_matched(),
            ref_class,
            pred_class,
            mcd: clip_mcd,
        });
    }

    let ap = if ref_map.values().all(|v| v.is_empty()) {
        0.0
    } else {
        average_precision(&scored, &ref_map, opts.tolerance_s)?
    };
    let (clip_acc, confusion) = classification_report(&ref_labels, &pred_labels, n_classes)?;
    let mcd_mean = if mcd_values.is_empty() {
        None
    } else {
        Some(mcd_values.iter().sum::<f64>() / mcd_values.len() as f64)
    };

    Ok(MetricsReport {
        model: model_label.0.to_string(),
        training: model_label.1.to_string(),
        count_match_pct: count_match(&counts)?,
        onset_acc_pct: onset_accuracy(&counts, opts.acc_denominator)?,
        ap_pct: ap,
        mcd: mcd_mean,
        clip_acc_pct: clip_acc,
        confusion,
        tolerance_s: opts.tolerance_s,
        per_clip,
        run_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, GenConfig};
    use crate::events::OnsetRow;

    fn tiny_dataset() -> Dataset {
        let cfg = GenConfig {
            n_train: 2,
            n_val: 1,
            n_test: 3,
            duration_s: 2.0,
            test_duration_s: 2.0,
            ..GenConfig::onset(2, 3, 77)
        };
        build_dataset(&cfg).unwrap()
    }

    #[test]
    fn perfect_rows_score_perfectly() {
        let ds = tiny_dataset();
        let rows: Vec<OnsetRow> = ds
            .split(Split::Test)
            .iter()
            .flat_map(|c| {
                c.clip.annotation.events.iter().map(|h| OnsetRow {
                    clip_id: c.id.clone(),
                    time_s: h.time_s,
                    class_id: h.class_id,
                    confidence: 0.9,
                })
            })
            .collect();
        let ids: Vec<String> = ds.split(Split::Test).iter().map(|c| c.id.clone()).collect();
        let preds = rows_to_eval(&rows, &ids);
        let report = evaluate(
            &ds,
            Split::Test,
            &preds,
            ("Joint Heads", "Scratch"),
            EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(report.count_match_pct, 100.0);
        assert_eq!(report.onset_acc_pct, 100.0);
        assert_eq!(report.ap_pct, 100.0);
        assert_eq!(report.clip_acc_pct, 100.0);
        assert!(report.mcd.is_none());
    }

    #[test]
    fn clip_id_mismatch_lists_the_ids() {
        let ds = tiny_dataset();
        let mut preds = BTreeMap::new();
        preds.insert("bogus_clip".to_string(), EvalPrediction::default());
        match evaluate(
            &ds,
            Split::Test,
            &preds,
            ("Joint Heads", "Scratch"),
            EvalOptions::default(),
        ) {
            Err(PipelineError::Metrics(MetricsError::ClipIdMismatch { missing, unknown })) => {
                assert_eq!(missing.len(), 3);
                assert_eq!(unknown, vec!["bogus_clip".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_predictions_give_zero_metrics() {
        let ds = tiny_dataset();
        let ids: Vec<String> = ds.split(Split::Test).iter().map(|c| c.id.clone()).collect();
        let preds = rows_to_eval(&[], &ids);
        let report = evaluate(
            &ds,
            Split::Test,
            &preds,
            ("Joint Heads", "Scratch"),
            EvalOptions::default(),
        )
        .unwrap();
        assert_eq!(report.onset_acc_pct, 0.0);
        assert_eq!(report.ap_pct, 0.0);
        // every test clip has at least one hit, so no count can match
        assert_eq!(report.count_match_pct, 0.0);
    }
}
