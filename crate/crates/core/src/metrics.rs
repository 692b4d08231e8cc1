//! Onset and classification evaluation suite.
//!
//! Count match, onset accuracy, average precision at a ±tolerance, mel
//! cepstral distortion through a fixed synthetic spectral decoder, and
//! clip-level classification with a confusion matrix.

use crate::seeding::substream;
use foleyflow_autograd::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const DEFAULT_TOLERANCE_S: f64 = 0.1;
pub const MCD_SCALE: f64 = 10.0 * std::f64::consts::SQRT_2 / std::f64::consts::LN_10;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("tolerance must be non-negative, got {0}")]
    NegativeTolerance(f64),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("no reference onsets in the entire set")]
    NoReferences,
    #[error("mel cepstra frame counts differ: {gen_frames} vs {ref_frames}")]
    FrameCountMismatch {
        gen_frames: usize,
        ref_frames: usize,
    },
    #[error("clip id mismatch: missing in predictions {missing:?}, unknown in predictions {unknown:?}")]
    ClipIdMismatch {
        missing: Vec<String>,
        unknown: Vec<String>,
    },
}

// ---- onset matching -----------------------------------------------------

/// One-to-one matching between reference and predicted onsets.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetMatchResult {
    /// (ref index, pred index) pairs in input order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_ref: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
    pub tolerance_s: f64,
}

impl OnsetMatchResult {
    pub fn n_matched(&self) -> usize {
        self.pairs.len()
    }
}

/// Maximum-cardinality matching under `|ref - pred| <= tol`; among maximum
/// matchings, minimal total absolute offset. Sorted onsets admit an optimal
/// non-crossing matching (uncrossing never increases cost or breaks
/// feasibility), so a quadratic DP over both sorted lists is exact.
pub fn match_onsets(
    ref_times: &[f64],
    pred_times: &[f64],
    tolerance_s: f64,
) -> Result<OnsetMatchResult, MetricsError> {
    if tolerance_s < 0.0 {
        return Err(MetricsError::NegativeTolerance(tolerance_s));
    }
    let mut ref_order: Vec<usize> = (0..ref_times.len()).collect();
    ref_order.sort_by(|&a, &b| ref_times[a].partial_cmp(&ref_times[b]).unwrap());
    let mut pred_order: Vec<usize> = (0..pred_times.len()).collect();
    pred_order.sort_by(|&a, &b| pred_times[a].partial_cmp(&pred_times[b]).unwrap());

    let n = ref_order.len();
    let m = pred_order.len();
    // dp over (refs consumed, preds consumed): (matches, -cost) maximized.
    #[derive(Clone, Copy, PartialEq)]
    struct Cell {
        matches: usize,
        cost: f64,
    }
    let better = |a: Cell, b: Cell| -> Cell {
        if a.matches > b.matches || (a.matches == b.matches && a.cost < b.cost) {
            a
        } else {
            b
        }
    };
    let mut dp = vec![
        Cell {
            matches: 0,
            cost: 0.0
        };
        (n + 1) * (m + 1)
    ];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        for j in 1..=m {
            let mut best = better(dp[idx(i - 1, j)], dp[idx(i, j - 1)]);
            let offset = (ref_times[ref_order[i - 1]] - pred_times[pred_order[j - 1]]).abs();
            if offset <= tolerance_s {
                let prev = dp[idx(i - 1, j - 1)];
                best = better(
                    Cell {
                        matches: prev.matches + 1,
                        cost: prev.cost + offset,
                    },
                    best,
                );
            }
            dp[idx(i, j)] = best;
        }
    }

    // Walk back to recover the pairs.
    let mut pairs = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        let cur = dp[idx(i, j)];
        let offset = (ref_times[ref_order[i - 1]] - pred_times[pred_order[j - 1]]).abs();
        if offset <= tolerance_s {
            let prev = dp[idx(i - 1, j - 1)];
            if prev.matches + 1 == cur.matches && (prev.cost + offset - cur.cost).abs() < 1e-12 {
                pairs.push((ref_order[i - 1], pred_order[j - 1]));
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if dp[idx(i - 1, j)] == cur {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();

    let matched_ref: Vec<bool> = {
        let mut v = vec![false; ref_times.len()];
        for &(r, _) in &pairs {
            v[r] = true;
        }
        v
    };
    let matched_pred: Vec<bool> = {
        let mut v = vec![false; pred_times.len()];
        for &(_, p) in &pairs {
            v[p] = true;
        }
        v
    };
    Ok(OnsetMatchResult {
        pairs,
        unmatched_ref: (0..ref_times.len()).filter(|&i| !matched_ref[i]).collect(),
        unmatched_pred: (0..pred_times.len())
            .filter(|&i| !matched_pred[i])
            .collect(),
        tolerance_s,
    })
}

// ---- aggregate onset metrics ---------------------------------------------

/// Per-clip counts feeding the aggregate onset metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipCounts {
    pub n_ref: usize,
    pub n_pred: usize,
    pub n_matched: usize,
}

/// Denominator convention for onset accuracy. The symmetric form penalizes
/// misses and false alarms alike; `RefOnly` is the comparison alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccDenominator {
    #[default]
    MaxRefPred,
    RefOnly,
}

/// Acc = matched / denominator, aggregated over all clips, x100.
pub fn onset_accuracy(
    per_clip: &[ClipCounts],
    denom: AccDenominator,
) -> Result<f64, MetricsError> {
    if per_clip.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let matched: usize = per_clip.iter().map(|c| c.n_matched).sum();
    let total: usize = per_clip
        .iter()
        .map(|c| match denom {
            AccDenominator::MaxRefPred => c.n_ref.max(c.n_pred),
            AccDenominator::RefOnly => c.n_ref,
        })
        .sum();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * matched as f64 / total as f64)
}

/// Percentage of clips whose predicted and reference onset counts are equal.
pub fn count_match(per_clip: &[ClipCounts]) -> Result<f64, MetricsError> {
    if per_clip.is_empty() {
        return Err(MetricsError::EmptyTestSet);
    }
    let hits = per_clip.iter().filter(|c| c.n_ref == c.n_pred).count();
    Ok(100.0 * hits as f64 / per_clip.len() as f64)
}

/// A scored prediction in the global AP sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredOnset {
    pub clip_id: String,
    pub time_s: f64,
    pub confidence: f64,
}

/// Global precision sweep: predictions sorted by descending confidence; a
/// prediction is a true positive when it claims the nearest not-yet-claimed
/// reference within tolerance in its own clip. AP = mean over true
/// positives of precision-at-rank, normalized by the reference count, x100.
pub fn average_precision(
    predictions: &[ScoredOnset],
    references: &BTreeMap<String, Vec<f64>>,
    tolerance_s: f64,
) -> Result<f64, MetricsError> {
    if tolerance_s < 0.0 {
        return Err(MetricsError::NegativeTolerance(tolerance_s));
    }
    let total_refs: usize = references.values().map(|v| v.len()).sum();
    if total_refs == 0 {
        return Err(MetricsError::NoReferences);
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = &predictions[a];
        let pb = &predictions[b];
        pb.confidence
            .partial_cmp(&pa.confidence)
            .unwrap()
            .then_with(|| pa.clip_id.cmp(&pb.clip_id))
            .then_with(|| pa.time_s.partial_cmp(&pb.time_s).unwrap())
    });

    let mut claimed: BTreeMap<&str, Vec<bool>> = references
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();
    let mut tp = 0usize;
    let mut ap_sum = 0.0f64;
    for (rank, &pi) in order.iter().enumerate() {
        let pred = &predictions[pi];
        let mut is_tp = false;
        if let Some(refs) = references.get(&pred.clip_id) {
            let flags = claimed.get_mut(pred.clip_id.as_str()).unwrap();
            // nearest unclaimed reference within tolerance; earlier wins ties
            let mut best: Option<(usize, f64)> = None;
            for (ri, &rt) in refs.iter().enumerate() {
                if flags[ri] {
                    continue;
                }
                let d = (rt - pred.time_s).abs();
                if d <= tolerance_s {
                    let take = match best {
                        None => true,
                        Some((_, bd)) => d < bd,
                    };
                    if take {
                        best = Some((ri, d));
                    }
                }
            }
            if let Some((ri, _)) = best {
                flags[ri] = true;
                is_tp = true;
            }
        }
        if is_tp {
            tp += 1;
            ap_sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(100.0 * ap_sum / total_refs as f64)
}

// ---- MCD ------------------------------------------------------------------

/// Fixed deterministic spectral decoder standing in for the audio codec:
/// latents go through a fixed full-rank linear map to a pseudo-mel
/// log-spectrogram, then DCT-II to cepstra.
#[derive(Debug, Clone)]
pub struct SpectralDecoder {
    mel_map: Tensor<f64>, // [d_audio x n_mels]
    n_mels: usize,
    n_ceps: usize,
}

impl SpectralDecoder {
    pub fn new(d_audio: usize, n_mels: usize, n_ceps: usize) -> Self {
        let mut rng = substream(0x00de_c0de, "mel-map", &[d_audio as u64, n_mels as u64]);
        let scale = 1.0 / (d_audio as f64).sqrt();
        let mel_map = Tensor::from_fn(d_audio, n_mels, |_, _| {
            let n: f64 = StandardNormal.sample(&mut rng);
            n * scale
        });
        Self {
            mel_map,
            n_mels,
            n_ceps,
        }
    }

    pub fn default_for(d_audio: usize) -> Self {
        Self::new(d_audio, 40, 13)
    }

    /// Latents `[T x d_audio]` -> mel cepstra `[T x n_ceps]`.
    pub fn cepstra(&self, latents: &Tensor<f64>) -> Tensor<f64> {
        let t_frames = latents.rows();
        let d = latents.cols();
        let mut ceps = Tensor::zeros(vec![t_frames, self.n_ceps]);
        let mut mel_row = vec![0.0f64; self.n_mels];
        for t in 0..t_frames {
            for m in 0..self.n_mels {
                let mut s = 0.0;
                for k in 0..d {
                    s += latents.at(t, k) * self.mel_map.at(k, m);
                }
                mel_row[m] = (1e-3 + s * s).ln();
            }
            for q in 0..self.n_ceps {
                let mut c = 0.0;
                for (m, &lv) in mel_row.iter().enumerate() {
                    c += lv
                        * (std::f64::consts::PI * q as f64 * (m as f64 + 0.5)
                            / self.n_mels as f64)
                            .cos();
                }
                ceps.set(t, q, c);
            }
        }
        ceps
    }
}

/// Mel cepstral distortion between aligned cepstra `[F x Q]`, excluding
/// coefficient 0: `(10 sqrt(2) / ln 10) * mean_f ||c_f[1..] - c'_f[1..]||`.
pub fn mcd(gen_cepstra: &Tensor<f64>, ref_cepstra: &Tensor<f64>) -> Result<f64, MetricsError> {
    if gen_cepstra.rows() != ref_cepstra.rows() || gen_cepstra.cols() != ref_cepstra.cols() {
        return Err(MetricsError::FrameCountMismatch {
            gen_frames: gen_cepstra.rows(),
            ref_frames: ref_cepstra.rows(),
        });
    }
    let f = gen_cepstra.rows();
    if f == 0 {
        return Ok(0.0);
    }
    let q = gen_cepstra.cols();
    let mut acc = 0.0;
    for t in 0..f {
        let mut s = 0.0;
        for c in 1..q {
            let d = gen_cepstra.at(t, c) - ref_cepstra.at(t, c);
            s += d * d;
        }
        acc += s.sqrt();
    }
    Ok(MCD_SCALE * acc / f as f64)
}

// ---- classification ---------------------------------------------------

/// Clip accuracy and confusion matrix (rows = reference, cols = predicted).
pub fn classification_report(
    ref_labels: &[usize],
    pred_labels: &[usize],
    n_classes: usize,
) -> Result<(f64, Vec<Vec<u32>>), MetricsError> {
    if ref_labels.is_empty() || ref_labels.len() != pred_labels.len() {
        return Err(MetricsError::EmptyTestSet);
    }
    let mut confusion = vec![vec![0u32; n_classes]; n_classes];
    let mut correct = 0usize;
    for (&r, &p) in ref_labels.iter().zip(pred_labels) {
        confusion[r][p] += 1;
        if r == p {
            correct += 1;
        }
    }
    Ok((
        100.0 * correct as f64 / ref_labels.len() as f64,
        confusion,
    ))
}

// ---- report -----------------------------------------------------------

/// Per-clip evaluation breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip_id: String,
    pub n_ref: usize,
    pub n_pred: usize,
    pub n_matched: usize,
    pub ref_class: usize,
    pub pred_class: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mcd: Option<f64>,
}

/// The serialized evaluation result; column names mirror the comparison
/// tables the report command renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub training: String,
    pub count_match_pct: f64,
    pub onset_acc_pct: f64,
    pub ap_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mcd: Option<f64>,
    pub clip_acc_pct: f64,
    pub confusion: Vec<Vec<u32>>,
    pub tolerance_s: f64,
    pub per_clip: Vec<ClipReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub run_hash: Option<String>,
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.1}")
}

fn fmt_mcd(v: Option<f64>) -> String {
    match v {
        Some(m) => format!("{m:.2}"),
        None => "no audio".to_string(),
    }
}

/// Render the onset comparison table (and, when any report covers more than
/// one class, the classification table). Output is byte-stable for fixed
/// input order.
pub fn render_comparison(reports: &[MetricsReport]) -> String {
    let mut rows: Vec<[String; 6]> = vec![[
        "Model".into(),
        "Training".into(),
        "Count match(%)".into(),
        "Acc(%)".into(),
        "AP(%)".into(),
        "MCD".into(),
    ]];
    for r in reports {
        rows.push([
            r.model.clone(),
            r.training.clone(),
            fmt_metric(r.count_match_pct),
            fmt_metric(r.onset_acc_pct),
            fmt_metric(r.ap_pct),
            fmt_mcd(r.mcd),
        ]);
    }
    let mut out = render_table(&rows);
    if reports.iter().any(|r| r.confusion.len() > 1) {
        let mut cls: Vec<[String; 3]> = vec![[
            "Model".into(),
            "Training".into(),
            "Acc(%)".into(),
        ]];
        for r in reports {
            cls.push([
                r.model.clone(),
                r.training.clone(),
                fmt_metric(r.clip_acc_pct),
            ]);
        }
        out.push('\n');
        out.push_str(&render_table(&cls));
    }
    out
}

fn render_table<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (N - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
