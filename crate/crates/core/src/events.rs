//! Event logit codec and onset decoding.
//!
//! Binary frame maps become continuous logit latents via an epsilon-clamped
//! logit transform so they can serve as flow targets; model outputs come
//! back through a sigmoid, peak picking, and clip-level voting.

use foleyflow_autograd::Tensor;
use std::io::Write;
use std::path::Path;

/// Epsilon used when turning binary labels into logits.
pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Peak-picking defaults, tuned on the synthetic validation split.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_MIN_GAP_FRAMES: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("epsilon must lie in (0, 0.5), got {0}")]
    EpsilonOutOfRange(f64),
    #[error("frame map entry at ({row}, {col}) is {value}, expected 0 or 1")]
    NotBinary { row: usize, col: usize, value: f64 },
    #[error("non-finite logit at ({row}, {col})")]
    NonFiniteLogit { row: usize, col: usize },
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("min_gap_frames must be >= 1")]
    BadMinGap,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("onset export parse error at line {line}: {what}")]
    Parse { line: usize, what: String },
}

/// `[T x C]` logit map produced by encoding a binary frame map.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLogitMap {
    pub logits: Tensor<f64>,
    pub epsilon: f64,
}

/// One decoded onset.
#[derive(Debug, Clone, PartialEq)]
pub struct Onset {
    pub time_s: f64,
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedEvents {
    pub onsets: Vec<Onset>,
    pub frame_probs: Tensor<f64>,
}

/// Clamp binary labels to `[eps, 1-eps]` and apply the logit transform.
/// Encoded maps take exactly the two values `±ln((1-eps)/eps)`.
pub fn encode_logits(frame_map: &Tensor<f64>, epsilon: f64) -> Result<EventLogitMap, CodecError> {
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(CodecError::EpsilonOutOfRange(epsilon));
    }
    let cols = frame_map.cols();
    for (i, &v) in frame_map.data().iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(CodecError::NotBinary {
                row: i / cols,
                col: i % cols,
                value: v,
            });
        }
    }
    let hi = ((1.0 - epsilon) / epsilon).ln();
    let logits = frame_map.map(|v| if v == 1.0 { hi } else { -hi });
    Ok(EventLogitMap {
        logits,
        epsilon,
    })
}

/// Elementwise sigmoid; rejects non-finite inputs.
pub fn decode_probs(logits: &Tensor<f64>) -> Result<Tensor<f64>, CodecError> {
    let cols = logits.cols();
    if let Some(i) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFiniteLogit {
            row: i / cols,
            col: i % cols,
        });
    }
    Ok(logits.map(|z| 1.0 / (1.0 + (-z).exp())))
}

/// Per class: plateau-aware strict local maxima at or above `threshold`,
/// greedily accepted in descending confidence with a minimum spacing to any
/// already-accepted (higher-confidence) peak. Plateau ties take the earliest
/// frame; onset time is `frame / fps`.
pub fn peak_pick(
    frame_probs: &Tensor<f64>,
    threshold: f64,
    min_gap_frames: usize,
    fps: f64,
) -> Result<Vec<Onset>, CodecError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CodecError::BadThreshold(threshold));
    }
    if min_gap_frames == 0 {
        return Err(CodecError::BadMinGap);
    }
    let (t_frames, n_classes) = (frame_probs.rows(), frame_probs.cols());
    let mut onsets = Vec::new();
    for class in 0..n_classes {
        let col: Vec<f64> = (0..t_frames).map(|t| frame_probs.at(t, class)).collect();
        // Plateau runs of equal value that dominate both neighbors.
        let mut candidates: Vec<(usize, f64)> = Vec::new();
        let mut start = 0;
        while start < t_frames {
            let mut end = start;
            while end + 1 < t_frames && col[end + 1] == col[start] {
                end += 1;
            }
            let left_ok = start == 0 || col[start - 1] < col[start];
            let right_ok = end + 1 >= t_frames || col[end + 1] < col[start];
            if left_ok && right_ok && col[start] >= threshold {
                candidates.push((start, col[start]));
            }
            start = end + 1;
        }
        // Highest confidence first; earlier frame wins ties.
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut accepted: Vec<usize> = Vec::new();
        for (frame, conf) in candidates {
            if accepted
                .iter()
                .all(|&a| frame.abs_diff(a) >= min_gap_frames)
            {
                accepted.push(frame);
                onsets.push(Onset {
                    time_s: frame as f64 / fps,
                    class_id: class,
                    confidence: conf,
                });
            }
        }
    }
    onsets.sort_by(|a, b| {
        a.time_s
            .partial_cmp(&b.time_s)
            .unwrap()
            .then(a.class_id.cmp(&b.class_id))
    });
    Ok(onsets)
}

/// Clip-level class vote: modal per-frame argmax label over frames whose max
/// probability clears the activity gate; ties break toward the lowest class
/// id. With no active frame, fall back to the argmax of summed probabilities.
pub fn clip_vote(frame_probs: &Tensor<f64>, activity_threshold: f64) -> usize {
    let (t_frames, n_classes) = (frame_probs.rows(), frame_probs.cols());
    let mut counts = vec![0usize; n_classes];
    let mut any_active = false;
    for t in 0..t_frames {
        let row = frame_probs.row(t);
        let (mut best, mut best_p) = (0usize, row[0]);
        for (c, &p) in row.iter().enumerate().skip(1) {
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        if best_p >= activity_threshold {
            counts[best] += 1;
            any_active = true;
        }
    }
    if any_active {
        let mut best = 0;
        for c in 1..n_classes {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        return best;
    }
    // Fallback: global argmax of summed probabilities.
    let mut sums = vec![0.0f64; n_classes];
    for t in 0..t_frames {
        for (c, &p) in frame_probs.row(t).iter().enumerate() {
            sums[c] += p;
        }
    }
    let mut best = 0;
    for c in 1..n_classes {
        if sums[c] > sums[best] {
            best = c;
        }
    }
    best
}

/// Decode a logit map end to end with the default post-processing.
pub fn decode_events(
    logits: &Tensor<f64>,
    fps: f64,
    threshold: f64,
    min_gap_frames: usize,
) -> Result<DecodedEvents, CodecError> {
    let frame_probs = decode_probs(logits)?;
    let onsets = peak_pick(&frame_probs, threshold, min_gap_frames, fps)?;
    Ok(DecodedEvents {
        onsets,
        frame_probs,
    })
}

// ---- onset export format ----------------------------------------------

/// One exported prediction row.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetRow {
    pub clip_id: String,
    pub time_s: f64,
    pub class_id: usize,
    pub confidence: f64,
}

/// Tab-separated export consumed by `evaluate` and `report`.
pub fn write_onsets(path: &Path, rows: &[OnsetRow]) -> Result<(), CodecError> {
    let io = |source| CodecError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = String::from("clip_id\ttime_s\tclass_id\tconfidence\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{}\t{:.6}\n",
            r.clip_id, r.time_s, r.class_id, r.confidence
        ));
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(out.as_bytes()).map_err(io)
}

pub fn read_onsets(path: &Path) -> Result<Vec<OnsetRow>, CodecError> {
    let io = |source| CodecError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue; // header
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(CodecError::Parse {
                line: i + 1,
                what: format!("expected 4 tab-separated fields, got {}", parts.len()),
            });
        }
        let parse_err = |what: String| CodecError::Parse { line: i + 1, what };
        rows.push(OnsetRow {
            clip_id: parts[0].to_string(),
            time_s: parts[1]
                .parse()
                .map_err(|e| parse_err(format!("time_s: {e}")))?,
            class_id: parts[2]
                .parse()
                .map_err(|e| parse_err(format!("class_id: {e}")))?,
            confidence: parts[3]
                .parse()
                .map_err(|e| parse_err(format!("confidence: {e}")))?,
        });
    }
    Ok(rows)
}
