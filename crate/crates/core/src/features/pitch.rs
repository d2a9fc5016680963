//! Frame-level pitch features: voicing score, log-F0 and delta log-F0.
//!
//! F0 comes from the normalized cross-correlation of each frame with its
//! lagged copy over the 60-400 Hz lag range. The analysis window spans the
//! frame length; the lagged copy extends past the frame, so near the end of
//! the signal the window is moved left to stay inside it.

use ndarray::Array2;

pub const MIN_F0_HZ: f64 = 60.0;
pub const MAX_F0_HZ: f64 = 400.0;
/// Frames whose voicing score reaches this value contribute their F0.
pub const VOICED_THRESHOLD: f64 = 0.5;
/// F0 used when a segment has no voiced frame at all.
pub const DEFAULT_F0_HZ: f64 = 100.0;
/// Local peaks within this fraction of the global maximum are preferred
/// at the shortest lag, which suppresses octave-down errors.
const PEAK_RATIO: f64 = 0.9;
const DELTA_WINDOW: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchFrame {
    pub voicing: f64,
    /// `None` for frames below [`VOICED_THRESHOLD`].
    pub f0_hz: Option<f64>,
}

fn nccf_frame(x: &[f64], prefix_sq: &[f64], start: usize, len: usize, lags: (usize, usize)) -> Vec<f64> {
    let e0 = prefix_sq[start + len] - prefix_sq[start];
    (lags.0..=lags.1)
        .map(|lag| {
            let el = prefix_sq[start + lag + len] - prefix_sq[start + lag];
            let denom = (e0 * el).sqrt();
            if denom <= 1e-20 {
                return 0.0;
            }
            let cross: f64 = x[start..start + len]
                .iter()
                .zip(&x[start + lag..start + lag + len])
                .map(|(a, b)| a * b)
                .sum();
            cross / denom
        })
        .collect()
}

/// Per-frame voicing and raw F0 on the framing grid (`frame_len`, `shift`).
pub fn track_pitch(samples: &[f32], rate: u32, frame_len: usize, shift: usize) -> Vec<PitchFrame> {
    let n = samples.len();
    if n < frame_len || frame_len == 0 || shift == 0 {
        return Vec::new();
    }
    let t = (n - frame_len) / shift + 1;
    let x: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let mut prefix_sq = Vec::with_capacity(n + 1);
    prefix_sq.push(0.0);
    for v in &x {
        prefix_sq.push(prefix_sq.last().unwrap() + v * v);
    }
    let min_lag = (rate as f64 / MAX_F0_HZ).floor() as usize;
    let max_lag_wanted = (rate as f64 / MIN_F0_HZ).ceil() as usize;
    let max_lag = max_lag_wanted.min(n.saturating_sub(frame_len));
    if max_lag < min_lag + 2 {
        return vec![
            PitchFrame {
                voicing: 0.0,
                f0_hz: None
            };
            t
        ];
    }

    (0..t)
        .map(|i| {
            let start = (i * shift).min(n - frame_len - max_lag);
            let r = nccf_frame(&x, &prefix_sq, start, frame_len, (min_lag, max_lag));
            let (gi, &gmax) = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty lag range");
            let voicing = gmax.clamp(0.0, 1.0);
            if voicing < VOICED_THRESHOLD {
                return PitchFrame {
                    voicing,
                    f0_hz: None,
                };
            }
            let pick = (1..r.len() - 1)
                .find(|&j| r[j] >= PEAK_RATIO * gmax && r[j] >= r[j - 1] && r[j] >= r[j + 1])
                .unwrap_or(gi);
            let offset = if pick > 0 && pick + 1 < r.len() {
                let (a, b, c) = (r[pick - 1], r[pick], r[pick + 1]);
                let denom = a - 2.0 * b + c;
                if denom.abs() > 1e-12 {
                    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            } else {
                0.0
            };
            let period = (min_lag + pick) as f64 + offset;
            PitchFrame {
                voicing,
                f0_hz: Some(rate as f64 / period),
            }
        })
        .collect()
}

/// Fills unvoiced frames by linear interpolation of log-F0 between the
/// nearest voiced frames, holding the edge values constant.
pub fn interpolate_log_f0(frames: &[PitchFrame]) -> Vec<f64> {
    let voiced: Vec<(usize, f64)> = frames
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.f0_hz.map(|hz| (i, hz.ln())))
        .collect();
    if voiced.is_empty() {
        return vec![DEFAULT_F0_HZ.ln(); frames.len()];
    }
    let mut out = Vec::with_capacity(frames.len());
    let mut next = 0usize;
    for i in 0..frames.len() {
        while next < voiced.len() && voiced[next].0 < i {
            next += 1;
        }
        let v = if next < voiced.len() && voiced[next].0 == i {
            voiced[next].1
        } else if next == 0 {
            voiced[0].1
        } else if next == voiced.len() {
            voiced[voiced.len() - 1].1
        } else {
            let (i0, v0) = voiced[next - 1];
            let (i1, v1) = voiced[next];
            v0 + (v1 - v0) * (i - i0) as f64 / (i1 - i0) as f64
        };
        out.push(v);
    }
    out
}

/// Regression delta over ±2 frames with edge replication.
pub fn delta(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let at = |i: isize| values[i.clamp(0, n as isize - 1) as usize];
    let norm: f64 = 2.0 * (1..=DELTA_WINDOW).map(|k| (k * k) as f64).sum::<f64>();
    (0..n as isize)
        .map(|t| {
            (1..=DELTA_WINDOW as isize)
                .map(|k| k as f64 * (at(t + k) - at(t - k)))
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// T × 3 matrix of (voicing, log-F0, delta log-F0).
pub fn pitch_features(samples: &[f32], rate: u32, frame_len: usize, shift: usize) -> Array2<f64> {
    let frames = track_pitch(samples, rate, frame_len, shift);
    let logf0 = interpolate_log_f0(&frames);
    let dlogf0 = delta(&logf0);
    let mut out = Array2::zeros((frames.len(), 3));
    for (i, f) in frames.iter().enumerate() {
        out[[i, 0]] = f.voicing;
        out[[i, 1]] = logf0[i];
        out[[i, 2]] = dlogf0[i];
    }
    out
}
