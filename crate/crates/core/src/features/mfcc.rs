use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{LidError, Result};

/// Floor applied to mel energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub n_coeffs: usize,
    pub n_mel_bins: usize,
    pub fft_size: usize,
    pub pre_emphasis: f64,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub low_freq: f64,
    pub high_freq: f64,
    /// Sinusoidal lifter parameter; 0 disables liftering.
    pub lifter: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            n_coeffs: 13,
            n_mel_bins: 23,
            fft_size: 512,
            pre_emphasis: 0.97,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            low_freq: 20.0,
            high_freq: 7600.0,
            lifter: 22.0,
        }
    }
}

impl MfccConfig {
    pub fn frame_length(&self, rate: u32) -> usize {
        (rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn frame_shift(&self, rate: u32) -> usize {
        (rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    /// `floor((len - frame_length) / shift) + 1`, or 0 for short input.
    pub fn num_frames(&self, n_samples: usize, rate: u32) -> usize {
        let len = self.frame_length(rate);
        let shift = self.frame_shift(rate).max(1);
        if n_samples < len || len == 0 {
            0
        } else {
            (n_samples - len) / shift + 1
        }
    }

    pub fn validate(&self, rate: u32) -> Result<()> {
        let frame = self.frame_length(rate);
        if frame == 0 || self.frame_shift(rate) == 0 {
            return Err(LidError::Config("frame length and shift must be positive".into()));
        }
        if self.fft_size < frame {
            return Err(LidError::Config(format!(
                "fft_size {} is smaller than the {frame}-sample frame",
                self.fft_size
            )));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mel_bins {
            return Err(LidError::Config(format!(
                "n_coeffs must be in 1..={} (got {})",
                self.n_mel_bins, self.n_coeffs
            )));
        }
        let nyquist = rate as f64 / 2.0;
        if !(self.low_freq >= 0.0 && self.low_freq < self.high_freq && self.high_freq <= nyquist) {
            return Err(LidError::Config(format!(
                "mel range {}..{} Hz must lie within 0..{nyquist} Hz",
                self.low_freq, self.high_freq
            )));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Precomputed window, filterbank, DCT and FFT plan for one sample rate.
pub struct MfccExtractor {
    cfg: MfccConfig,
    rate: u32,
    frame_len: usize,
    shift: usize,
    window: Vec<f64>,
    /// Per mel bin: first FFT bin and weights from there on.
    filters: Vec<(usize, Vec<f64>)>,
    /// n_coeffs × n_mel_bins orthonormal DCT-II rows.
    dct: Array2<f64>,
    lifter: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: &MfccConfig, rate: u32) -> Result<Self> {
        cfg.validate(rate)?;
        let frame_len = cfg.frame_length(rate);
        let window = (0..frame_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (frame_len - 1) as f64).cos())
            .collect();

        let n_bins = cfg.fft_size / 2 + 1;
        let mel_lo = hz_to_mel(cfg.low_freq);
        let mel_hi = hz_to_mel(cfg.high_freq);
        let delta = (mel_hi - mel_lo) / (cfg.n_mel_bins + 1) as f64;
        let filters = (0..cfg.n_mel_bins)
            .map(|m| {
                let left = mel_lo + m as f64 * delta;
                let center = left + delta;
                let right = center + delta;
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let mel = hz_to_mel(k as f64 * rate as f64 / cfg.fft_size as f64);
                        let w = if mel > left && mel < center {
                            (mel - left) / (center - left)
                        } else if mel >= center && mel < right {
                            (right - mel) / (right - center)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                let start = weights.first().map_or(0, |&(k, _)| k);
                (start, weights.into_iter().map(|(_, w)| w).collect())
            })
            .collect();

        let dct = dct_matrix(cfg.n_coeffs, cfg.n_mel_bins);
        let lifter = (0..cfg.n_coeffs)
            .map(|k| {
                if cfg.lifter > 0.0 {
                    1.0 + 0.5 * cfg.lifter * (PI * k as f64 / cfg.lifter).sin()
                } else {
                    1.0
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(MfccExtractor {
            cfg: cfg.clone(),
            rate,
            frame_len,
            shift: cfg.frame_shift(rate),
            window,
            filters,
            dct,
            lifter,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn num_frames(&self, n_samples: usize) -> usize {
        self.cfg.num_frames(n_samples, self.rate)
    }

    /// Center frequency (Hz) of every mel filter.
    pub fn mel_centers_hz(&self) -> Vec<f64> {
        let mel_lo = hz_to_mel(self.cfg.low_freq);
        let delta = (hz_to_mel(self.cfg.high_freq) - mel_lo) / (self.cfg.n_mel_bins + 1) as f64;
        (1..=self.cfg.n_mel_bins)
            .map(|m| mel_to_hz(mel_lo + m as f64 * delta))
            .collect()
    }

    /// Mel filterbank energies (before the log), T × n_mel_bins.
    pub fn mel_energies(&self, samples: &[f32]) -> Array2<f64> {
        let t = self.num_frames(samples.len());
        let mut out = Array2::zeros((t, self.cfg.n_mel_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut frame = vec![0.0f64; self.frame_len];
        for i in 0..t {
            let start = i * self.shift;
            for (dst, &s) in frame.iter_mut().zip(&samples[start..start + self.frame_len]) {
                *dst = s as f64;
            }
            for n in (1..self.frame_len).rev() {
                frame[n] -= self.cfg.pre_emphasis * frame[n - 1];
            }
            frame[0] -= self.cfg.pre_emphasis * frame[0];
            for (b, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(x * w, 0.0);
            }
            for b in &mut buf[self.frame_len..] {
                *b = Complex::new(0.0, 0.0);
            }
            self.fft.process(&mut buf);
            for (m, (start_bin, weights)) in self.filters.iter().enumerate() {
                out[[i, m]] = weights
                    .iter()
                    .zip(&buf[*start_bin..])
                    .map(|(w, c)| w * c.norm_sqr())
                    .sum();
            }
        }
        out
    }

    /// Log mel energies floored at [`LOG_FLOOR`], T × n_mel_bins.
    pub fn log_mel_energies(&self, samples: &[f32]) -> Array2<f64> {
        self.mel_energies(samples).mapv(|e| e.max(LOG_FLOOR).ln())
    }

    /// Liftered cepstra, T × n_coeffs.
    pub fn mfcc(&self, samples: &[f32]) -> Array2<f64> {
        let logmel = self.log_mel_energies(samples);
        let mut c = logmel.dot(&self.dct.t());
        for mut row in c.rows_mut() {
            for (v, l) in row.iter_mut().zip(&self.lifter) {
                *v *= l;
            }
        }
        c
    }
}

/// Orthonormal DCT-II basis, `rows × n`.
pub fn dct_matrix(rows: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, n), |(k, i)| {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        scale * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos()
    })
}
