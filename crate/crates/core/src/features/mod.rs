//! Per-frame acoustic features: 13 MFCCs followed by voicing, log-F0 and
//! delta log-F0, for 16 values per 10 ms frame.

mod mfcc;
mod pitch;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2};

pub use mfcc::{dct_matrix, hz_to_mel, mel_to_hz, MfccConfig, MfccExtractor, LOG_FLOOR};
pub use pitch::{
    delta, interpolate_log_f0, pitch_features, track_pitch, PitchFrame, DEFAULT_F0_HZ,
    MAX_F0_HZ, MIN_F0_HZ, VOICED_THRESHOLD,
};

use crate::corpus::AudioSegment;
use crate::error::{LidError, Result};

pub const FEATURE_DIM: usize = 16;
pub const N_PITCH: usize = 3;

const FEATURE_MAGIC: &[u8; 4] = b"LIDF";
const FEATURE_VERSION: u16 = 1;

/// T × 16 frame matrix. Columns 0-12 are MFCCs, 13 voicing score,
/// 14 log-F0, 15 delta log-F0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Array2<f32>,
    pub frame_shift_ms: f32,
    pub frame_length_ms: f32,
    pub sample_rate: u32,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Flat binary record: magic, version, T, dim, frame params, then the
    /// row-major little-endian `f32` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 4 * self.frames.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.num_frames() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_length_ms.to_le_bytes());
        out.extend_from_slice(&self.frame_shift_ms.to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        for v in self.frames.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(LidError::VersionMismatch("not a feature file".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != FEATURE_VERSION {
            return Err(LidError::VersionMismatch(format!("feature file version {version}")));
        }
        let _reserved: [u8; 2] = read_array(&mut r)?;
        let t = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let frame_length_ms = f32::from_le_bytes(read_array(&mut r)?);
        let frame_shift_ms = f32::from_le_bytes(read_array(&mut r)?);
        let sample_rate = u32::from_le_bytes(read_array(&mut r)?);
        if r.len() != t * dim * 4 {
            return Err(LidError::VersionMismatch(format!(
                "feature payload is {} bytes, header promises {t}×{dim}",
                r.len()
            )));
        }
        let data = r
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let frames = Array2::from_shape_vec((t, dim), data)
            .map_err(|e| LidError::Shape(e.to_string()))?;
        Ok(FeatureMatrix {
            frames,
            frame_shift_ms,
            frame_length_ms,
            sample_rate,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| LidError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| LidError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LidError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| LidError::VersionMismatch("truncated feature header".into()))
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

/// Reusable extractor bound to one configuration and sample rate.
pub struct FeatureExtractor {
    mfcc: MfccExtractor,
}

impl FeatureExtractor {
    pub fn new(cfg: &MfccConfig, rate: u32) -> Result<Self> {
        Ok(FeatureExtractor {
            mfcc: MfccExtractor::new(cfg, rate)?,
        })
    }

    fn check_segment(&self, segment: &AudioSegment) -> Result<()> {
        if segment.sample_rate != self.mfcc.rate() {
            return Err(LidError::Config(format!(
                "segment is at {} Hz, extractor at {} Hz",
                segment.sample_rate,
                self.mfcc.rate()
            )));
        }
        if self.mfcc.num_frames(segment.samples.len()) == 0 {
            return Err(LidError::EmptyInput(format!(
                "segment {} is shorter than one frame",
                segment.segment_index
            )));
        }
        Ok(())
    }

    pub fn mfcc(&self, segment: &AudioSegment) -> Result<Array2<f64>> {
        self.check_segment(segment)?;
        Ok(self.mfcc.mfcc(&segment.samples))
    }

    pub fn pitch(&self, segment: &AudioSegment) -> Result<Array2<f64>> {
        self.check_segment(segment)?;
        let cfg = self.mfcc.config();
        let rate = self.mfcc.rate();
        Ok(pitch_features(
            &segment.samples,
            rate,
            cfg.frame_length(rate),
            cfg.frame_shift(rate),
        ))
    }

    pub fn extract(&self, segment: &AudioSegment) -> Result<FeatureMatrix> {
        let mfcc = self.mfcc(segment)?;
        let pitch = self.pitch(segment)?;
        debug_assert_eq!(mfcc.nrows(), pitch.nrows());
        let nc = mfcc.ncols();
        let mut frames = Array2::<f32>::zeros((mfcc.nrows(), nc + N_PITCH));
        frames
            .slice_mut(s![.., ..nc])
            .assign(&mfcc.mapv(|v| v as f32));
        frames
            .slice_mut(s![.., nc..])
            .assign(&pitch.mapv(|v| v as f32));
        let cfg = self.mfcc.config();
        Ok(FeatureMatrix {
            frames,
            frame_shift_ms: cfg.frame_shift_ms as f32,
            frame_length_ms: cfg.frame_length_ms as f32,
            sample_rate: self.mfcc.rate(),
        })
    }
}

pub fn extract_mfcc(segment: &AudioSegment, cfg: &MfccConfig) -> Result<Array2<f64>> {
    FeatureExtractor::new(cfg, segment.sample_rate)?.mfcc(segment)
}

pub fn extract_pitch(segment: &AudioSegment, cfg: &MfccConfig) -> Result<Array2<f64>> {
    FeatureExtractor::new(cfg, segment.sample_rate)?.pitch(segment)
}

pub fn extract_features(segment: &AudioSegment, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    FeatureExtractor::new(cfg, segment.sample_rate)?.extract(segment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-0.3..0.3)).collect()
    }

    fn voiced_like(n: usize) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                let ph = (180.0 * t).fract();
                ((2.0 * ph - 1.0) * 0.3 + 0.1 * (2.0 * std::f64::consts::PI * 900.0 * t).sin()) as f32
            })
            .collect()
    }

    #[test]
    fn four_second_segment_shape() {
        let seg = AudioSegment::detached(noise(64_000, 1), 16_000);
        let f = extract_features(&seg, &MfccConfig::default()).unwrap();
        assert_eq!((f.num_frames(), f.dim()), (398, 16));
        let m = extract_mfcc(&seg, &MfccConfig::default()).unwrap();
        for t in 0..398 {
            for c in 0..13 {
                assert_eq!(f.frames[[t, c]], m[[t, c]] as f32);
            }
        }
    }

    #[test]
    fn deterministic_output() {
        let seg = AudioSegment::detached(noise(16_000, 9), 16_000);
        let a = extract_features(&seg, &MfccConfig::default()).unwrap();
        let b = extract_features(&seg, &MfccConfig::default()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn binary_round_trip_and_bad_magic() {
        let seg = AudioSegment::detached(voiced_like(8_000), 16_000);
        let f = extract_features(&seg, &MfccConfig::default()).unwrap();
        let bytes = f.to_bytes();
        assert_eq!(FeatureMatrix::from_bytes(&bytes).unwrap(), f);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            FeatureMatrix::from_bytes(&bad),
            Err(LidError::VersionMismatch(_))
        ));
        assert!(FeatureMatrix::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn framing_is_shift_invariant() {
        let sig = voiced_like(32_000);
        let shifted = sig[160..].to_vec();
        let ex = FeatureExtractor::new(&MfccConfig::default(), 16_000).unwrap();
        let a = ex.extract(&AudioSegment::detached(sig, 16_000)).unwrap();
        let b = ex.extract(&AudioSegment::detached(shifted, 16_000)).unwrap();
        assert_eq!(b.num_frames(), a.num_frames() - 1);
        for t in 10..a.num_frames() - 60 {
            for c in 0..16 {
                let (x, y) = (a.frames[[t + 1, c]], b.frames[[t, c]]);
                assert!((x - y).abs() < 1e-6, "frame {t} col {c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn amplitude_scaling_moves_only_c0() {
        let sig = voiced_like(16_000);
        let scaled: Vec<f32> = sig.iter().map(|v| v * 0.25).collect();
        let ex = FeatureExtractor::new(&MfccConfig::default(), 16_000).unwrap();
        let a = ex.extract(&AudioSegment::detached(sig, 16_000)).unwrap();
        let b = ex.extract(&AudioSegment::detached(scaled, 16_000)).unwrap();
        for t in 0..a.num_frames() {
            assert!((a.frames[[t, 0]] - b.frames[[t, 0]]).abs() > 1.0);
            for c in (1..13).chain(13..15) {
                let (x, y) = (a.frames[[t, c]], b.frames[[t, c]]);
                assert!((x - y).abs() < 1e-4, "frame {t} col {c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn random_segments_are_finite() {
        let ex = FeatureExtractor::new(&MfccConfig::default(), 16_000).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for i in 0..1000u64 {
            let len = rng.random_range(400..16_000);
            let kind = i % 4;
            let sig: Vec<f32> = match kind {
                0 => noise(len, i),
                1 => vec![0.0; len],
                2 => (0..len).map(|j| if j % 97 == 0 { 1.0 } else { 0.0 }).collect(),
                _ => voiced_like(len),
            };
            let f = ex.extract(&AudioSegment::detached(sig, 16_000)).unwrap();
            assert!(f.frames.iter().all(|v| v.is_finite()), "segment {i}");
            assert!(f.frames.column(13).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
