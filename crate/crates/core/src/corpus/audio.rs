use std::path::Path;

use serde::{Deserialize, Serialize};

use super::meta::UtteranceMeta;
use crate::error::{LidError, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_SEGMENT_SECONDS: f64 = 4.0;

/// Interleaved PCM audio scaled to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PcmAudio {
    pub sample_rate: u32,
    pub channels: u16,
    pub samples: Vec<f32>,
}

impl PcmAudio {
    pub fn mono(sample_rate: u32, samples: Vec<f32>) -> Self {
        PcmAudio {
            sample_rate,
            channels: 1,
            samples,
        }
    }

    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels.max(1) as usize
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub segment_s: f64,
    pub rate: u32,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            segment_s: DEFAULT_SEGMENT_SECONDS,
            rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl SegmentConfig {
    pub fn samples_per_segment(&self) -> usize {
        (self.segment_s * self.rate as f64).round() as usize
    }
}

/// A fixed-length mono slice of an utterance at the pipeline rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source: UtteranceMeta,
    pub segment_index: usize,
}

impl AudioSegment {
    /// Segment that is not tied to a corpus file (tests, ad-hoc inputs).
    pub fn detached(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioSegment {
            samples,
            sample_rate,
            source: UtteranceMeta {
                language_code: "und".into(),
                source_dataset: "adhoc".into(),
                sex: super::meta::Sex::Unknown,
                speaker_id: None,
                index: 0,
                audio_path: "adhoc.wav".into(),
                transcript_path: None,
            },
            segment_index: 0,
        }
    }
}

/// Reads a 16-bit integer PCM WAV file. Any other encoding is a decode error.
pub fn read_wav(path: &Path) -> Result<PcmAudio> {
    let decode = |reason: String| LidError::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => LidError::io(path, io),
        other => decode(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(decode(format!(
            "only 16-bit PCM is supported (got {:?} {}-bit)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if spec.channels == 0 || spec.sample_rate == 0 {
        return Err(decode("zero channels or sample rate".into()));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| decode(e.to_string()))?;
    Ok(PcmAudio {
        sample_rate: spec.sample_rate,
        channels: spec.channels,
        samples,
    })
}

/// Writes mono audio as 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: &Path, sample_rate: u32, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => LidError::io(path, io),
        other => LidError::Serde(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

pub fn downmix(audio: &PcmAudio) -> Vec<f32> {
    let ch = audio.channels.max(1) as usize;
    if ch == 1 {
        return audio.samples.clone();
    }
    audio
        .samples
        .chunks_exact(ch)
        .map(|f| f.iter().sum::<f32>() / ch as f32)
        .collect()
}

/// Linear-interpolation resampler.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = (samples.len() as u64 * to as u64 / from as u64) as usize;
    let step = from as f64 / to as f64;
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let i0 = (t.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = (t - i0 as f64) as f32;
            samples[i0] + (samples[i1] - samples[i0]) * frac
        })
        .collect()
}

/// Cuts an utterance into `floor(duration / segment_s)` segments after
/// downmixing and resampling. A tail shorter than one segment is dropped;
/// audio shorter than one segment yields an empty list.
pub fn segment_utterance(
    audio: &PcmAudio,
    meta: &UtteranceMeta,
    cfg: &SegmentConfig,
) -> Result<Vec<AudioSegment>> {
    if !(cfg.segment_s > 0.0) || cfg.rate == 0 {
        return Err(LidError::Config(format!(
            "segment length must be positive (got {} s at {} Hz)",
            cfg.segment_s, cfg.rate
        )));
    }
    if audio.sample_rate == 0 {
        return Err(LidError::Decode {
            path: meta.audio_path.clone(),
            reason: "zero sample rate".into(),
        });
    }
    let mono = downmix(audio);
    let mono = resample_linear(&mono, audio.sample_rate, cfg.rate);
    let len = cfg.samples_per_segment();
    Ok(mono
        .chunks_exact(len)
        .enumerate()
        .map(|(i, chunk)| AudioSegment {
            samples: chunk.to_vec(),
            sample_rate: cfg.rate,
            source: meta.clone(),
            segment_index: i,
        })
        .collect())
}

/// Reads and segments the utterance described by `meta`.
pub fn load_segments(meta: &UtteranceMeta, cfg: &SegmentConfig) -> Result<Vec<AudioSegment>> {
    let audio = read_wav(&meta.audio_path)?;
    segment_utterance(&audio, meta, cfg)
}
