//! Generator for small synthetic "language" corpora.
//!
//! Each language is a source-filter process: a sawtooth glottal source with
//! a language-specific pitch band, shaped by resonators at a language-specific
//! pair of formant centers. Formant centers of different languages are at
//! least `min(300, 7000 / (2n))` Hz apart. Speakers perturb formant scale,
//! pitch and breathiness; syllable timing and vowel quality vary per syllable.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::audio::{write_wav, DEFAULT_SAMPLE_RATE};
use super::meta::{parse_filename, Sex, UtteranceMeta};
use crate::error::{LidError, Result};

const CODE_ALPHABET: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";
const SOURCE_TAG: &str = "synth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_languages: usize,
    pub n_speakers: usize,
    pub minutes_per_lang: f64,
    pub seed: u64,
    /// Per-language duration overrides, keyed by language position.
    #[serde(default)]
    pub minutes_override: BTreeMap<usize, f64>,
}

impl SyntheticSpec {
    pub fn new(n_languages: usize, n_speakers: usize, minutes_per_lang: f64, seed: u64) -> Self {
        SyntheticSpec {
            n_languages,
            n_speakers,
            minutes_per_lang,
            seed,
            minutes_override: BTreeMap::new(),
        }
    }

    pub fn minutes_for(&self, lang: usize) -> f64 {
        self.minutes_override
            .get(&lang)
            .copied()
            .unwrap_or(self.minutes_per_lang)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageProfile {
    pub code: String,
    pub formants_hz: [f64; 2],
    pub f0_hz: f64,
}

#[derive(Debug, Clone)]
struct SpeakerProfile {
    id: String,
    sex: Sex,
    formant_scale: f64,
    f0_hz: f64,
    breath: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub root: PathBuf,
    pub languages: Vec<String>,
    pub utterances: Vec<UtteranceMeta>,
}

/// Code of the `i`-th synthetic language: `sy0`..`sy9`, then `sya`..`syz`.
pub fn synthetic_language_code(i: usize) -> Option<String> {
    CODE_ALPHABET
        .get(i)
        .map(|&c| format!("sy{}", c as char))
}

pub fn language_profile(lang: usize, n_languages: usize) -> LanguageProfile {
    let step = (7000.0 / (2.0 * n_languages as f64)).min(300.0);
    LanguageProfile {
        code: synthetic_language_code(lang).unwrap_or_default(),
        formants_hz: [
            300.0 + step * lang as f64,
            300.0 + step * (lang + n_languages) as f64,
        ],
        f0_hz: 95.0 + 12.0 * (lang % 6) as f64,
    }
}

fn speaker_profile(j: usize, lang: &LanguageProfile, rng: &mut ChaCha8Rng) -> SpeakerProfile {
    let sex = if j % 2 == 0 { Sex::Male } else { Sex::Female };
    let sex_factor = if sex == Sex::Female { 1.7 } else { 1.0 };
    SpeakerProfile {
        id: format!("spk{j}"),
        sex,
        formant_scale: rng.random_range(0.97..1.03),
        f0_hz: lang.f0_hz * sex_factor * rng.random_range(0.92..1.08),
        breath: rng.random_range(0.02..0.06),
    }
}

struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, rate: f64) -> Self {
        let r = (-PI * bandwidth / rate).exp();
        Resonator {
            a1: 2.0 * r * (2.0 * PI * freq / rate).cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const VOWEL_WEIGHTS: [[f64; 2]; 3] = [[1.0, 0.35], [0.35, 1.0], [0.75, 0.75]];
const VOWEL_SHIFTS: [f64; 3] = [0.0, 0.03, -0.03];

fn synthesize(
    lang: &LanguageProfile,
    spk: &SpeakerProfile,
    seconds: f64,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let n = (seconds * rate).round() as usize;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = vec![0.0f64; n];
    let mut pos = 0usize;
    let mut phase = 0.0f64;
    while pos < n {
        let syl = ((rng.random_range(0.12..0.30) * rate) as usize).min(n - pos);
        let gap = (rng.random_range(0.03..0.15) * rate) as usize;
        let vowel = rng.random_range(0..VOWEL_WEIGHTS.len());
        let f0_start = spk.f0_hz * rng.random_range(0.9..1.1);
        let f0_slope = rng.random_range(-0.15..0.10);
        let mut res: Vec<Resonator> = lang
            .formants_hz
            .iter()
            .map(|&f| {
                let f = f * spk.formant_scale * (1.0 + VOWEL_SHIFTS[vowel]);
                Resonator::new(f, 60.0 + 0.04 * f, rate)
            })
            .collect();
        for i in 0..syl {
            let t = i as f64 / syl.max(1) as f64;
            let f0 = f0_start * (1.0 + f0_slope * t);
            phase = (phase + f0 / rate).fract();
            let source = 2.0 * phase - 1.0 + spk.breath * noise.sample(rng);
            let voiced: f64 = res
                .iter_mut()
                .zip(VOWEL_WEIGHTS[vowel])
                .map(|(r, w)| w * r.step(source))
                .sum();
            let env = (PI * t).sin().powf(0.6);
            out[pos + i] = env * voiced;
        }
        pos += syl;
        let gap_end = (pos + gap).min(n);
        for s in &mut out[pos..gap_end] {
            *s = 0.002 * noise.sample(rng);
        }
        pos = gap_end;
    }
    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.7 / peak } else { 1.0 };
    out.into_iter().map(|v| (v * scale) as f32).collect()
}

/// Generates one mono utterance of `seconds` for speaker `speaker` of
/// language `lang` (of `n_languages`), deterministic in `seed`.
pub fn synthesize_utterance(
    lang: usize,
    n_languages: usize,
    speaker: usize,
    seconds: f64,
    seed: u64,
) -> Vec<f32> {
    let profile = language_profile(lang, n_languages);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((lang as u64) << 32) ^ speaker as u64);
    let spk = speaker_profile(speaker, &profile, &mut rng);
    synthesize(&profile, &spk, seconds, DEFAULT_SAMPLE_RATE as f64, &mut rng)
}

/// Writes a corpus following the dataset layout: one folder per language
/// code holding `<code>_synth_<sex>_spk<j>_<index>.wav` plus transcripts.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticCorpus> {
    if spec.n_languages < 2 || spec.n_languages > CODE_ALPHABET.len() {
        return Err(LidError::Config(format!(
            "synthetic corpus needs 2..={} languages, got {}",
            CODE_ALPHABET.len(),
            spec.n_languages
        )));
    }
    if spec.n_speakers == 0 {
        return Err(LidError::Config("synthetic corpus needs at least one speaker".into()));
    }
    let rate = DEFAULT_SAMPLE_RATE as f64;
    let mut languages = Vec::new();
    let mut utterances = Vec::new();
    for l in 0..spec.n_languages {
        let profile = language_profile(l, spec.n_languages);
        let dir = root.join(&profile.code);
        std::fs::create_dir_all(&dir).map_err(|e| LidError::io(&dir, e))?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ l as u64);
        let speakers: Vec<SpeakerProfile> = (0..spec.n_speakers)
            .map(|j| speaker_profile(j, &profile, &mut rng))
            .collect();
        let mut remaining = spec.minutes_for(l) * 60.0;
        let mut index = 0usize;
        while remaining > 1e-9 {
            let dur = rng.random_range(6.0..14.0f64).min(remaining);
            remaining -= dur;
            let spk = &speakers[index % speakers.len()];
            let samples = synthesize(&profile, spk, dur, rate, &mut rng);
            let stem = format!(
                "{}_{SOURCE_TAG}_{}_{}_{index}",
                profile.code,
                spk.sex.as_token(),
                spk.id
            );
            let wav = dir.join(format!("{stem}.wav"));
            write_wav(&wav, DEFAULT_SAMPLE_RATE, &samples)?;
            let txt = dir.join(format!("{stem}.txt"));
            std::fs::write(&txt, format!("synthetic utterance {index} in {}\n", profile.code))
                .map_err(|e| LidError::io(&txt, e))?;
            utterances.push(parse_filename(&wav.to_string_lossy())?);
            index += 1;
        }
        languages.push(profile.code);
    }
    Ok(SyntheticCorpus {
        root: root.to_path_buf(),
        languages,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(synthetic_language_code(0).unwrap(), "sy0");
        assert_eq!(synthetic_language_code(10).unwrap(), "sya");
        assert!(synthetic_language_code(36).is_none());
    }

    #[test]
    fn formant_sets_are_separated() {
        for n in [2usize, 4, 10, 12] {
            let min_gap = (7000.0 / (2.0 * n as f64)).min(300.0);
            let profiles: Vec<_> = (0..n).map(|l| language_profile(l, n)).collect();
            for a in 0..n {
                for b in a + 1..n {
                    for fa in profiles[a].formants_hz {
                        for fb in profiles[b].formants_hz {
                            assert!((fa - fb).abs() >= min_gap - 1e-9);
                        }
                    }
                }
            }
            assert!(profiles.iter().all(|p| p.formants_hz[1] < 7600.0));
        }
    }

    #[test]
    fn corpus_layout_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::new(4, 5, 0.5, 7);
        let ca = generate_synthetic_corpus(&spec, a.path()).unwrap();
        generate_synthetic_corpus(&spec, b.path()).unwrap();
        assert_eq!(ca.languages, vec!["sy0", "sy1", "sy2", "sy3"]);
        for m in &ca.utterances {
            let rel = m.audio_path.strip_prefix(a.path()).unwrap();
            let name = m.audio_path.file_name().unwrap().to_str().unwrap();
            let reparsed = parse_filename(name).unwrap();
            assert_eq!(reparsed.language_code, m.language_code);
            assert_eq!(rel.parent().unwrap().to_str().unwrap(), m.language_code);
            let other = b.path().join(rel);
            assert_eq!(
                std::fs::read(&m.audio_path).unwrap(),
                std::fs::read(other).unwrap()
            );
            assert!(m.transcript_path.as_ref().unwrap().exists());
        }
        let total: f64 = ca
            .utterances
            .iter()
            .filter(|m| m.language_code == "sy0")
            .map(|m| super::super::audio::read_wav(&m.audio_path).unwrap().duration_s())
            .sum();
        assert!((total - 30.0).abs() < 0.01, "{total}");
    }

    #[test]
    fn rejects_single_language() {
        let d = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_corpus(&SyntheticSpec::new(1, 2, 1.0, 0), d.path()).is_err());
    }
}
