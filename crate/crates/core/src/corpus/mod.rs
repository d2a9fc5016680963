//! Dataset layout, segmentation, splits and synthetic corpora.

mod audio;
mod meta;
mod registry;
mod split;
mod synthetic;

use std::path::{Path, PathBuf};

pub use audio::{
    downmix, load_segments, read_wav, resample_linear, segment_utterance, write_wav,
    AudioSegment, PcmAudio, SegmentConfig, DEFAULT_SAMPLE_RATE, DEFAULT_SEGMENT_SECONDS,
};
pub use meta::{is_valid_language_code, parse_filename, render_filename, Sex, UtteranceMeta};
pub use registry::LanguageRegistry;
pub use split::{
    make_split, make_split_refs, SegmentRef, SplitPlan, SplitTag, IN_SET_TDNN_FRACTION,
    OUT_OF_SET_FIT_FRACTION, TDNN_VAL_FRACTION,
};
pub use synthetic::{
    generate_synthetic_corpus, language_profile, synthesize_utterance, synthetic_language_code,
    LanguageProfile, SyntheticCorpus, SyntheticSpec,
};

use crate::error::{LidError, Result};

/// Result of walking a dataset root.
#[derive(Debug, Clone, Default)]
pub struct DatasetScan {
    pub utterances: Vec<UtteranceMeta>,
    /// Transcripts without a matching `.wav`.
    pub orphans: Vec<PathBuf>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| LidError::io(dir, e))? {
        out.push(e.map_err(|e| LidError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Walks `root/<code>/*.{wav,txt}`. Files in a folder must carry that
/// folder's language code. Other file types are ignored.
pub fn scan_dataset(root: &Path) -> Result<DatasetScan> {
    let mut scan = DatasetScan::default();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let code = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        for file in sorted_entries(&dir)? {
            let ext = file.extension().and_then(|e| e.to_str());
            match ext {
                Some("wav") => {
                    let mut meta = parse_filename(&file.to_string_lossy())?;
                    if meta.language_code != code {
                        return Err(LidError::MalformedName {
                            name: file.display().to_string(),
                            reason: format!("file is in folder {code:?}"),
                        });
                    }
                    if !meta.transcript_path.as_ref().is_some_and(|t| t.exists()) {
                        meta.transcript_path = None;
                    }
                    scan.utterances.push(meta);
                }
                Some("txt") => {
                    if !file.with_extension("wav").exists() {
                        scan.orphans.push(file);
                    }
                }
                _ => {}
            }
        }
    }
    Ok(scan)
}
