//! Utterance file naming: `<lang>_<source>_<sex>_<speaker>_<index>.wav`.
//!
//! The source-dataset field may itself contain underscores, so parsing
//! anchors from both ends of the token list.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LidError, Result};

/// Literal used in file names for an unavailable sex or speaker id.
pub const UNKNOWN_FIELD: &str = "u";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl Sex {
    fn parse(token: &str) -> Option<Sex> {
        match token {
            "m" | "M" => Some(Sex::Male),
            "f" | "F" => Some(Sex::Female),
            UNKNOWN_FIELD | "U" => Some(Sex::Unknown),
            _ => None,
        }
    }

    pub fn as_token(self) -> &'static str {
        match self {
            Sex::Male => "m",
            Sex::Female => "f",
            Sex::Unknown => UNKNOWN_FIELD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub language_code: String,
    pub source_dataset: String,
    pub sex: Sex,
    /// `None` when the file name carries the literal `u`.
    pub speaker_id: Option<String>,
    pub index: u64,
    pub audio_path: PathBuf,
    pub transcript_path: Option<PathBuf>,
}

/// Language codes are three lowercase ASCII characters, the first a letter.
/// Digits are accepted in the last two positions so generated corpora can
/// use codes such as `sy0`.
pub fn is_valid_language_code(code: &str) -> bool {
    let b = code.as_bytes();
    b.len() == 3
        && b[0].is_ascii_lowercase()
        && b[1..]
            .iter()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
}

fn malformed(name: &str, reason: impl Into<String>) -> LidError {
    LidError::MalformedName {
        name: name.to_string(),
        reason: reason.into(),
    }
}

/// Parses a corpus file name (optionally with leading directories).
///
/// The returned `audio_path` always ends in `.wav` and `transcript_path` is
/// the sibling `.txt`; whether the transcript exists on disk is the caller's
/// business (see [`crate::corpus::scan_dataset`]).
pub fn parse_filename(name: &str) -> Result<UtteranceMeta> {
    let path = Path::new(name);
    let file_name = path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| malformed(name, "no file name component"))?;
    let stem = file_name
        .strip_suffix(".wav")
        .or_else(|| file_name.strip_suffix(".txt"))
        .ok_or_else(|| malformed(name, "extension must be .wav or .txt"))?;

    let tokens: Vec<&str> = stem.split('_').collect();
    if tokens.len() < 5 {
        return Err(malformed(
            name,
            format!("expected at least 5 underscore-separated fields, found {}", tokens.len()),
        ));
    }
    if tokens.iter().any(|t| t.is_empty()) {
        return Err(malformed(name, "empty field"));
    }
    let n = tokens.len();
    let language_code = tokens[0];
    if !is_valid_language_code(language_code) {
        return Err(malformed(name, format!("bad language code {language_code:?}")));
    }
    let index: u64 = tokens[n - 1]
        .parse()
        .map_err(|_| malformed(name, format!("non-numeric index {:?}", tokens[n - 1])))?;
    let speaker = tokens[n - 2];
    let sex = Sex::parse(tokens[n - 3])
        .ok_or_else(|| malformed(name, format!("bad sex field {:?}", tokens[n - 3])))?;
    let source_dataset = tokens[1..n - 3].join("_");

    let audio_path = path.with_file_name(format!("{stem}.wav"));
    let transcript_path = Some(path.with_file_name(format!("{stem}.txt")));
    Ok(UtteranceMeta {
        language_code: language_code.to_string(),
        source_dataset,
        sex,
        speaker_id: (speaker != UNKNOWN_FIELD).then(|| speaker.to_string()),
        index,
        audio_path,
        transcript_path,
    })
}

/// Inverse of [`parse_filename`]: the `.wav` file name for `meta`.
pub fn render_filename(meta: &UtteranceMeta) -> String {
    format!(
        "{}_{}_{}_{}_{}.wav",
        meta.language_code,
        meta.source_dataset,
        meta.sex.as_token(),
        meta.speaker_id.as_deref().unwrap_or(UNKNOWN_FIELD),
        meta.index
    )
}

impl UtteranceMeta {
    /// Stem shared by the audio and transcript files.
    pub fn stem(&self) -> String {
        render_filename(self).trim_end_matches(".wav").to_string()
    }
}

impl fmt::Display for UtteranceMeta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.audio_path.display())
    }
}
