use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::meta::is_valid_language_code;
use crate::error::{LidError, Result};

/// Authoritative mapping from language codes to classifier indices.
///
/// `in_set` order defines softmax class ids and must not change once a
/// network has been trained against it. Back-end class labels are
/// `out_of_set` followed by `enrolled`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageRegistry {
    in_set: Vec<String>,
    out_of_set: Vec<String>,
    #[serde(default)]
    enrolled: Vec<String>,
}

const DEFAULT_IN_SET: [&str; 32] = [
    "ara", "ben", "cat", "eng", "ewe", "fra", "kat", "deu", "ell", "hau", "haw", "hin", "hun",
    "isl", "ita", "jav", "kas", "kor", "lin", "zho", "mri", "pus", "rus", "spa", "swe", "tam",
    "tel", "tha", "bod", "tur", "urd", "yor",
];

// Asante and Akuapem Twi share an ISO 639-2 code; Akuapem is filed under "aka".
const DEFAULT_OUT_OF_SET: [&str; 19] = [
    "aka", "sqi", "hye", "twi", "bul", "mya", "hrv", "nld", "fin", "heb", "iba", "jpn", "mal",
    "nep", "nor", "fas", "ron", "ukr", "uig",
];

impl LanguageRegistry {
    pub fn new(in_set: Vec<String>, out_of_set: Vec<String>) -> Result<Self> {
        let r = LanguageRegistry {
            in_set,
            out_of_set,
            enrolled: Vec::new(),
        };
        r.validate()?;
        Ok(r)
    }

    /// The 32 in-set / 19 out-of-set split of the 51-language corpus.
    pub fn builtin() -> Self {
        Self::new(
            DEFAULT_IN_SET.iter().map(|s| s.to_string()).collect(),
            DEFAULT_OUT_OF_SET.iter().map(|s| s.to_string()).collect(),
        )
        .expect("built-in registry is valid")
    }

    fn validate(&self) -> Result<()> {
        if self.in_set.is_empty() {
            return Err(LidError::Config("registry has no in-set languages".into()));
        }
        let mut seen = BTreeSet::new();
        for code in self.in_set.iter().chain(&self.out_of_set).chain(&self.enrolled) {
            if !is_valid_language_code(code) {
                return Err(LidError::Config(format!("invalid language code {code:?}")));
            }
            if !seen.insert(code.as_str()) {
                return Err(LidError::DuplicateCode(code.clone()));
            }
        }
        Ok(())
    }

    pub fn in_set(&self) -> &[String] {
        &self.in_set
    }

    pub fn out_of_set(&self) -> &[String] {
        &self.out_of_set
    }

    pub fn enrolled(&self) -> &[String] {
        &self.enrolled
    }

    /// Back-end label set: static out-of-set codes, then enrolled codes.
    pub fn backend_labels(&self) -> Vec<String> {
        self.out_of_set.iter().chain(&self.enrolled).cloned().collect()
    }

    pub fn in_set_index(&self, code: &str) -> Option<usize> {
        self.in_set.iter().position(|c| c == code)
    }

    pub fn is_in_set(&self, code: &str) -> bool {
        self.in_set_index(code).is_some()
    }

    pub fn is_backend_label(&self, code: &str) -> bool {
        self.out_of_set.iter().chain(&self.enrolled).any(|c| c == code)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.is_in_set(code) || self.is_backend_label(code)
    }

    pub fn enroll(&mut self, code: &str) -> Result<()> {
        if self.contains(code) {
            return Err(LidError::DuplicateCode(code.to_string()));
        }
        if !is_valid_language_code(code) {
            return Err(LidError::Config(format!("invalid language code {code:?}")));
        }
        self.enrolled.push(code.to_string());
        Ok(())
    }

    /// Fingerprint of the in-set ordering, stored in trained models.
    pub fn in_set_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.in_set {
            h.update(c.as_bytes());
            h.update(b"\n");
        }
        h.finalize()
            .iter()
            .take(16)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LidError::io(path, e))?;
        let r: LanguageRegistry = serde_json::from_str(&text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }
}
