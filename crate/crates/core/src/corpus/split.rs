//! Deterministic, speaker-aware train/validation/back-end/test splits.
//!
//! Accounting is in whole segments. For every language the test share is
//! carved out of whole speakers (utterances, when the speaker is unknown)
//! so that no known speaker is on both sides. When no combination of whole
//! speakers lands within one segment of the target, the last speaker is
//! split: its remaining segments go to validation for in-set languages and
//! are excluded for out-of-set languages.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::audio::AudioSegment;
use super::registry::LanguageRegistry;
use crate::error::{LidError, Result};

pub const IN_SET_TDNN_FRACTION: f64 = 0.95;
pub const TDNN_VAL_FRACTION: f64 = 0.10;
pub const OUT_OF_SET_FIT_FRACTION: f64 = 0.80;
pub const MIN_SEGMENTS_PER_LANGUAGE: usize = 20;
pub const MIN_SPEAKERS_PER_LANGUAGE: usize = 3;

const MANIFEST_MAGIC: &str = "# lidkit split manifest v1";

/// Lightweight pointer to one segment of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentRef {
    pub language_code: String,
    pub audio_path: PathBuf,
    pub segment_index: usize,
    pub speaker_id: Option<String>,
}

impl From<&AudioSegment> for SegmentRef {
    fn from(s: &AudioSegment) -> Self {
        SegmentRef {
            language_code: s.source.language_code.clone(),
            audio_path: s.source.audio_path.clone(),
            segment_index: s.segment_index,
            speaker_id: s.source.speaker_id.clone(),
        }
    }
}

impl SegmentRef {
    /// Stable identifier `<path>#<segment index>`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.audio_path.display(), self.segment_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitTag {
    TdnnTrain,
    TdnnVal,
    BackendFit,
    Test,
    Excluded,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::TdnnTrain => "train",
            SplitTag::TdnnVal => "val",
            SplitTag::BackendFit => "backend",
            SplitTag::Test => "test",
            SplitTag::Excluded => "excluded",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => SplitTag::TdnnTrain,
            "val" => SplitTag::TdnnVal,
            "backend" => SplitTag::BackendFit,
            "test" => SplitTag::Test,
            "excluded" => SplitTag::Excluded,
            _ => return None,
        })
    }

    /// Sets whose data is used to fit parameters; these must not share a
    /// known speaker with the test set.
    pub fn is_train_side(self) -> bool {
        matches!(self, SplitTag::TdnnTrain | SplitTag::BackendFit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitPlan {
    pub tdnn_train: Vec<SegmentRef>,
    pub tdnn_val: Vec<SegmentRef>,
    pub backend_fit: Vec<SegmentRef>,
    pub test: Vec<SegmentRef>,
    /// Leftover segments of a partially used out-of-set test speaker.
    pub excluded: Vec<SegmentRef>,
    pub seed: u64,
}

impl SplitPlan {
    pub fn sets(&self) -> [(SplitTag, &[SegmentRef]); 5] {
        [
            (SplitTag::TdnnTrain, &self.tdnn_train),
            (SplitTag::TdnnVal, &self.tdnn_val),
            (SplitTag::BackendFit, &self.backend_fit),
            (SplitTag::Test, &self.test),
            (SplitTag::Excluded, &self.excluded),
        ]
    }

    pub fn get(&self, tag: SplitTag) -> &[SegmentRef] {
        match tag {
            SplitTag::TdnnTrain => &self.tdnn_train,
            SplitTag::TdnnVal => &self.tdnn_val,
            SplitTag::BackendFit => &self.backend_fit,
            SplitTag::Test => &self.test,
            SplitTag::Excluded => &self.excluded,
        }
    }

    fn get_mut(&mut self, tag: SplitTag) -> &mut Vec<SegmentRef> {
        match tag {
            SplitTag::TdnnTrain => &mut self.tdnn_train,
            SplitTag::TdnnVal => &mut self.tdnn_val,
            SplitTag::BackendFit => &mut self.backend_fit,
            SplitTag::Test => &mut self.test,
            SplitTag::Excluded => &mut self.excluded,
        }
    }

    /// Line-oriented manifest: `path \t segment_index \t tag \t lang \t speaker`.
    /// `provenance` lines are written as `#` comments after the header.
    pub fn to_manifest(&self, provenance: &[String]) -> String {
        let mut out = String::new();
        writeln!(out, "{MANIFEST_MAGIC}").unwrap();
        writeln!(out, "# seed={}", self.seed).unwrap();
        for p in provenance {
            writeln!(out, "# {p}").unwrap();
        }
        for (tag, set) in self.sets() {
            for s in set {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    s.audio_path.display(),
                    s.segment_index,
                    tag.as_str(),
                    s.language_code,
                    s.speaker_id.as_deref().unwrap_or(super::meta::UNKNOWN_FIELD)
                )
                .unwrap();
            }
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<SplitPlan> {
        let bad = |line: usize, why: &str| {
            LidError::VersionMismatch(format!("manifest line {}: {why}", line + 1))
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MANIFEST_MAGIC => {}
            _ => return Err(bad(0, "missing manifest header")),
        }
        let mut plan = SplitPlan::default();
        for (no, line) in lines {
            if let Some(comment) = line.strip_prefix("# ") {
                if let Some(seed) = comment.strip_prefix("seed=") {
                    plan.seed = seed.parse().map_err(|_| bad(no, "bad seed"))?;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(no, "expected 5 tab-separated fields"));
            }
            let tag = SplitTag::parse(f[2]).ok_or_else(|| bad(no, "unknown split tag"))?;
            let seg = SegmentRef {
                audio_path: PathBuf::from(f[0]),
                segment_index: f[1].parse().map_err(|_| bad(no, "bad segment index"))?,
                language_code: f[3].to_string(),
                speaker_id: (f[4] != super::meta::UNKNOWN_FIELD).then(|| f[4].to_string()),
            };
            plan.get_mut(tag).push(seg);
        }
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum UnitKey {
    Speaker(String),
    Utterance(PathBuf),
}

fn unit_key(s: &SegmentRef) -> UnitKey {
    match &s.speaker_id {
        Some(id) => UnitKey::Speaker(id.clone()),
        None => UnitKey::Utterance(s.audio_path.clone()),
    }
}

fn language_seed(seed: u64, code: &str) -> u64 {
    // FNV-1a keeps per-language streams independent of language order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in code.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

/// 0/1 subset sum over unit sizes; returns unit positions summing to the
/// first reachable target in `targets`, preferring earlier units.
fn pick_units(sizes: &[usize], targets: &[usize]) -> Option<Vec<usize>> {
    let cap = *targets.iter().max()?;
    let mut reach: Vec<Option<usize>> = vec![None; cap + 1];
    let mut zero_reached = vec![false; cap + 1];
    zero_reached[0] = true;
    for (u, &w) in sizes.iter().enumerate() {
        if w == 0 || w > cap {
            continue;
        }
        for s in (w..=cap).rev() {
            if !zero_reached[s] && zero_reached[s - w] {
                zero_reached[s] = true;
                reach[s] = Some(u);
            }
        }
    }
    let target = targets.iter().copied().find(|&t| t > 0 && zero_reached[t])?;
    let mut picked = Vec::new();
    let mut s = target;
    while s > 0 {
        let u = reach[s].expect("reachable sums have a parent");
        picked.push(u);
        s -= sizes[u];
    }
    Some(picked)
}

/// Splits one language's segments. Returns `(test, train_side, forced_val)`
/// where `forced_val` holds leftovers of a partially used test unit.
fn carve_test(
    segs: Vec<SegmentRef>,
    test_share: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<SegmentRef>, Vec<SegmentRef>, Vec<SegmentRef>) {
    let n_test = test_share.round().max(1.0) as usize;
    let mut units: BTreeMap<UnitKey, Vec<SegmentRef>> = BTreeMap::new();
    for s in segs {
        units.entry(unit_key(&s)).or_default().push(s);
    }
    let mut units: Vec<Vec<SegmentRef>> = units.into_values().collect();
    units.shuffle(rng);
    for u in &mut units {
        u.shuffle(rng);
    }
    let sizes: Vec<usize> = units.iter().map(Vec::len).collect();
    // Whole-unit totals within one segment of the exact share, closest first.
    let lo = (test_share - 1.0).ceil().max(1.0) as usize;
    let hi = (test_share + 1.0).floor() as usize;
    let mut targets: Vec<usize> = (lo..=hi).collect();
    targets.sort_by(|a, b| {
        (*a as f64 - test_share)
            .abs()
            .total_cmp(&(*b as f64 - test_share).abs())
            .then(a.cmp(b))
    });

    let mut test = Vec::new();
    let mut rest = Vec::new();
    let mut leftover = Vec::new();
    if let Some(picked) = pick_units(&sizes, &targets) {
        for (i, u) in units.into_iter().enumerate() {
            if picked.contains(&i) {
                test.extend(u);
            } else {
                rest.extend(u);
            }
        }
    } else {
        let mut need = n_test;
        let mut split_done = false;
        for u in units {
            if need > 0 && u.len() <= need {
                need -= u.len();
                test.extend(u);
            } else if need > 0 && !split_done {
                let mut u = u;
                let tail = u.split_off(need);
                test.extend(u);
                leftover.extend(tail);
                need = 0;
                split_done = true;
            } else {
                rest.extend(u);
            }
        }
    }
    (test, rest, leftover)
}

/// Builds a [`SplitPlan`] from segment references.
pub fn make_split_refs(
    segments: &[SegmentRef],
    registry: &LanguageRegistry,
    seed: u64,
) -> Result<SplitPlan> {
    let mut by_lang: BTreeMap<&str, Vec<SegmentRef>> = BTreeMap::new();
    for s in segments {
        if !registry.contains(&s.language_code) {
            return Err(LidError::Config(format!(
                "segment {} has unregistered language {:?}",
                s.id(),
                s.language_code
            )));
        }
        by_lang.entry(&s.language_code).or_default().push(s.clone());
    }

    let mut shortfalls = Vec::new();
    for (code, segs) in &by_lang {
        let units: std::collections::BTreeSet<UnitKey> = segs.iter().map(unit_key).collect();
        if segs.len() < MIN_SEGMENTS_PER_LANGUAGE || units.len() < MIN_SPEAKERS_PER_LANGUAGE {
            shortfalls.push(format!(
                "{code}: {} segments from {} speakers (need {MIN_SEGMENTS_PER_LANGUAGE} and {MIN_SPEAKERS_PER_LANGUAGE})",
                segs.len(),
                units.len()
            ));
        }
    }
    if !shortfalls.is_empty() {
        return Err(LidError::InsufficientData(shortfalls.join("; ")));
    }

    let mut plan = SplitPlan {
        seed,
        ..Default::default()
    };
    for (code, mut segs) in by_lang {
        segs.sort();
        segs.dedup();
        let n = segs.len();
        let mut rng = ChaCha8Rng::seed_from_u64(language_seed(seed, code));
        if registry.is_in_set(code) {
            let share = (1.0 - IN_SET_TDNN_FRACTION) * n as f64;
            let (test, mut rest, forced_val) = carve_test(segs, share, &mut rng);
            let n_val = (TDNN_VAL_FRACTION * (n - test.len()) as f64).round() as usize;
            let extra = n_val.saturating_sub(forced_val.len()).min(rest.len());
            rest.shuffle(&mut rng);
            let train = rest.split_off(extra);
            plan.test.extend(test);
            plan.tdnn_val.extend(forced_val);
            plan.tdnn_val.extend(rest);
            plan.tdnn_train.extend(train);
        } else {
            let share = (1.0 - OUT_OF_SET_FIT_FRACTION) * n as f64;
            let (test, rest, leftover) = carve_test(segs, share, &mut rng);
            plan.test.extend(test);
            plan.backend_fit.extend(rest);
            plan.excluded.extend(leftover);
        }
    }
    for tag in [
        SplitTag::TdnnTrain,
        SplitTag::TdnnVal,
        SplitTag::BackendFit,
        SplitTag::Test,
        SplitTag::Excluded,
    ] {
        plan.get_mut(tag).sort();
    }
    Ok(plan)
}

/// Builds a [`SplitPlan`] over decoded segments.
pub fn make_split(
    segments: &[AudioSegment],
    registry: &LanguageRegistry,
    seed: u64,
) -> Result<SplitPlan> {
    let refs: Vec<SegmentRef> = segments.iter().map(SegmentRef::from).collect();
    make_split_refs(&refs, registry, seed)
}
