use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backend::{extract_representation, BatchSource, LabeledRep, Pooling};
use crate::corpus::{LanguageRegistry, SplitPlan};
use crate::error::{LidError, Result};
use crate::features::FeatureMatrix;
use crate::nn::TdnnModel;

pub const MANIFEST: &str = "manifest.tsv";
pub const REGISTRY: &str = "registry.json";
pub const MODEL: &str = "model.tdnn";
pub const BEST_MODEL: &str = "model.best.tdnn";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FEATURES: &str = "features";
pub const REPORTS: &str = "reports";
const LOCK: &str = ".lock";

/// Output directory shared by all commands.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

/// Exclusive claim on a workdir, released on drop.
#[derive(Debug)]
pub struct WorkdirLock {
    path: PathBuf,
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn lock(&self) -> Result<WorkdirLock> {
        std::fs::create_dir_all(&self.root).map_err(|e| LidError::io(&self.root, e))?;
        let path = self.path(LOCK);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => LidError::Locked(path.clone()),
                _ => LidError::io(&path, e),
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(WorkdirLock { path })
    }

    /// `features/<parent dir>/<stem>.<segment>.lidf` for a segment of `audio`.
    pub fn feature_path(&self, audio: &Path, segment_index: usize) -> PathBuf {
        let parent = audio
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "_".into());
        let stem = audio.file_stem().unwrap_or_default().to_string_lossy();
        self.root
            .join(FEATURES)
            .join(parent)
            .join(format!("{stem}.{segment_index}.lidf"))
    }

    pub fn feature_path_for_id(&self, id: &str) -> Result<PathBuf> {
        let (path, idx) = id
            .rsplit_once('#')
            .ok_or_else(|| LidError::Shape(format!("malformed segment id {id}")))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| LidError::Shape(format!("malformed segment id {id}")))?;
        Ok(self.feature_path(Path::new(path), idx))
    }

    pub fn load_manifest(&self) -> Result<SplitPlan> {
        let p = self.path(MANIFEST);
        let text = std::fs::read_to_string(&p).map_err(|e| LidError::io(&p, e))?;
        SplitPlan::from_manifest(&text)
    }

    pub fn load_registry(&self) -> Result<LanguageRegistry> {
        LanguageRegistry::load(&self.path(REGISTRY))
    }

    /// Ensemble files are `ensemble.v<N>.lide`; returns them by version.
    pub fn ensembles(&self) -> Result<Vec<(u32, PathBuf)>> {
        let mut out = Vec::new();
        let entries = match std::fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(_) => return Ok(out),
        };
        for e in entries {
            let p = e.map_err(|e| LidError::io(&self.root, e))?.path();
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if let Some(v) = name
                .strip_prefix("ensemble.v")
                .and_then(|r| r.strip_suffix(".lide"))
                .and_then(|v| v.parse().ok())
            {
                out.push((v, p));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn ensemble_path(&self, version: u32) -> PathBuf {
        self.path(&format!("ensemble.v{version}.lide"))
    }

    pub fn latest_ensemble(&self) -> Result<PathBuf> {
        self.ensembles()?
            .pop()
            .map(|(_, p)| p)
            .ok_or_else(|| LidError::EmptyInput("no ensemble in the workdir; run fit-backend".into()))
    }
}

/// Writes `bytes` unless the file already holds exactly them. Returns
/// whether the file was written.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| LidError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| LidError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| LidError::io(path, e))?;
    Ok(true)
}

/// Computes representations from stored feature files on each request, so
/// only the requested batch is ever in memory.
pub struct FeatureSource<'a> {
    pub workdir: &'a Workdir,
    pub model: &'a TdnnModel,
    pub pooling: Pooling,
    labels: BTreeMap<String, String>,
}

impl<'a> FeatureSource<'a> {
    pub fn new(
        workdir: &'a Workdir,
        model: &'a TdnnModel,
        pooling: Pooling,
        catalog: impl IntoIterator<Item = (String, String)>,
    ) -> Self {
        FeatureSource {
            workdir,
            model,
            pooling,
            labels: catalog.into_iter().collect(),
        }
    }

    pub fn representation(&self, id: &str) -> Result<crate::backend::RepresentationVector> {
        let feats = FeatureMatrix::load(&self.workdir.feature_path_for_id(id)?)?;
        extract_representation(self.model, &feats, self.pooling, id)
    }
}

impl BatchSource for FeatureSource<'_> {
    fn catalog(&self) -> Result<Vec<(String, String)>> {
        Ok(self.labels.iter().map(|(a, b)| (a.clone(), b.clone())).collect())
    }

    fn load(&mut self, ids: &[String]) -> Result<Vec<LabeledRep>> {
        use rayon::prelude::*;
        ids.par_iter()
            .map(|id| {
                let label = self
                    .labels
                    .get(id)
                    .cloned()
                    .ok_or_else(|| LidError::EmptyInput(format!("segment {id} is not in the catalog")))?;
                Ok(LabeledRep {
                    rep: self.representation(id)?,
                    label,
                })
            })
            .collect()
    }

    fn store(&mut self, items: &[LabeledRep]) -> Result<()> {
        for i in items {
            self.labels.insert(i.rep.segment_id.clone(), i.label.clone());
        }
        Ok(())
    }
}
