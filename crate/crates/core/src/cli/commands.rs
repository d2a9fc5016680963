use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::PipelineConfig;
use super::workdir::{
    write_if_changed, FeatureSource, Workdir, BEST_MODEL, FEATURES, MANIFEST, MODEL, REGISTRY,
    REPORTS, TRAIN_LOG,
};
use crate::backend::{
    classify, enroll_language, extract_representation, fit_ensemble, load_ensemble,
    save_ensemble, Classification, PldaEnsemble, RepresentationVector, ResidencyMeter,
};
use crate::corpus::{
    make_split_refs, parse_filename, read_wav, scan_dataset, segment_utterance, AudioSegment,
    LanguageRegistry, SegmentRef, Sex, SplitTag, UtteranceMeta,
};
use crate::error::{LidError, Result};
use crate::eval::{
    conditional_accuracy_curve, det_curve, in_set_report, out_of_set_report, threshold_grid,
    total_accuracy_sweep, DetCurve, InSetReport, InSetSample, OutOfSetReport, PipelineSample,
    SweepReport, REPORT_SCHEMA_VERSION,
};
use crate::features::{FeatureExtractor, FeatureMatrix};
use crate::nn::{average_posterior, load_model, save_model, Mode, Tdnn, TdnnModel, Trainer};
use crate::openset::{decide_with_top, DecisionRecord, ThresholdPolicy};

/// Segments evaluated per parallel chunk; bounds resident representations.
const EVAL_CHUNK: usize = 256;
const ENROLLMENT_LABELS: &str = "enrollment.tsv";

fn provenance(cfg: &PipelineConfig) -> serde_json::Value {
    json!({ "config": cfg.to_json(), "seed": cfg.seed, "lidkit": env!("CARGO_PKG_VERSION") })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<bool> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_if_changed(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub utterances: usize,
    pub segments: usize,
    pub orphans: Vec<PathBuf>,
    pub skipped_languages: Vec<String>,
    /// Files (features, manifest, registry) whose content changed.
    pub files_written: usize,
    pub split_counts: BTreeMap<String, usize>,
}

/// Scans the dataset, extracts features for every segment and writes the
/// split manifest. Outputs whose bytes would not change are left alone.
pub fn prepare(cfg: &PipelineConfig, wd: &Workdir) -> Result<PrepareSummary> {
    let _lock = wd.lock()?;
    let root = cfg.dataset_root()?;
    let registry = cfg.registry()?;
    let scan = scan_dataset(root)?;
    for o in &scan.orphans {
        log::warn!("transcript without audio: {}", o.display());
    }
    let mut skipped = BTreeSet::new();
    let utterances: Vec<&UtteranceMeta> = scan
        .utterances
        .iter()
        .filter(|u| {
            let known = registry.contains(&u.language_code);
            if !known {
                skipped.insert(u.language_code.clone());
            }
            known
        })
        .collect();
    for code in &skipped {
        log::warn!("skipping unregistered language {code}");
    }
    let extractor = FeatureExtractor::new(&cfg.features, cfg.segment.rate)?;
    let per_utt: Vec<(Vec<SegmentRef>, usize)> = utterances
        .par_iter()
        .map(|u| {
            let audio = read_wav(&u.audio_path)?;
            let segs = segment_utterance(&audio, u, &cfg.segment)?;
            let mut written = 0;
            let mut refs = Vec::with_capacity(segs.len());
            for s in &segs {
                let feats = extractor.extract(s)?;
                let path = wd.feature_path(&u.audio_path, s.segment_index);
                written += write_if_changed(&path, &feats.to_bytes())? as usize;
                refs.push(SegmentRef::from(s));
            }
            Ok((refs, written))
        })
        .collect::<Result<_>>()?;
    let mut files_written: usize = per_utt.iter().map(|x| x.1).sum();
    let refs: Vec<SegmentRef> = per_utt.into_iter().flat_map(|x| x.0).collect();

    let plan = make_split_refs(&refs, &registry, cfg.seed)?;
    let prov = serde_json::to_string(&provenance(cfg))?;
    files_written += write_if_changed(&wd.path(MANIFEST), plan.to_manifest(&[prov]).as_bytes())? as usize;
    files_written += write_if_changed(&wd.path(REGISTRY), registry.to_json().as_bytes())? as usize;
    files_written += write_json(&wd.path(FEATURES).join("PROVENANCE.json"), &provenance(cfg))? as usize;

    let split_counts = plan
        .sets()
        .iter()
        .map(|(tag, set)| (tag.as_str().to_string(), set.len()))
        .collect();
    Ok(PrepareSummary {
        utterances: utterances.len(),
        segments: refs.len(),
        orphans: scan.orphans,
        skipped_languages: skipped.into_iter().collect(),
        files_written,
        split_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub parameters: usize,
    pub fingerprint: String,
}

fn load_labeled(
    wd: &Workdir,
    refs: &[SegmentRef],
    registry: &LanguageRegistry,
) -> Result<(Vec<Array2<f32>>, Vec<usize>)> {
    let pairs: Vec<(Array2<f32>, usize)> = refs
        .par_iter()
        .map(|r| {
            let label = registry.in_set_index(&r.language_code).ok_or_else(|| {
                LidError::Config(format!("{} is not an in-set language", r.language_code))
            })?;
            let f = FeatureMatrix::load(&wd.feature_path(&r.audio_path, r.segment_index))?;
            Ok((f.frames, label))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

/// Trains the TDNN on the train split, keeping the checkpoint with the best
/// validation accuracy alongside the final model.
pub fn train(cfg: &PipelineConfig, wd: &Workdir) -> Result<TrainSummary> {
    let _lock = wd.lock()?;
    let registry = wd.load_registry()?;
    let plan = wd.load_manifest()?;
    let (xs, ys) = load_labeled(wd, plan.get(SplitTag::TdnnTrain), &registry)?;
    let (vx, vy) = load_labeled(wd, plan.get(SplitTag::TdnnVal), &registry)?;
    if xs.is_empty() || vx.is_empty() {
        return Err(LidError::EmptyInput("train and val splits must be non-empty".into()));
    }
    log::info!("training on {} segments, validating on {}", xs.len(), vx.len());
    let net = Tdnn::<f32>::init(cfg.tdnn_for(&registry), cfg.seed)?;
    let mut trainer = Trainer::new(net, cfg.train.clone())?;
    let mut records = Vec::new();
    let mut log_text = String::new();
    let mut best: Option<(usize, f64, TdnnModel)> = None;
    let wrap = |net: &Tdnn<f32>, epoch: usize| -> Result<TdnnModel> {
        let mut m = TdnnModel::new(net.clone(), &registry)?;
        m.provenance = json!({ "run": provenance(cfg), "epoch": epoch });
        Ok(m)
    };
    for epoch in 0..cfg.train.epochs {
        let stats = trainer.train_epoch(&xs, &ys, epoch)?;
        let (_, train_accuracy) = trainer.evaluate(&xs, &ys)?;
        let (val_loss, val_accuracy) = trainer.evaluate(&vx, &vy)?;
        let rec = EpochRecord {
            epoch,
            train_loss: stats.train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            rec.train_loss,
            rec.train_accuracy,
            rec.val_loss,
            rec.val_accuracy
        );
        log_text.push_str(&serde_json::to_string(&rec)?);
        log_text.push('\n');
        records.push(rec);
        if best.as_ref().is_none_or(|b| val_accuracy > b.1) {
            best = Some((epoch, val_accuracy, wrap(&trainer.net, epoch)?));
        }
    }
    let (best_epoch, best_val_accuracy, best_model) =
        best.ok_or_else(|| LidError::Config("epochs must be at least 1".into()))?;
    let model = wrap(&trainer.net, cfg.train.epochs - 1)?;
    write_if_changed(&wd.path(TRAIN_LOG), log_text.as_bytes())?;
    save_model(&best_model, &wd.path(BEST_MODEL))?;
    save_model(&model, &wd.path(MODEL))?;
    Ok(TrainSummary {
        epochs: records,
        best_epoch,
        best_val_accuracy,
        parameters: model.parameter_count(),
        fingerprint: model.fingerprint(),
    })
}

fn load_trained(wd: &Workdir, registry: &LanguageRegistry) -> Result<TdnnModel> {
    load_model(&wd.path(MODEL), Some(registry))
}

fn enrollment_labels(wd: &Workdir) -> Result<Vec<(String, String)>> {
    let p = wd.path(ENROLLMENT_LABELS);
    if !p.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&p).map_err(|e| LidError::io(&p, e))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.rsplit_once('\t')
                .map(|(id, lab)| (id.to_string(), lab.to_string()))
                .ok_or_else(|| LidError::Serde(format!("{}: malformed line {l:?}", p.display())))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub ensemble: PathBuf,
    pub members: usize,
    pub segments: usize,
    pub labels: Vec<String>,
    pub peak_resident_vectors: usize,
    pub batch_segments: usize,
}

/// Fits the LDA/pLDA ensemble on the back-end split, streaming one batch of
/// representations at a time. Always writes version 1.
pub fn fit_backend(cfg: &PipelineConfig, wd: &Workdir) -> Result<FitSummary> {
    let _lock = wd.lock()?;
    let registry = wd.load_registry()?;
    let model = load_trained(wd, &registry)?;
    let plan = wd.load_manifest()?;
    let catalog: Vec<(String, String)> = plan
        .get(SplitTag::BackendFit)
        .iter()
        .map(|r| (r.id(), r.language_code.clone()))
        .collect();
    let segments = catalog.len();
    let mut source = FeatureSource::new(wd, &model, cfg.backend.pooling, catalog);
    let meter = ResidencyMeter::new();
    let mut ensemble = fit_ensemble(&mut source, &cfg.backend, &meter)?;
    ensemble.provenance = json!({
        "run": provenance(cfg),
        "model_fingerprint": model.fingerprint(),
        "version": 1,
    });
    let later: Vec<u32> = wd.ensembles()?.into_iter().map(|v| v.0).filter(|&v| v > 1).collect();
    if !later.is_empty() {
        log::warn!("enrolled ensemble versions {later:?} predate this fit and are now stale");
    }
    let path = wd.ensemble_path(1);
    write_if_changed(&path, &ensemble.to_bytes())?;
    let summary = FitSummary {
        ensemble: path,
        members: ensemble.members.len(),
        segments,
        labels: ensemble.labels.clone(),
        peak_resident_vectors: meter.peak(),
        batch_segments: cfg.backend.batch_segments,
    };
    write_json(
        &wd.path(REPORTS).join("fit_backend.json"),
        &json!({ "summary": summary, "provenance": ensemble.provenance }),
    )?;
    Ok(summary)
}

/// Metadata for audio that need not follow the corpus naming scheme.
fn adhoc_meta(path: &Path) -> UtteranceMeta {
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    match parse_filename(&name) {
        Ok(mut m) => {
            m.audio_path = path.to_path_buf();
            m
        }
        Err(_) => UtteranceMeta {
            language_code: "und".into(),
            source_dataset: "adhoc".into(),
            sex: Sex::Unknown,
            speaker_id: None,
            index: 0,
            audio_path: path.to_path_buf(),
            transcript_path: None,
        },
    }
}

fn segments_of(path: &Path, cfg: &PipelineConfig) -> Result<Vec<AudioSegment>> {
    let audio = read_wav(path)?;
    let segs = segment_utterance(&audio, &adhoc_meta(path), &cfg.segment)?;
    if segs.is_empty() {
        return Err(LidError::EmptyInput(format!(
            "{} is shorter than one {} s segment",
            path.display(),
            cfg.segment.segment_s
        )));
    }
    Ok(segs)
}

/// One identification result. `backend` is present only for rejected
/// inputs; `segment_index` is absent on the utterance summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyRecord {
    #[serde(flatten)]
    pub decision: DecisionRecord,
    pub backend: Option<Classification>,
}

/// Resources shared by identify and evaluate.
pub struct Identifier {
    pub registry: LanguageRegistry,
    pub model: TdnnModel,
    pub ensemble: PldaEnsemble,
    pub extractor: FeatureExtractor,
    pub policy: ThresholdPolicy,
    pub top_n: usize,
    pub pooling: crate::backend::Pooling,
}

struct Scored {
    posterior: Array1<f64>,
    rep: RepresentationVector,
}

impl Identifier {
    pub fn open(cfg: &PipelineConfig, wd: &Workdir, ensemble: Option<&Path>) -> Result<Self> {
        let registry = wd.load_registry()?;
        let model = load_trained(wd, &registry)?;
        let path = match ensemble {
            Some(p) => p.to_path_buf(),
            None => wd.latest_ensemble()?,
        };
        let ensemble = load_ensemble(&path)?;
        let expected = model.net.config.representation_dim()
            * match cfg.backend.pooling {
                crate::backend::Pooling::Concat => model
                    .net
                    .config
                    .output_len(cfg.features_frames())
                    .unwrap_or(0),
                crate::backend::Pooling::Mean => 1,
            };
        if ensemble.input_dim() != expected {
            return Err(LidError::VersionMismatch(format!(
                "{} expects {}-dim representations, the model yields {expected}",
                path.display(),
                ensemble.input_dim()
            )));
        }
        Ok(Identifier {
            extractor: FeatureExtractor::new(&cfg.features, cfg.segment.rate)?,
            policy: ThresholdPolicy::new(cfg.tau)?,
            top_n: cfg.top_n.min(registry.in_set().len()),
            pooling: cfg.backend.pooling,
            registry,
            model,
            ensemble,
        })
    }

    fn score(&self, feats: &FeatureMatrix, id: String) -> Result<Scored> {
        let out = self.model.forward(feats, Mode::Eval)?;
        let posterior = average_posterior(&out.posterior())?;
        let rep = extract_representation(&self.model, feats, self.pooling, id)?;
        Ok(Scored { posterior, rep })
    }

    /// Segment records followed by the utterance summary.
    pub fn identify_file(&self, path: &Path, cfg: &PipelineConfig) -> Result<Vec<IdentifyRecord>> {
        let segs = segments_of(path, cfg)?;
        let scored: Vec<Scored> = segs
            .par_iter()
            .map(|s| {
                let f = self.extractor.extract(s)?;
                self.score(&f, format!("{}#{}", path.display(), s.segment_index))
            })
            .collect::<Result<_>>()?;
        let name = path.display().to_string();
        let mut out = Vec::with_capacity(scored.len() + 1);
        let mut backend_votes: Vec<Classification> = Vec::new();
        for (s, sc) in segs.iter().zip(&scored) {
            let d = decide_with_top(sc.posterior.view(), &self.policy, &self.registry, self.top_n)?;
            let backend = if d.accepted {
                None
            } else {
                Some(classify(&self.ensemble, &sc.rep)?)
            };
            out.push(IdentifyRecord {
                decision: DecisionRecord::new(&name, Some(s.segment_index as u64), &d),
                backend,
            });
        }
        let posts: Vec<Array1<f64>> = scored.iter().map(|s| s.posterior.clone()).collect();
        let utt = crate::openset::utterance_posterior(&posts)?;
        let d = decide_with_top(utt.view(), &self.policy, &self.registry, self.top_n)?;
        let backend = if d.accepted {
            None
        } else {
            for (rec, sc) in out.iter().zip(&scored) {
                backend_votes.push(match &rec.backend {
                    Some(c) => c.clone(),
                    None => classify(&self.ensemble, &sc.rep)?,
                });
            }
            Some(utterance_vote(&backend_votes))
        };
        out.push(IdentifyRecord {
            decision: DecisionRecord::new(&name, None, &d),
            backend,
        });
        Ok(out)
    }
}

/// Majority label over segment classifications (ties to the smallest
/// label); confidence is the mean confidence of the segments that agree.
fn utterance_vote(segs: &[Classification]) -> Classification {
    let mut counts: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for c in segs {
        let e = counts.entry(&c.label).or_default();
        e.0 += 1;
        e.1 += c.confidence;
    }
    let (label, (votes, sum)) = counts
        .iter()
        .fold(None::<(&str, (usize, f64))>, |best, (&l, &v)| match best {
            Some(b) if b.1 .0 >= v.0 => Some(b),
            _ => Some((l, v)),
        })
        .expect("at least one segment");
    let confidence = sum / votes as f64;
    let novel = segs.iter().filter(|c| c.label == label).all(|c| c.novel);
    Classification {
        label: label.to_string(),
        confidence,
        novel,
        votes,
        members: segs.len(),
    }
}

pub fn identify(
    cfg: &PipelineConfig,
    wd: &Workdir,
    paths: &[PathBuf],
    ensemble: Option<&Path>,
) -> Result<Vec<IdentifyRecord>> {
    let id = Identifier::open(cfg, wd, ensemble)?;
    let mut out = Vec::new();
    for p in paths {
        out.extend(id.identify_file(p, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollSummary {
    pub code: String,
    pub segments: usize,
    pub previous: PathBuf,
    pub ensemble: PathBuf,
    pub labels: Vec<String>,
}

/// Enrolls `code` from every `.wav` in `audio_dir`, writing the next
/// ensemble version. Earlier versions are never modified.
pub fn enroll(cfg: &PipelineConfig, wd: &Workdir, code: &str, audio_dir: &Path) -> Result<EnrollSummary> {
    let _lock = wd.lock()?;
    let registry = wd.load_registry()?;
    if registry.contains(code) {
        return Err(LidError::DuplicateCode(code.to_string()));
    }
    let model = load_trained(wd, &registry)?;
    let versions = wd.ensembles()?;
    let (version, previous) = versions
        .last()
        .cloned()
        .ok_or_else(|| LidError::EmptyInput("no ensemble in the workdir; run fit-backend".into()))?;
    let mut ensemble = load_ensemble(&previous)?;
    ensemble.config.min_enroll = cfg.backend.min_enroll;

    let mut wavs = Vec::new();
    for e in std::fs::read_dir(audio_dir).map_err(|e| LidError::io(audio_dir, e))? {
        let p = e.map_err(|e| LidError::io(audio_dir, e))?.path();
        if p.extension().is_some_and(|x| x == "wav") {
            wavs.push(p);
        }
    }
    wavs.sort();
    let extractor = FeatureExtractor::new(&cfg.features, cfg.segment.rate)?;
    let per_file: Vec<Vec<String>> = wavs
        .par_iter()
        .map(|p| {
            let audio = read_wav(p)?;
            let segs = segment_utterance(&audio, &adhoc_meta(p), &cfg.segment)?;
            segs.iter()
                .map(|s| {
                    let f = extractor.extract(s)?;
                    write_if_changed(&wd.feature_path(p, s.segment_index), &f.to_bytes())?;
                    Ok(format!("{}#{}", p.display(), s.segment_index))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let ids: Vec<String> = per_file.into_iter().flatten().collect();
    if ids.len() < cfg.backend.min_enroll {
        return Err(LidError::InsufficientExamples {
            required: cfg.backend.min_enroll,
            got: ids.len(),
        });
    }

    let plan = wd.load_manifest()?;
    let mut catalog: Vec<(String, String)> = plan
        .get(SplitTag::BackendFit)
        .iter()
        .map(|r| (r.id(), r.language_code.clone()))
        .collect();
    catalog.extend(enrollment_labels(wd)?);
    let mut source = FeatureSource::new(wd, &model, cfg.backend.pooling, catalog);
    let examples: Vec<RepresentationVector> = ids
        .par_iter()
        .map(|id| source.representation(id))
        .collect::<Result<_>>()?;
    let meter = ResidencyMeter::new();
    let (mut next, registry) =
        enroll_language(&ensemble, code, examples, &registry, &mut source, &meter)?;
    next.provenance = json!({
        "run": provenance(cfg),
        "model_fingerprint": model.fingerprint(),
        "version": version + 1,
        "enrolled": code,
        "from": previous.file_name().map(|n| n.to_string_lossy().into_owned()),
    });

    let mut labels_text = String::new();
    for (id, label) in enrollment_labels(wd)? {
        labels_text.push_str(&format!("{id}\t{label}\n"));
    }
    for id in &ids {
        labels_text.push_str(&format!("{id}\t{code}\n"));
    }
    write_if_changed(&wd.path(ENROLLMENT_LABELS), labels_text.as_bytes())?;
    let path = wd.ensemble_path(version + 1);
    save_ensemble(&next, &path)?;
    write_if_changed(&wd.path(REGISTRY), registry.to_json().as_bytes())?;
    Ok(EnrollSummary {
        code: code.to_string(),
        segments: ids.len(),
        previous,
        ensemble: path,
        labels: next.labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub tau: f64,
    pub in_set: InSetReport,
    pub out_of_set: OutOfSetReport,
    pub det: DetCurve,
    pub sweep: SweepReport,
    pub conditional_accuracy: Vec<(f64, Option<f64>)>,
    /// In-set accuracy of the argmax of utterance-averaged posteriors.
    pub utterance_accuracy: f64,
    pub samples: Vec<PipelineSample>,
    pub provenance: serde_json::Value,
}

/// Runs the full pipeline over the test split and writes the report bundle
/// under `reports/`.
pub fn evaluate(cfg: &PipelineConfig, wd: &Workdir, ensemble: Option<&Path>) -> Result<EvaluationReport> {
    let _lock = wd.lock()?;
    let id = Identifier::open(cfg, wd, ensemble)?;
    let plan = wd.load_manifest()?;
    let test = plan.get(SplitTag::Test);
    let in_labels = id.registry.in_set().to_vec();

    let mut samples = Vec::with_capacity(test.len());
    let mut in_set = Vec::new();
    let mut utt: BTreeMap<&Path, (usize, Vec<Array1<f64>>)> = BTreeMap::new();
    for chunk in test.chunks(EVAL_CHUNK) {
        let scored: Vec<(Scored, Classification)> = chunk
            .par_iter()
            .map(|r| {
                let f = FeatureMatrix::load(&wd.feature_path(&r.audio_path, r.segment_index))?;
                let sc = id.score(&f, r.id())?;
                let c = classify(&id.ensemble, &sc.rep)?;
                Ok((sc, c))
            })
            .collect::<Result<_>>()?;
        for (r, (sc, c)) in chunk.iter().zip(scored) {
            let post = sc.posterior;
            let best = (0..post.len())
                .fold(0, |b, i| if post[i] > post[b] { i } else { b });
            let truth_idx = id.registry.in_set_index(&r.language_code);
            if let Some(t) = truth_idx {
                in_set.push(InSetSample {
                    truth: t,
                    posterior: post.to_vec(),
                });
                let e = utt.entry(&r.audio_path).or_insert((t, Vec::new()));
                e.1.push(post.clone());
            }
            samples.push(PipelineSample {
                truth: r.language_code.clone(),
                truth_in_set: truth_idx.is_some(),
                confidence: post[best],
                in_set_prediction: in_labels[best].clone(),
                backend_prediction: c.label,
            });
        }
    }

    let grid = threshold_grid(cfg.grid_points);
    let in_report = in_set_report(&in_set, &in_labels, cfg.tau, cfg.top_n.min(in_labels.len()))?;
    let oos: Vec<(String, String)> = samples
        .iter()
        .filter(|s| !s.truth_in_set)
        .map(|s| (s.truth.clone(), s.backend_prediction.clone()))
        .collect();
    let oos_report = out_of_set_report(&oos)?;
    let conf_in: Vec<f64> = samples.iter().filter(|s| s.truth_in_set).map(|s| s.confidence).collect();
    let conf_out: Vec<f64> = samples.iter().filter(|s| !s.truth_in_set).map(|s| s.confidence).collect();
    let det = det_curve(&conf_in, &conf_out, &grid)?;
    let sweep = total_accuracy_sweep(&samples, &grid)?;
    let conditional = conditional_accuracy_curve(&in_set, &grid);
    let mut utt_correct = 0;
    for (truth, posts) in utt.values() {
        let p = crate::openset::utterance_posterior(posts)?;
        let best = (0..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        utt_correct += (best == *truth) as usize;
    }
    let report = EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tau: cfg.tau,
        in_set: in_report,
        out_of_set: oos_report,
        det,
        sweep,
        conditional_accuracy: conditional,
        utterance_accuracy: utt_correct as f64 / utt.len().max(1) as f64,
        samples,
        provenance: json!({
            "run": provenance(cfg),
            "model_fingerprint": id.model.fingerprint(),
            "ensemble": id.ensemble.provenance,
        }),
    };
    let dir = wd.path(REPORTS);
    write_json(&dir.join("evaluation.json"), &report)?;
    write_if_changed(&dir.join("det.tsv"), report.det.to_tsv().as_bytes())?;
    write_if_changed(&dir.join("sweep.tsv"), report.sweep.to_tsv().as_bytes())?;
    write_if_changed(&dir.join("confusion_in_set.tsv"), report.in_set.confusion.to_tsv().as_bytes())?;
    write_if_changed(
        &dir.join("confusion_out_of_set.tsv"),
        report.out_of_set.confusion.to_tsv().as_bytes(),
    )?;
    let mut cond = String::from("threshold\tconditional_accuracy\n");
    for (t, a) in &report.conditional_accuracy {
        cond.push_str(&format!("{t}\t{}\n", a.map_or("NA".to_string(), |a| a.to_string())));
    }
    write_if_changed(&dir.join("conditional_accuracy.tsv"), cond.as_bytes())?;
    Ok(report)
}
