//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use lidkit::backend::{
    fit_ensemble, fit_lda, fit_plda, BackendConfig, BatchSource, LabeledRep,
    RepresentationVector, ResidencyMeter,
};
use lidkit::cli::{
    enroll, evaluate, fit_backend, identify, prepare, train, EvaluationReport, FitSummary,
    PipelineConfig, RegistrySpec, TrainSummary, Workdir,
};
use lidkit::corpus::{generate_synthetic_corpus, read_wav, AudioSegment, SyntheticSpec};
use lidkit::features::{FeatureExtractor, MfccConfig, MfccExtractor};
use lidkit::nn::{load_model, softmax_cross_entropy, Mode, Tdnn, TdnnConfig};
use lidkit::Result;

// Tolerances and thresholds.
const GRAD_EPS: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-4;
/// Relative errors are taken against max(|a|, |b|, floor) so gradients that
/// are exactly zero do not divide rounding noise by zero.
const GRAD_REL_FLOOR: f64 = 1e-5;
const GRAD_MIN_INSTANCES: usize = 20;
/// Instances with a ReLU input closer than this to zero are skipped.
const KINK_MARGIN: f64 = 1e-3;
const GRAD_MAX_RUNTIME: Duration = Duration::from_secs(60);
const POSTERIOR_SUM_TOL: f64 = 1e-6;
const MIN_VAL_ACCURACY: f64 = 0.90;
const MIN_OUT_OF_SET_ACCURACY: f64 = 0.70;
const MAX_EER: f64 = 0.25;
const MAX_EPOCHS: usize = 15;
const END_TO_END_MAX_RUNTIME: Duration = Duration::from_secs(30 * 60);
const MIN_ENROLL_SEGMENTS: usize = 50;
const MIN_ENROLLED_ACCURACY: f64 = 0.60;
const MAX_OUT_OF_SET_DEGRADATION: f64 = 0.10;
const ENROLL_MAX_RUNTIME: Duration = Duration::from_secs(5 * 60);
const PLDA_TOL: f64 = 0.05;
const MAX_RESIDENT: usize = 4000;
const F0_REL_TOL: f64 = 0.05;

const SEED: u64 = 20_240_611;
const IN_SET: [&str; 6] = ["sy0", "sy2", "sy4", "sy6", "sy8", "sy9"];
const OUT_OF_SET: [&str; 3] = ["sy1", "sy3", "sy5"];
const ENROLLED: &str = "sy7";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

// ---------------------------------------------------------------- 1

fn tiny(dims: &[usize], contexts: &[usize], input_dim: usize) -> TdnnConfig {
    TdnnConfig {
        input_dim,
        layer_dims: dims.to_vec(),
        contexts: contexts.to_vec(),
        dilations: vec![1; dims.len()],
        strides: vec![1; dims.len()],
        bn_eps: 1e-5,
    }
}

fn param(net: &mut Tdnn<f64>, layer: usize, tensor: usize, i: usize) -> &mut f64 {
    let l = &mut net.layers[layer];
    match tensor {
        0 => &mut l.weight.as_slice_mut().unwrap()[i],
        1 => &mut l.bias[i],
        2 => &mut l.gamma[i],
        _ => &mut l.beta[i],
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = tiny(&[5, 4, 3], &[3, 2, 1], 4);
    let mut accepted = 0;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for seed in 0..200u64 {
        if accepted == 30 {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Tdnn::<f64>::init(cfg.clone(), seed).unwrap();
        for l in &mut net.layers {
            l.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
            l.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let xs: Vec<Array2<f64>> = Array3::from_shape_fn((3, 10, 4), |_| rng.random_range(-1.0..1.0))
            .outer_iter()
            .map(|s| s.to_owned())
            .collect();
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
        let cache = net.forward_train(&xs).unwrap();
        if cache.relu_margin(&net) < KINK_MARGIN {
            continue;
        }
        let (_, dlogits) = softmax_cross_entropy(&cache.logits, &labels);
        let grads = net.backward(&cache, dlogits);
        let loss = |n: &Tdnn<f64>| softmax_cross_entropy(&n.forward_train(&xs).unwrap().logits, &labels).0;
        for li in 0..net.layers.len() {
            for tensor in 0..4 {
                let len = if tensor == 0 { net.layers[li].weight.len() } else { net.layers[li].out_dim };
                for i in 0..len {
                    let analytic = match tensor {
                        0 => grads[li].weight.as_slice().unwrap()[i],
                        1 => grads[li].bias[i],
                        2 => grads[li].gamma[i],
                        _ => grads[li].beta[i],
                    };
                    let mut plus = net.clone();
                    *param(&mut plus, li, tensor, i) += GRAD_EPS;
                    let mut minus = net.clone();
                    *param(&mut minus, li, tensor, i) -= GRAD_EPS;
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * GRAD_EPS);
                    let err = (analytic - numeric).abs()
                        / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
                    worst = worst.max(err);
                    checked += 1;
                }
            }
        }
        accepted += 1;
    }
    let elapsed = start.elapsed();
    outcome(
        accepted >= GRAD_MIN_INSTANCES && worst < GRAD_REL_TOL && elapsed < GRAD_MAX_RUNTIME,
        format!(
            "{accepted} instances, {checked} parameters, max rel err {worst:.2e} (tol {GRAD_REL_TOL:.0e}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn closed_form_parameters(cfg: &TdnnConfig) -> usize {
    // Per layer: context·in·out weights, out biases, out BN scales and shifts.
    let mut d_in = cfg.input_dim;
    let mut total = 0;
    for (&d_out, &c) in cfg.layer_dims.iter().zip(&cfg.contexts) {
        total += c * d_in * d_out + 3 * d_out;
        d_in = d_out;
    }
    total
}

fn criterion_2() -> Outcome {
    let cfg = TdnnConfig::default();
    let net = Tdnn::<f32>::init(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Array2::from_shape_fn((398, 16), |_| rng.random_range(-1.0f32..1.0));
    let out = net.forward(x.view(), Mode::Eval).unwrap();
    let post = out.posterior();
    let worst_sum = post
        .rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0f64, f64::max);
    let expected = 3 * 16 * 256 + 3 * 256 + 2 * (3 * 256 * 256 + 3 * 256) + 2 * (256 * 256 + 3 * 256) + (256 * 32 + 3 * 32);
    let counted = net.parameter_count();
    let pass = post.dim() == (392, 32)
        && out.representation.dim() == (392, 256)
        && worst_sum <= POSTERIOR_SUM_TOL
        && counted == closed_form_parameters(&cfg)
        && counted == expected;
    outcome(
        pass,
        format!(
            "posterior {:?}, representation {:?}, max |row sum - 1| {worst_sum:.1e}, parameters {counted} (closed form {expected})",
            post.dim(),
            out.representation.dim()
        ),
    )
}

// ---------------------------------------------------------------- 3, 4, 7 (shared pipeline)

struct Pipeline {
    train: TrainSummary,
    fit: FitSummary,
    before: EvaluationReport,
    after: EvaluationReport,
    end_to_end: Duration,
    enroll_segments: usize,
    enroll_error: Option<String>,
    enrolled_correct: usize,
    enrolled_total: usize,
    fingerprint_before: String,
    fingerprint_after: String,
    model_hash_before: String,
    model_hash_after: String,
    old_ensemble_unchanged: bool,
    enroll_time: Duration,
}

fn sha(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn pipeline_config(root: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        dataset_root: Some(root.to_path_buf()),
        registry: Some(RegistrySpec {
            in_set: IN_SET.iter().map(|s| s.to_string()).collect(),
            out_of_set: OUT_OF_SET.iter().map(|s| s.to_string()).collect(),
        }),
        seed: SEED,
        ..Default::default()
    };
    cfg.train.epochs = MAX_EPOCHS;
    cfg.train.batch_size = 32;
    cfg.backend.min_enroll = MIN_ENROLL_SEGMENTS;
    cfg.resolve().unwrap()
}

/// Splits the enrolled language's recordings into an enrollment set of at
/// least `MIN_ENROLL_SEGMENTS` segments and a held-out remainder.
fn split_enrollment(corpus: &Path, base: &Path, segment_s: f64) -> (PathBuf, Vec<PathBuf>) {
    let enroll_dir = base.join("sy7_enroll");
    let held_dir = base.join("sy7_heldout");
    std::fs::create_dir_all(&enroll_dir).unwrap();
    std::fs::create_dir_all(&held_dir).unwrap();
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(corpus.join(ENROLLED))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "wav"))
        .collect();
    wavs.sort();
    let mut segments = 0;
    let mut held = Vec::new();
    for w in wavs {
        let a = read_wav(&w).unwrap();
        let n = (a.duration_s() / segment_s).floor() as usize;
        let dest = if segments < MIN_ENROLL_SEGMENTS { &enroll_dir } else { &held_dir };
        if segments < MIN_ENROLL_SEGMENTS {
            segments += n;
        }
        let to = dest.join(w.file_name().unwrap());
        std::fs::copy(&w, &to).unwrap();
        if dest == &held_dir {
            held.push(to);
        }
    }
    (enroll_dir, held)
}

fn run_pipeline() -> Pipeline {
    let base = scratch("pipeline");
    let corpus_root = base.join("corpus");
    let mut spec = SyntheticSpec::new(10, 4, 3.0, SEED);
    spec.minutes_override.insert(7, 8.0);
    generate_synthetic_corpus(&spec, &corpus_root).unwrap();
    let cfg = pipeline_config(&corpus_root);
    let wd = Workdir::new(base.join("work"));

    let start = Instant::now();
    prepare(&cfg, &wd).unwrap();
    let train_summary = train(&cfg, &wd).unwrap();
    let fit = fit_backend(&cfg, &wd).unwrap();
    let v1 = wd.ensemble_path(1);
    let before = evaluate(&cfg, &wd, Some(&v1)).unwrap();
    let end_to_end = start.elapsed();

    let registry = wd.load_registry().unwrap();
    let fingerprint_before = load_model(&wd.path("model.tdnn"), Some(&registry)).unwrap().fingerprint();
    let model_hash_before = sha(&wd.path("model.tdnn"));
    let v1_hash = sha(&v1);

    let (enroll_dir, held) = split_enrollment(&corpus_root, &base, cfg.segment.segment_s);
    let start = Instant::now();
    let summary = enroll(&cfg, &wd, ENROLLED, &enroll_dir);
    let (enroll_segments, enroll_error) = match &summary {
        Ok(s) => (s.segments, None),
        Err(e) => (0, Some(e.to_string())),
    };
    let (mut enrolled_correct, mut enrolled_total) = (0, 0);
    let mut after = before.clone();
    if let Ok(s) = &summary {
        for r in identify(&cfg, &wd, &held, Some(&s.ensemble)).unwrap() {
            if r.decision.segment_index.is_none() {
                continue;
            }
            enrolled_total += 1;
            let label = r.backend.as_ref().map(|b| b.label.as_str());
            enrolled_correct += (!r.decision.accepted && label == Some(ENROLLED)) as usize;
        }
        after = evaluate(&cfg, &wd, Some(&s.ensemble)).unwrap();
    }
    let enroll_time = start.elapsed();
    let registry = wd.load_registry().unwrap();
    let fingerprint_after = load_model(&wd.path("model.tdnn"), Some(&registry)).unwrap().fingerprint();
    Pipeline {
        train: train_summary,
        fit,
        before,
        after,
        end_to_end,
        enroll_segments,
        enroll_error,
        enrolled_correct,
        enrolled_total,
        fingerprint_before,
        fingerprint_after,
        model_hash_before,
        model_hash_after: sha(&wd.path("model.tdnn")),
        old_ensemble_unchanged: sha(&v1) == v1_hash,
        enroll_time,
    }
}

fn criterion_3(p: &Pipeline) -> Outcome {
    let last = p.train.epochs.last().unwrap();
    let val = last.val_accuracy;
    let oos = p.before.out_of_set.accuracy;
    let eer = p.before.det.eer;
    let pass = p.train.epochs.len() <= MAX_EPOCHS
        && val > MIN_VAL_ACCURACY
        && oos > MIN_OUT_OF_SET_ACCURACY
        && eer < MAX_EER
        && p.end_to_end < END_TO_END_MAX_RUNTIME;
    outcome(
        pass,
        format!(
            "{} epochs, val acc {val:.3} (> {MIN_VAL_ACCURACY}), out-of-set acc {oos:.3} over {} segments (> {MIN_OUT_OF_SET_ACCURACY}), EER {eer:.3} (< {MAX_EER}), {} in-set test segments, {} back-end members, {:.0}s",
            p.train.epochs.len(),
            p.before.out_of_set.n_samples,
            p.before.in_set.n_samples,
            p.fit.members,
            p.end_to_end.as_secs_f64()
        ),
    )
}

fn criterion_4(p: &Pipeline) -> Outcome {
    if let Some(e) = &p.enroll_error {
        return outcome(false, format!("enrollment failed: {e}"));
    }
    let acc = p.enrolled_correct as f64 / p.enrolled_total.max(1) as f64;
    let degradation = p.before.out_of_set.accuracy - p.after.out_of_set.accuracy;
    let pass = p.enroll_segments >= MIN_ENROLL_SEGMENTS
        && p.enrolled_total > 0
        && acc > MIN_ENROLLED_ACCURACY
        && degradation < MAX_OUT_OF_SET_DEGRADATION
        && p.fingerprint_before == p.fingerprint_after
        && p.model_hash_before == p.model_hash_after
        && p.old_ensemble_unchanged
        && p.enroll_time < ENROLL_MAX_RUNTIME;
    outcome(
        pass,
        format!(
            "enrolled from {} segments, held-out acc {acc:.3} on {} segments (> {MIN_ENROLLED_ACCURACY}), prior out-of-set acc {:.3} -> {:.3} (drop < {MAX_OUT_OF_SET_DEGRADATION}), TDNN fingerprint unchanged: {}, old ensemble untouched: {}, {:.0}s",
            p.enroll_segments,
            p.enrolled_total,
            p.before.out_of_set.accuracy,
            p.after.out_of_set.accuracy,
            p.fingerprint_before == p.fingerprint_after,
            p.old_ensemble_unchanged,
            p.enroll_time.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let n = 4000;
    let mut xs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for (mean, label) in [(-1.0, "a"), (1.0, "b")] {
        for _ in 0..n {
            xs.push(mean + rng.sample::<f64, _>(normal));
            labels.push(label.to_string());
        }
    }
    let model = fit_plda(&DMatrix::from_column_slice(2 * n, 1, &xs), &labels).unwrap();
    // Unit-variance classes at ±1 with equal priors: P(b | x) = 1 / (1 + e^{-2x}).
    let mut worst: f64 = 0.0;
    for i in 0..101 {
        let x = -4.0 + 8.0 * i as f64 / 100.0;
        let bayes = 1.0 / (1.0 + (-2.0 * x).exp());
        let p = model.posteriors(&DVector::from_element(1, x)).unwrap();
        worst = worst.max((p[1] - bayes).abs()).max((p[0] - (1.0 - bayes)).abs());
    }
    outcome(
        worst <= PLDA_TOL,
        format!("max |pLDA - Bayes| {worst:.4} over 101 probes (tol {PLDA_TOL})"),
    )
}

// ---------------------------------------------------------------- 6

/// Produces representation vectors on request so nothing but the requested
/// batch ever exists.
struct GeneratedSource {
    catalog: Vec<(String, String)>,
    dim: usize,
    largest_request: usize,
}

impl BatchSource for GeneratedSource {
    fn catalog(&self) -> Result<Vec<(String, String)>> {
        Ok(self.catalog.clone())
    }

    fn load(&mut self, ids: &[String]) -> Result<Vec<LabeledRep>> {
        self.largest_request = self.largest_request.max(ids.len());
        let labels: BTreeMap<&str, &str> = self.catalog.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        Ok(ids
            .iter()
            .map(|id| {
                let label = labels[id.as_str()].to_string();
                let class: u64 = label[1..].parse().unwrap();
                let h = Sha256::digest(id.as_bytes());
                let mut rng = ChaCha8Rng::from_seed(h.into());
                let values = (0..self.dim)
                    .map(|d| rng.random_range(-1.0f32..1.0) + if d as u64 == class { 3.0 } else { 0.0 })
                    .collect();
                LabeledRep {
                    rep: RepresentationVector { segment_id: id.clone(), values },
                    label,
                }
            })
            .collect())
    }
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut dims = Vec::new();
    let mut rank_ok = true;
    for c in [2usize, 5, 19, 20] {
        let per = 12;
        let d = 30;
        let mut x = DMatrix::zeros(c * per, d);
        let mut labels = Vec::new();
        for k in 0..c {
            for j in 0..per {
                for f in 0..d {
                    x[(k * per + j, f)] = rng.random_range(-1.0..1.0) + if f == k % d { 4.0 } else { 0.0 };
                }
                labels.push(format!("c{k:02}"));
            }
        }
        let lda = fit_lda(&x, &labels, 18).unwrap();
        rank_ok &= lda.output_dim() == 18.min(c - 1);
        dims.push(format!("C={c}: {}", lda.output_dim()));
    }

    let catalog: Vec<(String, String)> = (0..12_000).map(|i| (format!("seg{i:05}"), format!("c{}", i % 5))).collect();
    let mut source = GeneratedSource { catalog, dim: 12, largest_request: 0 };
    let meter = ResidencyMeter::new();
    let cfg = BackendConfig { batch_segments: MAX_RESIDENT, k: 18, ..Default::default() };
    let ensemble = fit_ensemble(&mut source, &cfg, &meter).unwrap();
    let pass = rank_ok && meter.peak() <= MAX_RESIDENT && source.largest_request <= MAX_RESIDENT && ensemble.members.len() == 3;
    outcome(
        pass,
        format!(
            "projection dims [{}]; 12000 segments -> {} members, peak resident {} (<= {MAX_RESIDENT}), largest load {}",
            dims.join(", "),
            ensemble.members.len(),
            meter.peak(),
            source.largest_request
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7(p: &Pipeline) -> Outcome {
    let r = &p.before;
    let tops: Vec<f64> = r.in_set.top_n_accuracies.values().copied().collect();
    let top_ok = tops.windows(2).all(|w| w[0] <= w[1]);
    let det = &r.det.points;
    let first = det.first().unwrap();
    let last = det.last().unwrap();
    let det_ok = first.threshold == 0.0
        && first.miss == 0.0
        && first.false_alarm == 1.0
        && last.threshold == 1.0
        && last.miss == 1.0
        && last.false_alarm == 0.0;

    // Threshold 0 labels everything in-set; threshold 1 sends everything to
    // the back end (no averaged posterior reaches exactly 1 here).
    let n = r.samples.len() as f64;
    let all_in = r.samples.iter().filter(|s| s.truth_in_set && s.in_set_prediction == s.truth).count() as f64 / n;
    let all_out = r.samples.iter().filter(|s| !s.truth_in_set && s.backend_prediction == s.truth).count() as f64 / n;
    let saturated = r.samples.iter().any(|s| s.confidence >= 1.0);
    let sweep = &r.sweep.points;
    let endpoints_ok = !saturated
        && (sweep[0].1 - all_in).abs() < 1e-12
        && (sweep.last().unwrap().1 - all_out).abs() < 1e-12
        && (r.sweep.endpoint_all_in_set - all_in).abs() < 1e-12
        && (r.sweep.endpoint_all_out_of_set - all_out).abs() < 1e-12;

    let cond: Vec<f64> = r.conditional_accuracy.iter().filter_map(|c| c.1).collect();
    let cond_ok = !cond.is_empty() && cond.windows(2).all(|w| w[0] <= w[1] + 1e-12);
    outcome(
        top_ok && det_ok && endpoints_ok && cond_ok,
        format!(
            "top-N {tops:?} monotone: {top_ok}; DET endpoints: {det_ok}; sweep endpoints {:.4}/{:.4} vs formulas {all_in:.4}/{all_out:.4}: {endpoints_ok}; conditional accuracy non-decreasing over {} thresholds: {cond_ok}",
            sweep[0].1,
            sweep.last().unwrap().1,
            cond.len()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn hash_tree(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), sha(&p));
            }
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let base = scratch("determinism");
    let corpus = base.join("corpus");
    generate_synthetic_corpus(&SyntheticSpec::new(4, 3, 2.0, 11), &corpus).unwrap();
    let mut cfg = PipelineConfig {
        dataset_root: Some(corpus),
        registry: Some(RegistrySpec {
            in_set: vec!["sy0".into(), "sy2".into()],
            out_of_set: vec!["sy1".into(), "sy3".into()],
        }),
        seed: 11,
        ..Default::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    let cfg = cfg.resolve().unwrap();
    let wd = Workdir::new(base.join("work"));
    let run = || {
        let _ = std::fs::remove_dir_all(&wd.root);
        prepare(&cfg, &wd).unwrap();
        train(&cfg, &wd).unwrap();
        fit_backend(&cfg, &wd).unwrap();
        hash_tree(&wd.root)
    };
    let first = run();
    let rerun_writes = prepare(&cfg, &wd).unwrap().files_written;
    let second = run();
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let required = ["manifest.tsv", "registry.json", "model.tdnn", "model.best.tdnn", "train_log.jsonl", "ensemble.v1.lide"];
    let present = required.iter().all(|f| first.contains_key(Path::new(f)));
    outcome(
        differing.is_empty() && present && rerun_writes == 0,
        format!(
            "{} artifacts compared, differing {differing:?}, idempotent prepare rewrites {rerun_writes}",
            first.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

fn criterion_9() -> Outcome {
    let rate = 16_000u32;
    let n = 4 * rate as usize;
    let saw: Vec<f32> = (0..n)
        .map(|i| {
            let ph = (i as f64 * 220.0 / rate as f64).fract();
            (0.5 * (2.0 * ph - 1.0)) as f32
        })
        .collect();
    let ex = FeatureExtractor::new(&MfccConfig::default(), rate).unwrap();
    let feats = ex.extract(&AudioSegment::detached(saw, rate)).unwrap();
    let mut f0: Vec<f64> = feats.frames.column(14).iter().map(|&v| (v as f64).exp()).collect();
    f0.sort_by(f64::total_cmp);
    let median = f0[f0.len() / 2];
    let f0_ok = (median / 220.0 - 1.0).abs() <= F0_REL_TOL;

    let cfg = MfccConfig::default();
    let tone: Vec<f32> = (0..n)
        .map(|i| (0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / rate as f64).sin()) as f32)
        .collect();
    let mel = MfccExtractor::new(&cfg, rate).unwrap().mel_energies(&tone);
    let mean: Vec<f64> = mel.columns().into_iter().map(|c| c.mean().unwrap()).collect();
    let argmax = (0..mean.len()).fold(0, |b, i| if mean[i] > mean[b] { i } else { b });
    // Filter centers are equally spaced in mel between the band edges.
    let (lo, hi) = (hz_to_mel(cfg.low_freq), hz_to_mel(cfg.high_freq));
    let step = (hi - lo) / (cfg.n_mel_bins + 1) as f64;
    let target = hz_to_mel(1000.0);
    let expected = (0..cfg.n_mel_bins)
        .min_by(|&a, &b| {
            let da = (lo + (a + 1) as f64 * step - target).abs();
            let db = (lo + (b + 1) as f64 * step - target).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    let frames = feats.num_frames();
    outcome(
        f0_ok && argmax == expected && frames == 398,
        format!("median F0 {median:.1} Hz (220 ± 5%), 1 kHz tone peaks in bin {argmax} (expected {expected}), 4 s -> {frames} frames"),
    )
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        })
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "gradient correctness", guarded(criterion_1)));
    results.push((2, "architecture arithmetic", guarded(criterion_2)));
    results.push((5, "pLDA oracle", guarded(criterion_5)));
    results.push((6, "LDA rank law and memory bound", guarded(criterion_6)));
    results.push((9, "feature sanity", guarded(criterion_9)));
    results.push((8, "determinism", guarded(criterion_8)));
    let pipeline = std::panic::catch_unwind(run_pipeline);
    match &pipeline {
        Ok(p) => {
            results.push((3, "synthetic end-to-end", guarded(|| criterion_3(p))));
            results.push((4, "enrollment", guarded(|| criterion_4(p))));
            results.push((7, "threshold and metric properties", guarded(|| criterion_7(p))));
        }
        Err(_) => {
            for (i, name) in [(3, "synthetic end-to-end"), (4, "enrollment"), (7, "threshold and metric properties")] {
                results.push((i, name, outcome(false, "pipeline run panicked".into())));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (i, name, o) in &results {
        println!("{} criterion {i} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
