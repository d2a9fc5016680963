//! Evaluation metrics: in-set and out-of-set accuracy, confusion matrices,
//! DET curves with EER, and the total-accuracy threshold sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LidError, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_GRID_POINTS: usize = 201;

/// `n` evenly spaced thresholds on [0, 1].
pub fn threshold_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// Row = truth, column = prediction.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    fn index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| LidError::Shape(format!("label {label} is not in the confusion matrix")))
    }

    pub fn add(&mut self, truth: &str, predicted: &str) -> Result<()> {
        let (t, p) = (self.index(truth)?, self.index(predicted)?);
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("truth\\predicted");
        for l in &self.labels {
            write!(s, "\t{l}").unwrap();
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(l);
            for c in row {
                write!(s, "\t{c}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// One in-set test segment: its true class index and averaged posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct InSetSample {
    pub truth: usize,
    pub posterior: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InSetReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub top_n_accuracies: BTreeMap<usize, f64>,
    pub tau: f64,
    /// Fraction of samples whose confidence reaches `tau`.
    pub accepted_fraction: f64,
    /// Accuracy among accepted samples; `None` when none are accepted.
    pub conditional_accuracy: Option<f64>,
    pub confusion: ConfusionMatrix,
}

/// Rank of `truth` in a descending ordering that breaks ties by index.
fn rank_of(posterior: &[f64], truth: usize) -> usize {
    let p = posterior[truth];
    posterior
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < truth))
        .count()
}

fn argmax(v: &[f64]) -> usize {
    rank_order(v)[0]
}

fn rank_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

pub fn in_set_report(samples: &[InSetSample], labels: &[String], tau: f64, max_n: usize) -> Result<InSetReport> {
    if samples.is_empty() {
        return Err(LidError::EmptyInput("no in-set test samples".into()));
    }
    let c = labels.len();
    if let Some(s) = samples.iter().find(|s| s.posterior.len() != c || s.truth >= c) {
        return Err(LidError::Shape(format!(
            "sample with {} posterior entries and truth {} does not fit {c} classes",
            s.posterior.len(),
            s.truth
        )));
    }
    let n = samples.len() as f64;
    let mut confusion = ConfusionMatrix::new(labels.to_vec());
    let mut hits_at_rank = vec![0u64; c];
    let (mut accepted, mut accepted_correct) = (0u64, 0u64);
    for s in samples {
        let pred = argmax(&s.posterior);
        confusion.counts[s.truth][pred] += 1;
        hits_at_rank[rank_of(&s.posterior, s.truth)] += 1;
        if s.posterior[pred] >= tau {
            accepted += 1;
            accepted_correct += (pred == s.truth) as u64;
        }
    }
    let mut top_n_accuracies = BTreeMap::new();
    let mut cumulative = 0;
    for (r, h) in hits_at_rank.iter().enumerate().take(max_n.min(c)) {
        cumulative += h;
        top_n_accuracies.insert(r + 1, cumulative as f64 / n);
    }
    Ok(InSetReport {
        n_samples: samples.len(),
        accuracy: hits_at_rank[0] as f64 / n,
        top_n_accuracies,
        tau,
        accepted_fraction: accepted as f64 / n,
        conditional_accuracy: (accepted > 0).then(|| accepted_correct as f64 / accepted as f64),
        confusion,
    })
}

/// Conditional in-set accuracy at each threshold (`None` where nothing is
/// accepted).
pub fn conditional_accuracy_curve(samples: &[InSetSample], grid: &[f64]) -> Vec<(f64, Option<f64>)> {
    let scored: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| {
            let p = argmax(&s.posterior);
            (s.posterior[p], p == s.truth)
        })
        .collect();
    grid.iter()
        .map(|&t| {
            let acc: Vec<bool> = scored.iter().filter(|s| s.0 >= t).map(|s| s.1).collect();
            let v = (!acc.is_empty()).then(|| acc.iter().filter(|&&b| b).count() as f64 / acc.len() as f64);
            (t, v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutOfSetReport {
    pub n_samples: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// `pairs` holds (truth, predicted) labels.
pub fn out_of_set_report(pairs: &[(String, String)]) -> Result<OutOfSetReport> {
    if pairs.is_empty() {
        return Err(LidError::EmptyInput("no out-of-set test samples".into()));
    }
    let mut labels: Vec<String> = pairs.iter().flat_map(|(t, p)| [t.clone(), p.clone()]).collect();
    labels.sort();
    labels.dedup();
    let mut confusion = ConfusionMatrix::new(labels);
    for (t, p) in pairs {
        confusion.add(t, p)?;
    }
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    Ok(OutOfSetReport {
        n_samples: pairs.len(),
        accuracy: correct as f64 / pairs.len() as f64,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub miss: f64,
    pub false_alarm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
    pub eer: f64,
    pub eer_threshold: f64,
}

impl DetCurve {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("threshold\tmiss\tfalse_alarm\n");
        for p in &self.points {
            writeln!(s, "{}\t{}\t{}", p.threshold, p.miss, p.false_alarm).unwrap();
        }
        s
    }
}

/// Miss = in-set confidence below the threshold; false alarm = out-of-set
/// confidence at or above it. EER by linear interpolation where the two
/// curves cross.
pub fn det_curve(in_set: &[f64], out_of_set: &[f64], grid: &[f64]) -> Result<DetCurve> {
    if in_set.is_empty() || out_of_set.is_empty() || grid.is_empty() {
        return Err(LidError::EmptyInput("DET curve needs both score lists and a grid".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(LidError::Range("threshold grid must be sorted".into()));
    }
    let mut ins = in_set.to_vec();
    let mut outs = out_of_set.to_vec();
    ins.sort_by(f64::total_cmp);
    outs.sort_by(f64::total_cmp);
    let points: Vec<DetPoint> = grid
        .iter()
        .map(|&t| DetPoint {
            threshold: t,
            miss: ins.partition_point(|&c| c < t) as f64 / ins.len() as f64,
            false_alarm: (outs.len() - outs.partition_point(|&c| c < t)) as f64 / outs.len() as f64,
        })
        .collect();

    let diff = |p: &DetPoint| p.miss - p.false_alarm;
    let (eer, eer_threshold) = match points.iter().position(|p| diff(p) >= 0.0) {
        Some(0) => ((points[0].miss + points[0].false_alarm) / 2.0, points[0].threshold),
        Some(i) => {
            let (a, b) = (&points[i - 1], &points[i]);
            let (da, db) = (diff(a), diff(b));
            let w = da / (da - db);
            let lerp = |x: f64, y: f64| x + w * (y - x);
            (
                lerp(a.miss, b.miss) * 0.5 + lerp(a.false_alarm, b.false_alarm) * 0.5,
                lerp(a.threshold, b.threshold),
            )
        }
        None => {
            let p = points
                .iter()
                .min_by(|a, b| diff(a).abs().total_cmp(&diff(b).abs()))
                .unwrap();
            ((p.miss + p.false_alarm) / 2.0, p.threshold)
        }
    };
    Ok(DetCurve {
        points,
        eer,
        eer_threshold,
    })
}

/// One test segment seen through the whole open-set pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSample {
    pub truth: String,
    pub truth_in_set: bool,
    /// Maximum averaged TDNN posterior.
    pub confidence: f64,
    pub in_set_prediction: String,
    pub backend_prediction: String,
}

impl PipelineSample {
    pub fn correct_at(&self, tau: f64) -> bool {
        if self.confidence >= tau {
            self.truth_in_set && self.in_set_prediction == self.truth
        } else {
            !self.truth_in_set && self.backend_prediction == self.truth
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<(f64, f64)>,
    pub argmax_threshold: f64,
    pub max_accuracy: f64,
    /// In-set-correct count over all samples.
    pub endpoint_all_in_set: f64,
    /// Out-of-set-correct count over all samples.
    pub endpoint_all_out_of_set: f64,
    pub in_set_fraction: f64,
}

impl SweepReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("threshold\ttotal_accuracy\n");
        for (t, a) in &self.points {
            writeln!(s, "{t}\t{a}").unwrap();
        }
        s
    }
}

pub fn total_accuracy_sweep(samples: &[PipelineSample], grid: &[f64]) -> Result<SweepReport> {
    if samples.is_empty() || grid.is_empty() {
        return Err(LidError::EmptyInput("sweep needs samples and a grid".into()));
    }
    let n = samples.len() as f64;
    let points: Vec<(f64, f64)> = grid
        .iter()
        .map(|&t| (t, samples.iter().filter(|s| s.correct_at(t)).count() as f64 / n))
        .collect();
    let (argmax_threshold, max_accuracy) = points
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, p| if p.1 > best.1 { p } else { best });
    let in_correct = samples
        .iter()
        .filter(|s| s.truth_in_set && s.in_set_prediction == s.truth)
        .count();
    let out_correct = samples
        .iter()
        .filter(|s| !s.truth_in_set && s.backend_prediction == s.truth)
        .count();
    Ok(SweepReport {
        points,
        argmax_threshold,
        max_accuracy,
        endpoint_all_in_set: in_correct as f64 / n,
        endpoint_all_out_of_set: out_correct as f64 / n,
        in_set_fraction: samples.iter().filter(|s| s.truth_in_set).count() as f64 / n,
    })
}
