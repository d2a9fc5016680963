//! Confidence thresholding of time-averaged posteriors.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::corpus::LanguageRegistry;
use crate::error::{LidError, Result};

/// Threshold at the equal-error operating point.
pub const DEFAULT_TAU: f64 = 0.65;
/// Threshold maximizing total accuracy.
pub const MAX_ACCURACY_TAU: f64 = 0.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub tau: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy { tau: DEFAULT_TAU }
    }
}

impl ThresholdPolicy {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(LidError::Range(format!("tau {tau} is outside [0, 1]")));
        }
        Ok(ThresholdPolicy { tau })
    }

    pub fn accepts(&self, confidence: f64) -> bool {
        confidence >= self.tau
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenSetDecision {
    pub accepted: bool,
    pub predicted_in_set: Option<String>,
    pub confidence: f64,
    pub top_n: Vec<(String, f64)>,
}

/// One JSON-lines record per decided segment (or utterance when
/// `segment_index` is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub path: String,
    pub segment_index: Option<u64>,
    pub accepted: bool,
    pub prediction: Option<String>,
    pub confidence: f64,
    pub top_n: Vec<(String, f64)>,
}

impl DecisionRecord {
    pub fn new(path: impl Into<String>, segment_index: Option<u64>, d: &OpenSetDecision) -> Self {
        DecisionRecord {
            path: path.into(),
            segment_index,
            accepted: d.accepted,
            prediction: d.predicted_in_set.clone(),
            confidence: d.confidence,
            top_n: d.top_n.clone(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

fn check_len(posterior: ArrayView1<f64>, registry: &LanguageRegistry) -> Result<()> {
    if posterior.len() != registry.in_set().len() {
        return Err(LidError::Shape(format!(
            "posterior has {} entries, registry has {} in-set languages",
            posterior.len(),
            registry.in_set().len()
        )));
    }
    Ok(())
}

/// Class indices sorted by descending probability; equal values keep
/// ascending index order.
fn ranked(posterior: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..posterior.len()).collect();
    idx.sort_by(|&a, &b| posterior[b].total_cmp(&posterior[a]).then(a.cmp(&b)));
    idx
}

pub fn top_n(
    posterior: ArrayView1<f64>,
    n: usize,
    registry: &LanguageRegistry,
) -> Result<Vec<(String, f64)>> {
    check_len(posterior, registry)?;
    if n == 0 || n > posterior.len() {
        return Err(LidError::Range(format!(
            "top-n needs 1 ≤ n ≤ {}, got {n}",
            posterior.len()
        )));
    }
    Ok(ranked(posterior)
        .into_iter()
        .take(n)
        .map(|i| (registry.in_set()[i].clone(), posterior[i]))
        .collect())
}

/// Accepts iff the largest posterior entry reaches `tau`. The returned
/// `top_n` holds the three best candidates (fewer for tiny registries).
pub fn decide(
    posterior: ArrayView1<f64>,
    policy: &ThresholdPolicy,
    registry: &LanguageRegistry,
) -> Result<OpenSetDecision> {
    decide_with_top(posterior, policy, registry, 3)
}

pub fn decide_with_top(
    posterior: ArrayView1<f64>,
    policy: &ThresholdPolicy,
    registry: &LanguageRegistry,
    n: usize,
) -> Result<OpenSetDecision> {
    check_len(posterior, registry)?;
    let top = top_n(posterior, n.clamp(1, posterior.len()), registry)?;
    let confidence = top[0].1;
    let accepted = policy.accepts(confidence);
    Ok(OpenSetDecision {
        accepted,
        predicted_in_set: accepted.then(|| top[0].0.clone()),
        confidence,
        top_n: top,
    })
}

/// Utterance-level posterior: the mean of its segments' averaged posteriors.
pub fn utterance_posterior(segment_posteriors: &[Array1<f64>]) -> Result<Array1<f64>> {
    let first = segment_posteriors
        .first()
        .ok_or_else(|| LidError::EmptyInput("utterance has no segments".into()))?;
    let mut sum = Array1::zeros(first.len());
    for p in segment_posteriors {
        if p.len() != first.len() {
            return Err(LidError::Shape("segment posteriors differ in length".into()));
        }
        sum += p;
    }
    Ok(sum / segment_posteriors.len() as f64)
}
