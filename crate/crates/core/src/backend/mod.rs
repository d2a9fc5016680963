//! Out-of-set back end: TDNN representations reduced by LDA and scored by
//! pLDA, fit as an ensemble over memory-bounded batches.

mod ensemble;
mod io;
mod lda;
mod plda;

use serde::{Deserialize, Serialize};

use crate::error::{LidError, Result};
use crate::features::FeatureMatrix;
use crate::nn::{Mode, TdnnModel};

pub use ensemble::{
    classify, enroll_language, fit_ensemble, fit_member, plan_batches, BatchSource,
    Classification, EnsembleMember, MemorySource, PldaEnsemble, ResidencyGuard, ResidencyMeter,
};
pub use io::{load_ensemble, save_ensemble, ENSEMBLE_MAGIC, ENSEMBLE_VERSION};
pub use lda::{fit_lda, LdaProjector, RANK_TOLERANCE, WHITENING_FLOOR};
pub use plda::{fit_plda, PldaModel, PD_FLOOR};

/// How per-frame embeddings become one vector per segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Row-major concatenation of every frame.
    #[default]
    Concat,
    /// Mean over frames.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub batch_segments: usize,
    pub k: usize,
    pub novelty_threshold: f64,
    pub min_enroll: usize,
    pub seed: u64,
    pub pooling: Pooling,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            batch_segments: 4000,
            k: 18,
            novelty_threshold: 0.5,
            min_enroll: 50,
            seed: 0,
            pooling: Pooling::Concat,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_segments < 4 || self.k == 0 {
            return Err(LidError::Config(
                "batch_segments must be at least 4 and k positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.novelty_threshold) {
            return Err(LidError::Config("novelty_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationVector {
    pub segment_id: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRep {
    pub rep: RepresentationVector,
    pub label: String,
}

/// Eval-mode representation of one segment.
pub fn extract_representation(
    model: &TdnnModel,
    features: &FeatureMatrix,
    pooling: Pooling,
    segment_id: impl Into<String>,
) -> Result<RepresentationVector> {
    let out = model.forward(features, Mode::Eval)?;
    let r = out.representation;
    let values = match pooling {
        Pooling::Concat => r.iter().copied().collect(),
        Pooling::Mean => {
            let t = r.nrows() as f64;
            r.columns()
                .into_iter()
                .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / t) as f32)
                .collect()
        }
    };
    Ok(RepresentationVector {
        segment_id: segment_id.into(),
        values,
    })
}
