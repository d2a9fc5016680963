//! Frame-level TDNN classifier: forward/backward passes, AdamW training
//! and the model file format.
//!
//! The network is generic over the float type. Production models use `f32`;
//! gradient checks run the same code in `f64`.

mod model;
mod optim;
mod tdnn;
mod train;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use model::{load_model, save_model, TdnnModel, MODEL_MAGIC, MODEL_VERSION};
pub use optim::{AdamW, AdamWConfig};
pub use tdnn::{
    softmax_cross_entropy, softmax_rows, BatchCache, LayerGrads, Mode, Tdnn, TdnnConfig,
    TdnnLayer, TdnnOutput,
};
pub use train::{average_posterior, EpochStats, TrainConfig, Trainer};

pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn cast<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("finite cast")
}
