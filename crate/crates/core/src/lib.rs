//! Open-set spoken language identification.
//!
//! The pipeline: [`corpus`] cuts utterances into fixed-length segments,
//! [`features`] turns each segment into 13 MFCCs plus 3 pitch streams per
//! frame, the TDNN in [`nn`] produces a posterior over in-set languages and a
//! per-frame representation, [`openset`] accepts or rejects the posterior
//! against a confidence threshold, and [`backend`] classifies rejected
//! segments with an LDA/pLDA ensemble that can enroll new languages without
//! touching the network. [`eval`] computes the reporting metrics.

pub mod backend;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod openset;

pub use error::{LidError, Result};
