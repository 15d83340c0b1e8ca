//! Crowd-feature multi-task pipeline for skin lesion classification.
//!
//! The crate covers the full experiment: ingesting and standardizing noisy
//! per-annotator ABC (asymmetry / border / color) scores, building stratified
//! cross-validation splits, training baseline and multi-task CNN classifiers
//! with an availability-masked auxiliary regression loss, combining the
//! multi-task models through averaged and differential-evolution-optimized
//! ensembles, and reporting fold-averaged ROC-AUC.
//!
//! See the `crowdtask` CLI crate for the command-line pipeline.

pub mod annotations;
pub mod augment;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plots;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
