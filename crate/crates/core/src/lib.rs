//! Batch pipeline for grading pulmonary nodule invasiveness from masked 3D
//! volumes: radiomics feature extraction, statistical feature selection, a
//! small trainable 3D-CNN encoder, and a feature-fusion classifier with the
//! usual single-source baselines.

pub mod benchmark;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod radiomics;
pub mod select;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dataset, InvasivenessLabel, Mask, NoduleSample, Volume};
