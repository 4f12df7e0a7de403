//! Body shape-aware textual alignment for visible-infrared person
//! re-identification.
//!
//! The crate provides the full training and evaluation stack at pluggable
//! scale: identity-balanced cross-modal batching, toy convolutional visual
//! encoders with modality-specific stems and a shared trunk, a prompt-tuned
//! text pathway producing identity-level shape/appearance prototypes, the
//! alignment and consistency losses, a two-stage trainer with strict
//! freezing contracts, and CMC/mAP retrieval evaluation under the standard
//! cross-modal protocols.

pub mod autodiff;
pub mod config;
pub mod dataio;
pub mod datamodel;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
