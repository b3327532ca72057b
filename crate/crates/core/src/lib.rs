//! A desk-scale laboratory for visual attention intervention in a toy
//! multimodal decoder.
//!
//! The crate is organised as a pipeline:
//!
//! - [`model`]: miniature decoder with attention/state hooks and attention gradients
//! - [`bench`]: synthetic scenes, rendering, POPE-style probes
//! - [`trainer`]: training that plants omission and co-occurrence biases
//! - [`lens`]: localization heads, HCVR masks, centroid regions, dispersion
//! - [`intervene`]: attention enhancement, steering directions, head saliency, the full calibration pipeline
//! - [`policy`]: greedy, visual-contrast, low-/high-token contrast decoders
//! - [`eval`]: POPE and CHAIR metrics with omission/fabrication counts
//! - [`experiment`]: config-driven runs, sweeps and report bundles

pub mod bench;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod intervene;
pub mod lens;
pub mod model;
pub mod policy;
pub mod tokens;
pub mod trainer;

pub use error::{LabError, Result};
