//! Desk-scale model merging laboratory.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`], [`loss`], [`optim`]: a small feed-forward engine with exact
//!   reverse-mode gradients and Adam.
//! - [`merge`]: task vectors, merge operators and the chain rule into the
//!   layer-wise merging coefficients.
//! - [`adapt`]: expert fine-tuning, entropy-driven coefficient adaptation, the
//!   two-stage head-retraining probe and joint self-labeled merge training.
//! - [`analysis`]: evaluation and diagnostics.
//! - [`theory`]: numerical checks of the merged-loss upper bounds.
//! - [`taskgen`]: synthetic multi-task suites and feature corruptions.
//! - [`workbench`]: configuration, persistence, reports and the experiment
//!   pipeline used by the `mergelab` binary.

pub mod adapt;
pub mod analysis;
mod error;
pub mod linalg;
pub mod loss;
pub mod merge;
pub mod nn;
pub mod optim;
pub mod seed;
pub mod taskgen;
pub mod theory;
pub mod workbench;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use loss::{LossKind, Target};
pub use merge::{CoefficientMatrix, MergedAssembly, TaskVector};
pub use nn::{Activation, Gradients, LayerParams, LayerSlot, ParamSet, TaskId};
pub use optim::AdamState;
pub use taskgen::{SuiteConfig, TaskKind, TaskSuite};
