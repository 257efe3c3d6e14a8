//! Multi-granularity classification with structured features and concepts.
//!
//! Features and classifier weights at every granularity level are split
//! along channels into common, specific and confounding blocks. Training
//! combines per-level cross-entropy, fused-label alignment and losses that
//! shape the three blocks; inference weights the blocks explicitly.
//!
//! Modules, bottom up:
//!
//! * [`numkernel`]: tensors, reverse-mode differentiation, probability and
//!   rank helpers;
//! * [`hierarchy`]: label hierarchies, datasets and the synthetic generator;
//! * [`model`]: extractor, granularity transition layers, block slicing;
//! * [`losses`], [`classifier`], [`subcentroid`]: objective and inference;
//! * [`train`]: optimizer loop, checkpoints, evaluation and weight sweeps;
//! * [`explain`]: concept-similarity and Neural-Collapse diagnostics;
//! * [`selftest`]: gradient checks and oracle equivalences.

pub mod classifier;
pub mod error;
pub mod explain;
pub mod hierarchy;
pub mod losses;
pub mod model;
pub mod numkernel;
pub mod selftest;
pub mod subcentroid;
pub mod train;

pub use classifier::{Lambda, StructuredClassifier};
pub use error::{Error, Result};
pub use hierarchy::{Dataset, HierarchySpec};
pub use losses::{LossCoefficients, LossComponents, Toggles};
pub use model::{CfsgModel, PartitionSpec, StructuredFeatures};
pub use numkernel::Tensor;
pub use subcentroid::SubCentroidBank;
pub use train::{Checkpoint, TrainConfig};
