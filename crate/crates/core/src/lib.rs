//! Differentiable logic networks for feature-based classification.
//!
//! A network binarizes continuous features with learnable thresholds,
//! combines the bits through layers of learnable two-input gates and
//! counts active rules per class. Training runs on continuous
//! relaxations; [`compile`] turns the result into a plain Boolean circuit.

pub mod compile;
pub mod data;
pub mod error;
pub mod hpo;
pub mod layers;
pub mod network;
pub mod ops;

pub use compile::{compile, count_ops, discretize, fold_constants, simplify_rules, Circuit, CostReport};
pub use data::{balanced_accuracy, best_at_k, preprocess, FeatureMatrix};
pub use error::{Error, ErrorClass, Result};
pub use network::{DlnModel, TrainConfig};
