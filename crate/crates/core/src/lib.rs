//! Behavior cloning with Lipschitz-certified policy networks.
//!
//! The crate covers the whole pipeline: dense tensors with reverse-mode
//! differentiation, weight-normalized networks with certified Lipschitz
//! constants, robustness certificates, classic-control environments,
//! expert data collection, the three BC trainers, evaluation-time attacks and
//! the noise-sweep harness.

pub mod adversaries;
pub mod bc_train;
pub mod certificate;
pub mod container;
pub mod envs;
pub mod eval_harness;
pub mod error;
pub mod expert_data;
pub mod lipschitz_net;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Norm, Vector};
