//! A small, self-contained deep-learning stack built around channel attention
//! with a self-adaptive max/min mix pooling strategy.
//!
//! Everything runs on the CPU in `f64`. The crate provides:
//!
//! * [`tensor`] — dense n-d tensors on a reverse-mode autodiff tape
//! * [`pooling`] — global max/min/avg pooling and the adaptive mix pool
//! * [`attention`] — the mix-pool attention module, its ablation variants,
//!   and a squeeze-and-excitation baseline
//! * [`backbone`] — pre-activation bottleneck ResNets for 32x32 inputs with a
//!   per-block attention plug-in point and a parameter auditor
//! * [`training`] — SGD with momentum, the penalized loss, and the train loop
//! * [`data`] — CIFAR binary ingestion, augmentation, synthetic datasets
//! * [`experiments`] — declarative experiment runner and ablation suites
//! * [`gradcheck`] — finite-difference verification of every module

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod param;
pub mod pooling;
pub mod reference;
pub mod tensor;
pub mod training;

pub use error::{Result, SpemError};
