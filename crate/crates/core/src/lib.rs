//! Off-policy RL laboratory for studying training–inference mismatch.
//!
//! A tiny decoder-only transformer is trained with group-relative policy
//! gradients under a simulated inference engine whose probabilities differ
//! from the training engine's. The crate provides every importance-ratio
//! correction compared in the lab (token/sequence ratios, geometric-mean
//! ratios, masked importance sampling, bypass, and layerwise Gaussian
//! perturbation of the numerator policy), the diagnostics used to compare
//! them, and standalone numerical probes of the smoothing theory on
//! one-layer softmax models.

pub mod diagnostics;
pub mod engines;
pub mod error;
pub mod numcore;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod tasks;
pub mod theorylab;
pub mod trainer;

pub use error::{Error, Result};
