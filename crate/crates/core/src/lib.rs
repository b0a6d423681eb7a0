//! Federated class-incremental learning with prompt-tuned frozen backbones
//! and prototype injection.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense kernels, keyed RNG streams, gradient building blocks
//! - [`backbone`]: frozen pseudo-ViT with prompt/prefix attachment
//! - [`prompt`]: prompt pools, classifier head, local losses and SGD
//! - [`prototypes`]: per-class Gaussian statistics, augmentation, weighted merge
//! - [`federation`]: client/server rounds, aggregation, wire format, accounting
//! - [`datagen`]: task streams, non-IID partitions, synthetic and CSV data
//! - [`metrics`]: accuracy matrix, Avg / PD / Imp / forgetting, report files
//! - [`config`] and [`commands`]: experiment configuration and CLI entry points

pub mod backbone;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod numerics;
pub mod prompt;
pub mod prototypes;

pub use error::{Error, Result};
