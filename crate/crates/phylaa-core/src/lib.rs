//! Physics-conditioned localized artifact attention for video manipulation
//! detection, at desk scale.
//!
//! The crate is organized around a small reverse-mode autodiff tensor core
//! ([`tensor`]) on top of which the detection pipeline is built:
//!
//! - [`physics`] extracts three per-frame conditioner maps from raw clips:
//!   optical-flow curl, specular-highlight skewness, and rPPG band power.
//! - [`attention`] gates a learned artifact map with cross-attention over the
//!   physics volume and blends the two with a learned scalar.
//! - [`losses`] provides the focal, auxiliary-mask, and resonance losses.
//! - [`model`] assembles three toy spatiotemporal branches (recurrent,
//!   transformer, causal-conv) and trains them with AdamW + cosine restarts.
//! - [`fusion`] and [`metrics`] implement uncertainty-aware ensemble fusion
//!   and the evaluation metrics (AUC-ROC, EER, F1, accuracy, ECE).
//! - [`adversarial`] implements FGSM/PGD/transfer attacks and randomized
//!   smoothing certification.
//! - [`synth`] generates the labeled synthetic clip corpus with planted
//!   physics violations and ground-truth masks.
//! - [`pipeline`] wires everything into reproducible train/eval/ablation
//!   runs consumed by the CLI.

pub mod adversarial;
pub mod attention;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod physics;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Environment variable consulted when no seed is given explicitly.
pub const SEED_ENV_VAR: &str = "PHYLAA_SEED";
