//! Attention-map semantic localization and dual-level controlled
//! rectified-flow editing on a small deterministic multimodal DiT.
//!
//! The pipeline is: capture joint attention on the clean latent
//! ([`psl::localize`]), invert the latent to noise while recording latents and
//! value tensors ([`dlc::invert`]), then sample with the target prompt under
//! feature- and latent-level control ([`dlc::sample_edit`]).

pub mod bench;
pub mod dlc;
pub mod error;
pub mod evalmetrics;
pub mod mmdit;
pub mod numerics;
pub mod psl;
pub mod tensorfile;

pub use error::{Error, Result};
