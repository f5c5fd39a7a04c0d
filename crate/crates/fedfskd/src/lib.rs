//! Desk-scale federated few-shot segmentation simulator with dual knowledge
//! distillation.
//!
//! The crate trains a small 3D encoder-decoder on synthetic cartilage-like
//! phantoms under a FedAVG-style protocol: supervised Dice + cross-entropy on
//! scarce labeled data, plus uncertainty-filtered response distillation and
//! latent-KL feature distillation from a repository-pretrained teacher, with
//! delayed EMA teacher updates. Everything is deterministic under a seed.

pub mod error;
pub mod federation;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod segnet;
pub mod selftest;
pub mod synthdata;
pub mod uncertainty;

pub use error::{Error, Result};
