//! Style-adaptive generation of facial-animation parameters.
//!
//! Two engines share one small numeric kernel:
//!
//! * an expression predictor whose style is adapted by training a mixture of
//!   low-rank factor pairs of different ranks on a short reference clip
//!   ([`expradapter`], [`molora`]);
//! * a head-pose generator built from a sequence VQ-VAE, an autoregressive
//!   code predictor and a retrieval step that picks a style embedding by
//!   nearest semantic-aware style matrix ([`vqpose`], [`posegpt`],
//!   [`styleretrieval`]).
//!
//! [`synthcorpus`] generates labelled synthetic data and [`metrics`] scores
//! the output.

pub mod checkpoint;
pub mod error;
pub mod expradapter;
pub mod gradsuite;
pub mod metrics;
pub mod molora;
pub mod numkit;
pub mod posegpt;
pub mod styleretrieval;
pub mod synthcorpus;
pub mod vqpose;

pub use error::{Error, Result};
