//! Weakly supervised semantic segmentation on multi-label images.
//!
//! A compact vision transformer carries one class token per class plus an
//! optional register token. Three mechanisms make its attention maps usable
//! as segmentation masks straight after classification training:
//!
//! * per-class tokens: class c is localized by the attention row of its own
//!   token over the patch tokens;
//! * random output-embedding masking: class tokens for absent classes are
//!   stochastically zeroed before the per-class head, forcing each token to
//!   carry its own class evidence;
//! * stochastic per-head attention gates with an expected-L0 penalty, which
//!   learn to silence heads that hurt localization and allow pruning.
//!
//! The crate also ships a synthetic multi-label shapes dataset, pseudo-mask
//! generation, training with hand-written backprop, metrics and a CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gating;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod pseudomask;
pub mod real;
pub mod rng;
pub mod sweep;
pub mod train;

pub use config::{ModelConfig, PseudoMaskConfig, RunConfig, SyntheticConfig, TrainConfig};
pub use error::{Error, Result};
