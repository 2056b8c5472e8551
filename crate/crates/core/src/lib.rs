//! Adversarial multi-task learning for character-level text correction.
//!
//! A shared transformer encoder feeds a masked-LM head (the generator) and a
//! per-token scoring head (the discriminator). The two are trained jointly
//! and adversarially, then drive a mask-fill-rescore correction search whose
//! decisions are distilled into a span-predicting policy head.

pub mod cli;
pub mod config;
pub mod corrector;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod policy;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
