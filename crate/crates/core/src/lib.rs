//! Phase-type variational autoencoders for heavy-tailed, non-negative data.
//!
//! The crate is organised bottom-up:
//!
//! - [`ph`]: phase-type distributions evaluated by uniformization, plus the
//!   absorbing-chain sampler.
//! - [`grad`]: a small reverse-mode tape over dense 2-D tensors.
//! - [`model`]: the VAE itself (Gaussian encoder, series-canonical PH decoder
//!   or Gaussian decoder) and ancestral generation.
//! - [`train`]: AdamW with global-norm clipping and step decay.
//! - [`data`]: synthetic heavy-tailed generators, t-copulas and CSV IO.
//! - [`metrics`]: tail and dependence metrics.

pub mod data;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod ph;
pub mod train;

mod fmt;

pub use error::{Error, Result};
