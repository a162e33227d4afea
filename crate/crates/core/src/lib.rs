//! Multi-scale patch embedding (MSPE) for vision transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`resize`] builds image interpolation as explicit separable linear
//!   operators and implements pseudo-inverse kernel resizing on top of them.
//! * [`patch_embed`] holds the multi-kernel patch-embedding bank, kernel
//!   selection by resolution and the non-overlapping patch convolution.
//! * [`vit`] is a small ViT encoder with hand-written forward and backward
//!   passes.
//! * [`train`] pretrains the full model and fine-tunes only the kernel bank
//!   with a frozen encoder.
//! * [`eval`] runs multi-resolution sweeps and the token similarity
//!   diagnostic.
//! * [`data`], [`checkpoint`] and [`config`] cover datasets, the binary
//!   checkpoint container and key=value configuration files.

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod patch_embed;
mod real;
pub mod resize;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use real::Real;

/// Height and width in pixels (or tokens), in that order.
pub type Resolution = (usize, usize);
