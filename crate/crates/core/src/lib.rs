//! Self-supervised pre-training and fine-tuning for 2D grayscale CT slices.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity
)]

pub mod augment;
pub mod cli;
pub mod contrastive;
pub mod dataio;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod seeds;
pub mod spark;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
