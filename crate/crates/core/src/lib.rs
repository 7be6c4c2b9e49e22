//! Channel-pruning experiments for small CNNs.
//!
//! A pruning signal scores each convolution output channel as
//! `S = R(F(X)) / L`: a base input `X` (the channel's weights or its output
//! feature map), a pointwise metric `F`, a reduction `R` and a scaling `L`.
//! This crate provides the CNN engine with first and diagonal second
//! derivatives that those metrics need ([`network`], [`diff`]), the signal
//! algebra and its enumeration ([`saliency`]), the iterative pruning loops
//! ([`prune`]) and the experiment plumbing around them ([`experiment`]).

pub mod checkpoint;
pub mod data;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod models;
pub mod network;
pub mod par;
pub mod prune;
pub mod saliency;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{conv2d, Tensor};
