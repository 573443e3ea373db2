//! Dual-encoder next-utterance ranking with response-aware attention and
//! keyword-description gating.
//!
//! The crate is organized around a small reverse-mode differentiation
//! engine ([`autodiff`]) on which GRU encoders ([`encoders`]), bilinear
//! cross-attention ([`attention`]), and the description-embedding gate
//! ([`knowledge`]) are built. [`model`] composes them into the scoring
//! function and loss, [`train`] runs Adam with early stopping, and
//! [`metrics`] holds the ranking metrics and analysis utilities.
//! [`corpus`] owns tokenization, vocabulary, and the on-disk formats.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod encoders;
pub mod knowledge;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod train;

pub use matrix::Matrix;
