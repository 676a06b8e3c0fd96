//! Goal-oriented telemetry sampling and hybrid compression.
//!
//! Base stations report dense KPI windows; this crate learns which entries to
//! sample and how to ship them — through a conditional generative autoencoder
//! or LZMA — under explicit sampling and rate budgets enforced by dual ascent.

pub mod codec;
pub mod config;
pub mod data;
pub mod experiment;
pub mod error;
pub mod nn;
pub mod policy;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{GgzError, Result};
