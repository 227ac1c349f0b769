// SPDX-License-Identifier: MIT OR Apache-2.0

//! Classifier-gated hidden-state back-patching on a desk-scale transformer.

pub mod classifier;
pub mod config;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod metric;
pub mod model;
pub mod oracle;
pub mod patch;
pub mod taskgen;

pub use error::{Error, Result};
