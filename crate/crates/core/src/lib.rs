//! SPECK32/64-CBC ciphertext indistinguishability workbench.
//!
//! The pipeline: [`data`] generates labeled ciphertexts for a one-bit-apart
//! message pair, [`nn`] trains a residual convolutional distinguisher on
//! them, [`gbdt`] reuses the distinguisher's flattened convolutional
//! features to fit a boosted-tree classifier, and [`harness`] runs the
//! key/round scenario matrix and writes report tables.

pub mod data;
pub mod error;
pub mod gbdt;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod speck;

pub use error::{Error, Result};
