//! Weight-shared multi-stage convolutional networks.
//!
//! The crate bundles a small reverse-mode differentiation engine ([`tensor`]),
//! layer primitives ([`nn`]), ResNet/DenseNet backbone descriptions
//! ([`backbones`]), the multi-stage wrapper ([`wsms`]), a static cost model
//! ([`cost`]), data ingestion ([`data`]) and a training harness ([`trainer`]).

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod wsms;

pub use error::{Error, Result};
