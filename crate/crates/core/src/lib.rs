//! Temporal-consistency guided pseudo-labelling and memory-bank training for
//! unsupervised cross-camera person retrieval.
//!
//! The pipeline: estimate camera-pair interval histograms from (pseudo)
//! labels, fuse them with visual similarity, cluster with DBSCAN into
//! multi-class labels, and train a linear embedder with an in-batch
//! classification loss plus a memory-bank multi-label loss. Retrieval is
//! scored with CMC and mAP, by visual or by joint similarity.

pub mod cli;
pub mod cluster;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod manifest;
pub mod matrix;
pub mod memory;
pub mod objective;
pub mod similarity;
pub mod synth;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};
