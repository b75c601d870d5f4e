//! Hierarchical per-pixel classification over heterogeneous datasets.
//!
//! A [`hierarchy::LabelHierarchy`] merges the label spaces of several
//! datasets into one tree. Every inner node owns a softmax classifier; the
//! [`network`] module builds one head per classifier on top of a shared
//! feature extractor, [`training`] supervises each head only on the pixels
//! routed to it, and [`inference`] chains the per-head decisions back into a
//! fine-grained segmentation.

pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod hierarchy;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
