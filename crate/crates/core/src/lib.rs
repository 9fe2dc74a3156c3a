//! Uncertainty-driven selective-scan segmentation.
//!
//! A small reverse-mode tensor engine, the selective state-space scan with
//! sequential and associative-parallel kernels, uncertainty-ranked pixel
//! scan orders, and an encoder-decoder segmentation network built on them.

// Numeric kernels index several parallel arrays with one loop counter.
#![allow(clippy::needless_range_loop, clippy::type_complexity)]

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod scan_order;
pub mod selective_scan;
pub mod synth;
pub mod tensor;
pub mod ud_ssm;
pub mod uncertainty;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
