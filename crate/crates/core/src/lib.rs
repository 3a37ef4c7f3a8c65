//! Toolkit for identifying the internal CNN filters relevant to each class
//! and rendering pixel-level explanation heatmaps.
//!
//! The pipeline: train a small CNN, extract per-image internal response
//! descriptors, solve a sparse L1-budgeted regression to find the
//! (layer, filter) pairs that predict each class, and visualize those
//! filters with a guided-backprop deconvnet whose strided operations run
//! at stride 1 with nearest-neighbor resampling to avoid grid artifacts.
//! A procedural flower dataset with exact ground-truth masks supports
//! quantitative IoU scoring of the heatmaps.

pub mod cli;
pub mod dataset;
pub mod deconv;
pub mod descriptor;
pub mod eval;
pub mod explain;
pub mod flowergen;
pub mod network;
pub mod selector;
pub mod tensor;

pub use dataset::LabeledDataset;
pub use network::{ActivationTrace, FeatureId, Network};
pub use tensor::{ConvSpec, Tensor};
