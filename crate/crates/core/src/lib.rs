//! Multi-scale supervised conv-deconv pose estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`gradcheck`]: dense tensors and reverse-mode AD.
//! - [`keypoints`], [`heatmap`]: the 16-keypoint body model and its heatmap codec.
//! - [`model`]: stacked conv-deconv network with per-scale heads and a
//!   regression stage.
//! - [`loss`]: per-scale heatmap loss and the summed multi-scale total.
//! - [`pck`]: PCK / PCKh evaluation.
//! - [`synth`]: procedural stick-figure datasets.
//! - [`train`]: Adam, training, evaluation and ablation runs.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod keypoints;
mod kernels;
pub mod loss;
pub mod model;
pub mod pck;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
