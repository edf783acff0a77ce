//! Cross-modality knowledge distillation over bird's-eye-view (BEV) feature
//! maps, at desk scale.
//!
//! The crate bundles everything needed to demonstrate feature, relation and
//! response distillation between toy BEV detectors of different modalities:
//!
//! - [`tensor`]: dense f64 tensors with a reverse-mode differentiation tape
//! - [`geometry`]: rotated boxes, crucial points, grid transforms, Gaussian masks
//! - [`losses`]: the three distillation losses and their ablation variants
//! - [`detector`]: toy lidar/camera/fusion BEV detectors with a center-style head
//! - [`synthscene`]: deterministic synthetic scenes and modality rendering
//! - [`eval`]: center-distance-matched average precision
//! - [`train`]: Adam training loops for baselines and distillation runs

pub mod detector;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod synthscene;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor};
