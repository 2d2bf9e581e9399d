//! Geometry-guided selective scanning for semantic segmentation.
//!
//! The crate is organised bottom-up:
//!
//! * [`fields`] holds the grid containers and the stencil, morphology and
//!   distance primitives.
//! * [`priors`] turns label masks into the four geometric prior fields
//!   (centripetal potential, flow, curvature, boundary map).
//! * [`gmamba`] implements the diagonal selective scan, its four-way
//!   directional application, geometric prompting and the three-layer
//!   cascade.
//! * [`goad`] is the offset-aligned decoder: bounded offsets, grid
//!   construction, bilinear warping and boundary gating.
//! * [`losses`] is the composite training objective.
//! * [`autodiff`] is a small reverse-mode tape plus the finite-difference
//!   oracle, and [`gradcheck`] certifies every differentiable op with it.
//! * [`metrics`] computes mIoU and the multiply-add cost reports.
//! * [`train`] is the toy end-to-end head used for overfitting runs, and
//!   [`scene`] builds the synthetic scenes shared by experiments.

#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod autodiff;
pub mod error;
pub mod fields;
pub mod gmamba;
pub mod goad;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod priors;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{DgmError, Result};
pub use fields::{DepthwiseKernels, FeatureMap, LabelMask, ScalarField, VectorField2};
pub use gmamba::{CascadeConfig, CascadeOutput, LayerKind, ScanDirection, ScanParams};
pub use goad::SamplingGrid;
pub use losses::{LossConfig, LossReport, Probabilities};
pub use metrics::{ConfusionMatrix, CostReport, MiouReport};
pub use priors::GeometricPriors;
