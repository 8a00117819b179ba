//! Desk-scale single-view 3D mesh reconstruction.
//!
//! A two-stage point-cloud-to-mesh deformation model driven by locally
//! sampled 2D/3D features, trained with Chamfer/normal/edge/move losses
//! plus a differentiable multi-view silhouette IoU loss, and evaluated
//! with CD, EMD, silhouette IoU, normal consistency and F-score.

pub mod camera;
pub mod data;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod tensor;

pub use error::{Error, Result};
