//! Anchor-based Gaussian splatting with per-period temporal modulation.
//!
//! A sparse voxel scaffold of anchors carries shared and per-period
//! features. For a query time and camera, each visible anchor's fused
//! feature is decoded by small MLPs into a cluster of Gaussians that are
//! projected and alpha-composited into an image. Every stage has a
//! hand-written adjoint so the whole pipeline can be trained with Adam.

pub mod dataio;
pub mod decoder;
pub mod error;
pub mod geom;
pub mod model;
pub mod optim;
pub mod par;
pub mod raster;
pub mod scaffold;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};
