//! Cross-source point cloud registration and fusion.
//!
//! Registers two point clouds of the same scene reconstructed from different
//! sensors and viewing angles (over-view photogrammetry vs. street-view
//! LiDAR) with a coarse-to-fine patch pipeline, and scores the fused result
//! with occupancy-volume and boundary-distance metrics.
//!
//! Core math is generic over the scalar type ([`Scalar`]: `f32` or `f64`);
//! the concrete aliases below fix `f64`, which is what the pipeline and CLI
//! use.

pub mod boundary;
pub mod cloud;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod grid;
pub mod icp;
pub mod io;
pub mod ndt;
pub mod report;
pub mod scalar;
pub mod select;
pub mod spatial;
pub mod transform;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 3D point with `f64` coordinates.
pub type Point3 = cloud::Point3<f64>;
/// Point cloud with `f64` coordinates.
pub type PointCloud3 = cloud::PointCloud3<f64>;
/// SE(3) transform with `f64` coordinates.
pub type RigidTransform3 = transform::RigidTransform3<f64>;
/// SE(2) transform with `f64` coordinates.
pub type RigidTransform2 = transform::RigidTransform2<f64>;
/// 2D point with `f64` coordinates.
pub type Point2 = boundary::Point2<f64>;
/// Patch grid with `f64` coordinates.
pub type PatchGrid = grid::PatchGrid<f64>;
/// 640-bin shape descriptor with `f64` bins.
pub type Descriptor640 = descriptor::Descriptor640<f64>;
