//! Vector-based road boundary mapping from multi-beam LiDAR.
//!
//! Scans are segmented and fused into local occupancy grids, vectorized into
//! polylines with virtual scans, registered polyline-to-polyline, stitched
//! into a global vector map and optimized as a pose graph.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod concatenate;
pub mod config;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod matching;
pub mod odometry;
pub mod plot;
pub mod pose_graph;
pub mod scenarios;
pub mod simulator;
pub mod slam;
pub mod spatial;
pub mod vectorize;

pub use error::{Error, Result};
pub use geometry::{BoundaryKind, Point2, Point3, Polyline, Pose2};
