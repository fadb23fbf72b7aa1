//! Inter-object relationship graphs for two-stage 3D object detection.
//!
//! Proposals from a detector's first stage are connected into a directed
//! graph over their box centers ([`spatial_graph`]). A stack of edge-feature
//! GNN layers ([`relation`]) refines each proposal's RoI feature using the
//! feature and box differences to its neighbours, and the per-layer node
//! states are concatenated into the refined feature. [`eval`] provides
//! KITTI-style AP, [`data_io`] the file formats and a synthetic scene
//! generator, and [`oracle`] brute-force references used by the test suites.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_io;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod oracle;
pub mod relation;
pub mod rng;
pub mod spatial_graph;

pub use geometry::{iou_3d, iou_bev, Box3D};
pub use spatial_graph::{GraphStrategy, RelationGraph};
