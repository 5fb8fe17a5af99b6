//! Dense RGB-D SLAM on a sparse voxel map that stores a fused SDF prior and
//! a learned feature at every voxel vertex.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoder;
pub mod frame;
pub mod fusion;
pub mod geometry;
pub mod objectives;
pub mod optimize;
pub mod pipeline;
pub mod render;
pub mod svo;
pub mod window;
