//! Per-vertex SDF priors estimated from depth and fused with running
//! weighted averages.
//!
//! A vertex is projected into the depth image; the prior is the observed depth
//! at that pixel minus the vertex's own z-depth. Estimates are discarded when
//! the vertex projects off the image, the depth there is missing, or the
//! magnitude reaches the voxel diagonal (the surface seen at that pixel is not
//! the one near the vertex).

use indexmap::IndexMap;
use nalgebra::Vector3;
use thiserror::Error;

use crate::frame::Frame;
use crate::geometry::{project, CameraIntrinsics};
use crate::svo::{HybridVoxelMap, VertexData};

/// Why a prior estimate was rejected.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PriorRejection {
    #[error("vertex projects outside the image")]
    OutsideImage,
    #[error("no depth measured at the projected pixel")]
    MissingDepth,
    #[error("estimate exceeds the voxel diagonal")]
    BeyondDiagonal,
}

/// Signed distance `D(u) - d_p` for one vertex, or the rejection reason.
pub fn estimate_vertex_prior(
    vertex_world: &Vector3<f64>,
    frame: &Frame,
    intr: &CameraIntrinsics,
    voxel_size: f64,
) -> Result<f64, PriorRejection> {
    let pc = frame.pose.inverse_transform_point(vertex_world);
    let (px, d_p) = project(&pc, intr).map_err(|_| PriorRejection::OutsideImage)?;
    let observed = *frame.depth.nearest(&px).ok_or(PriorRejection::OutsideImage)? as f64;
    if !(observed > 0.0) {
        return Err(PriorRejection::MissingDepth);
    }
    let s = observed - d_p;
    if s.abs() >= 3f64.sqrt() * voxel_size {
        return Err(PriorRejection::BeyondDiagonal);
    }
    Ok(s)
}

/// Weighted running-average update of one vertex prior.
pub fn fuse_vertex(vd: &VertexData, s_curr: f64, n_curr: u32) -> VertexData {
    let (prior, weight) = fuse_value(vd.sdf_prior, vd.update_weight, s_curr, n_curr);
    VertexData { feature: vd.feature.clone(), sdf_prior: prior, update_weight: weight }
}

#[inline]
pub fn fuse_value(prior: f64, n_update: u32, s_curr: f64, n_curr: u32) -> (f64, u32) {
    debug_assert!(n_curr >= 1);
    let total = n_update + n_curr;
    let fused = prior + (s_curr - prior) * (n_curr as f64 / total as f64);
    (fused, total)
}

/// Outcome of fusing one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionStats {
    /// Vertices whose prior changed.
    pub updated: usize,
    pub outside_image: usize,
    pub missing_depth: usize,
    pub beyond_diagonal: usize,
}

/// Fuses the frame into every vertex of every allocated leaf that received
/// at least one back-projected point. The weight of a vertex is the number of
/// such leaves sharing it.
pub fn integrate_frame(map: &mut HybridVoxelMap, frame: &Frame, intr: &CameraIntrinsics) -> FusionStats {
    let bins = map.point_bins(frame, intr);
    let mut n_curr: IndexMap<u32, u32> = IndexMap::new();
    for leaf in bins.keys() {
        if let Some(ids) = map.leaf_vertices(leaf) {
            for &id in ids {
                *n_curr.entry(id).or_insert(0) += 1;
            }
        }
    }
    let voxel_size = map.voxel_size();
    let mut stats = FusionStats::default();
    // Estimates first, writes after: each vertex update is independent.
    let estimates: Vec<(u32, u32, Result<f64, PriorRejection>)> = n_curr
        .iter()
        .map(|(&id, &n)| (id, n, estimate_vertex_prior(&map.vertex_position(id), frame, intr, voxel_size)))
        .collect();
    for (id, n, est) in estimates {
        match est {
            Ok(s) => {
                let (prior, weight) = fuse_value(map.priors()[id as usize], map.update_weights()[id as usize], s, n);
                map.set_prior(id, prior, weight);
                stats.updated += 1;
            }
            Err(PriorRejection::OutsideImage) => stats.outside_image += 1,
            Err(PriorRejection::MissingDepth) => stats.missing_depth += 1,
            Err(PriorRejection::BeyondDiagonal) => stats.beyond_diagonal += 1,
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Image;
    use crate::geometry::Pose;
    use crate::svo::MapConfig;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 19.5, 14.5, 40, 30, 0.001).unwrap()
    }

    fn wall(depth: f32) -> Frame {
        let k = intr();
        Frame::new(0, 0.0, Image::filled(40, 30, [0.5; 3]), Image::filled(40, 30, depth), &k).unwrap()
    }

    #[test]
    fn estimate_in_front_of_plane() {
        let f = wall(1.0);
        let s = estimate_vertex_prior(&Vector3::new(0.0, 0.0, 0.95), &f, &intr(), 0.2).unwrap();
        assert!((s - 0.05).abs() < 1e-6);
    }

    #[test]
    fn rejection_cases() {
        let k = intr();
        let f = wall(1.0);
        assert_eq!(estimate_vertex_prior(&Vector3::new(5.0, 0.0, 1.0), &f, &k, 0.2), Err(PriorRejection::OutsideImage));
        assert_eq!(
            estimate_vertex_prior(&Vector3::new(0.0, 0.0, -1.0), &f, &k, 0.2),
            Err(PriorRejection::OutsideImage)
        );
        // 0.40 >= sqrt(3) * 0.2 ~ 0.3464
        assert_eq!(
            estimate_vertex_prior(&Vector3::new(0.0, 0.0, 0.6), &f, &k, 0.2),
            Err(PriorRejection::BeyondDiagonal)
        );
        let holes = wall(0.0);
        assert_eq!(
            estimate_vertex_prior(&Vector3::new(0.0, 0.0, 0.9), &holes, &k, 0.2),
            Err(PriorRejection::MissingDepth)
        );
    }

    #[test]
    fn fusion_examples() {
        let fresh = VertexData { feature: vec![0.3], sdf_prior: 0.0, update_weight: 0 };
        let a = fuse_vertex(&fresh, 0.05, 3);
        assert_eq!((a.sdf_prior, a.update_weight), (0.05, 3));
        assert_eq!(a.feature, vec![0.3]);
        let b = fuse_vertex(&a, 0.09, 1);
        assert!((b.sdf_prior - 0.06).abs() < 1e-15);
        assert_eq!(b.update_weight, 4);
        let mut c = b.clone();
        c.sdf_prior = 0.07;
        for n in 1..5 {
            c = fuse_vertex(&c, 0.07, n);
            assert!((c.sdf_prior - 0.07).abs() < 1e-15);
        }
    }

    #[test]
    fn integrate_wall_matches_plane_sdf() {
        let k = intr();
        let f = wall(1.1);
        let mut map = HybridVoxelMap::new(MapConfig { feature_dim: 2, ..MapConfig::default() });
        map.allocate_from_frame(&f, &k);
        let stats = integrate_frame(&mut map, &f, &k);
        assert!(stats.updated > 0);
        for id in 0..map.num_vertices() as u32 {
            if map.update_weights()[id as usize] > 0 {
                let z = map.vertex_position(id).z;
                assert!((map.priors()[id as usize] - (1.1 - z)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn all_invalid_frame_leaves_map_unchanged() {
        let k = intr();
        let mut map = HybridVoxelMap::new(MapConfig { feature_dim: 2, ..MapConfig::default() });
        map.allocate_from_frame(&wall(1.1), &k);
        let before = map.checksum();
        // Camera moved far away: the leaves receive no points at all.
        let mut far = wall(1.1);
        far.pose = Pose::from_translation(Vector3::new(0.0, 0.0, 50.0));
        assert_eq!(integrate_frame(&mut map, &far, &k).updated, 0);
        assert_eq!(map.checksum(), before);
    }
}
