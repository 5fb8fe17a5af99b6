use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;

use hvslam::fusion::fuse_value;
use hvslam::geometry::{warp_pixel, CameraIntrinsics, Pose, Tangent};
use hvslam::pipeline::ate::evaluate_ate;
use hvslam::render::{composite, weight, RaySample};
use hvslam::svo::{HybridVoxelMap, MapConfig, VoxelCoord};

fn tangent(scale_t: f64, scale_r: f64) -> impl Strategy<Value = Tangent> {
    prop::array::uniform6(-1.0..1.0f64).prop_map(move |a| {
        Tangent::new(a[0] * scale_t, a[1] * scale_t, a[2] * scale_t, a[3] * scale_r, a[4] * scale_r, a[5] * scale_r)
    })
}

fn point(scale: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-scale..scale).prop_map(|a| Vector3::new(a[0], a[1], a[2]))
}

fn intr() -> CameraIntrinsics {
    CameraIntrinsics::new(100.0, 100.0, 79.5, 59.5, 160, 120, 0.001).unwrap()
}

proptest! {
    #[test]
    fn exp_log_round_trip(xi in tangent(3.0, 1.0)) {
        let back = Pose::exp(&xi).log();
        prop_assert!((back - xi).norm() < 1e-9);
    }

    #[test]
    fn warp_there_and_back(d in tangent(0.1, 0.1), px in 0.0..159.0f64, py in 0.0..119.0f64, depth in 0.3..4.0f64) {
        let k = intr();
        let (pc, pw) = (Pose::exp(&Tangent::new(0.2, -0.1, 0.3, 0.1, 0.2, -0.3)), Pose::exp(&d));
        let pw = pw * pc;
        let q = Vector2::new(px, py);
        if let Some(w) = warp_pixel(&q, depth, &pc, &pw, &k) {
            let back = warp_pixel(&w.pixel, w.depth, &pw, &pc, &k).unwrap();
            prop_assert!((back.pixel - q).norm() < 1e-9);
            prop_assert!((back.depth - depth).abs() < 1e-9);
        }
    }

    #[test]
    fn fused_prior_is_the_weighted_mean(obs in prop::collection::vec((-0.3..0.3f64, 1u32..9), 1..20)) {
        let (mut prior, mut w) = (0.0, 0);
        for &(s, n) in &obs {
            (prior, w) = fuse_value(prior, w, s, n);
        }
        let total: u32 = obs.iter().map(|o| o.1).sum();
        let mean = obs.iter().map(|&(s, n)| s * n as f64).sum::<f64>() / total as f64;
        prop_assert_eq!(w, total);
        prop_assert!((prior - mean).abs() < 1e-12);
    }

    #[test]
    fn weight_is_even_and_bounded(s in -1.0..1.0f64, tr in 0.01..0.5f64) {
        let w = weight(s, tr);
        prop_assert_eq!(w, weight(-s, tr));
        prop_assert!((0.0..=0.25).contains(&w));
        prop_assert!(weight(s.abs() + 0.01, tr) <= w);
    }

    #[test]
    fn coefficients_sum_to_one(sdf in prop::collection::vec(-0.3..0.3f64, 1..48)) {
        let samples: Vec<RaySample> = sdf
            .iter()
            .enumerate()
            .map(|(j, &s)| RaySample {
                t: j as f64 * 0.05,
                depth: j as f64 * 0.05,
                point: Vector3::zeros(),
                sdf_coarse: s,
                sdf: s,
                color: [0.5; 3],
                weight: weight(s, 0.1),
            })
            .collect();
        if let Ok(r) = composite(samples) {
            prop_assert!((r.coefficients().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.coefficients().iter().all(|&c| c >= 0.0));
        }
    }

    #[test]
    fn trilerp_reproduces_vertex_priors(leaf in prop::array::uniform3(-20..20i32), corner in 0usize..8, values in prop::array::uniform8(-0.2..0.2f64)) {
        let mut map = HybridVoxelMap::new(MapConfig::default());
        let leaf = VoxelCoord::new(leaf[0], leaf[1], leaf[2]);
        map.allocate(leaf);
        let ids = *map.leaf_vertices(&leaf).unwrap();
        for (id, v) in ids.iter().zip(values) {
            map.set_prior(*id, v, 1);
        }
        let p = map.vertex_position(ids[corner]);
        let (_, s) = map.trilerp(&(p + (leaf.min_corner(0.2) + Vector3::repeat(0.1) - p) * 1e-12)).unwrap();
        prop_assert!((s - values[corner]).abs() < 1e-9);
    }

    #[test]
    fn ate_ignores_a_rigid_frame_change(noise in prop::collection::vec(point(0.02), 6), frame in tangent(2.0, 1.5)) {
        let gt: Vec<(f64, Pose)> = (0..6)
            .map(|i| (i as f64, Pose::exp(&Tangent::new(0.3 * i as f64, 0.1 * (i * i) as f64, -0.2 * i as f64, 0.1 * i as f64, 0.0, 0.05))))
            .collect();
        let est: Vec<(f64, Pose)> = gt.iter().zip(&noise).map(|((t, p), n)| (*t, Pose::from_translation(*n) * *p)).collect();
        let moved: Vec<(f64, Pose)> = est.iter().map(|(t, p)| (*t, Pose::exp(&frame) * *p)).collect();
        let a = evaluate_ate(&est, &gt).unwrap().rmse;
        let b = evaluate_ate(&moved, &gt).unwrap().rmse;
        prop_assert!((a - b).abs() < 1e-9);
    }

    /// Three positions scaled about their centroid by `1 + eps`: the best
    /// rigid alignment is the identity, so the error is `|eps| * rms(radius)`.
    #[test]
    fn ate_three_pose_closed_form(a in point(1.0), b in point(1.0), c in point(1.0), eps in -0.3..0.3f64, frame in tangent(1.0, 1.0)) {
        prop_assume!((b - a).cross(&(c - a)).norm() > 0.05);
        let centroid = (a + b + c) / 3.0;
        let gt: Vec<(f64, Pose)> = [a, b, c].iter().enumerate().map(|(i, p)| (i as f64, Pose::from_translation(*p))).collect();
        let est: Vec<(f64, Pose)> = [a, b, c]
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64, Pose::exp(&frame) * Pose::from_translation(centroid + (p - centroid) * (1.0 + eps))))
            .collect();
        let radius_ms = [a, b, c].iter().map(|p| (p - centroid).norm_squared()).sum::<f64>() / 3.0;
        let want = eps.abs() * radius_ms.sqrt();
        prop_assert!((evaluate_ate(&est, &gt).unwrap().rmse - want).abs() < 1e-9);
    }
}
