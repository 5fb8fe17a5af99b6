//! Loss terms and their gradients.
//!
//! Render losses compare composited colour/depth with the observation at
//! each ray's pixel. SDF losses supervise per-sample SDF values: samples
//! clearly in front of the observed surface are pulled toward `+tr`, samples
//! inside the truncation band toward the observed projective distance.
//! Warping losses compare a current-frame pixel with its re-projection into
//! window keyframes and only touch camera poses.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderParams;
use crate::frame::Frame;
use crate::geometry::{pose_grad_from_point, project_jacobian, warp_pixel, CameraIntrinsics, Pose, Tangent};
use crate::render::{BatchRender, GradRequest, Gradients, SampleUpstream};
use crate::svo::HybridVoxelMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub sdf: f64,
    pub free_space: f64,
    pub warp_rgb: f64,
    pub warp_depth: f64,
    /// Warped pixels whose depth residual exceeds this (meters) are taken
    /// as occluded and left out of both warping terms.
    pub warp_occlusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rgb: 10.0, depth: 1.0, sdf: 50.0, free_space: 5.0, warp_rgb: 1.0, warp_depth: 0.5, warp_occlusion: 0.1 }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        [self.rgb, self.depth, self.sdf, self.free_space, self.warp_rgb, self.warp_depth]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
            && self.warp_occlusion > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub rgb: f64,
    pub depth: f64,
    pub free_space: f64,
    pub sdf: f64,
    pub warp_rgb: f64,
    pub warp_depth: f64,
    pub total: f64,
    pub n_rgb: usize,
    pub n_depth: usize,
    pub n_sdf_rays: usize,
    pub n_warp: usize,
}

/// Observed colour and depth at a ray's pixel; depth 0 means missing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayObservation {
    pub color: Vector3<f64>,
    pub depth: f64,
}

/// Looks up the observation of every ray in `frames` (indexed by slot).
pub fn observe(batch: &BatchRender, frames: &[&Frame]) -> Vec<RayObservation> {
    batch
        .rays
        .iter()
        .map(|r| {
            let f = frames[r.query.slot];
            let (x, y) = r.query.pixel;
            RayObservation { color: f.color.pixel(x, y), depth: f.depth_at(x, y) }
        })
        .collect()
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderTerms {
    pub rgb: f64,
    pub depth: f64,
    pub n_rgb: usize,
    pub n_depth: usize,
}

/// Mean absolute colour error (averaged over channels) and depth error over
/// non-empty rays. With `grad`, the weighted gradients
/// `w_rgb * dL_rgb + w_depth * dL_d` are added to `up`.
pub fn loss_render(
    batch: &BatchRender,
    obs: &[RayObservation],
    grad: Option<(&mut SampleUpstream, f64, f64)>,
) -> RenderTerms {
    let mut t = RenderTerms::default();
    let mut sum_c = 0.0;
    let mut sum_d = 0.0;
    for (r, o) in batch.rays.iter().zip(obs) {
        let Some((c, d, _)) = r.result else { continue };
        t.n_rgb += 1;
        sum_c += (c - o.color).abs().sum() / 3.0;
        if o.depth > 0.0 {
            t.n_depth += 1;
            sum_d += (d - o.depth).abs();
        }
    }
    if t.n_rgb > 0 {
        t.rgb = sum_c / t.n_rgb as f64;
    }
    if t.n_depth > 0 {
        t.depth = sum_d / t.n_depth as f64;
    }
    if let Some((up, w_rgb, w_d)) = grad {
        for (i, (r, o)) in batch.rays.iter().zip(obs).enumerate() {
            let Some((c, d, _)) = r.result else { continue };
            let dc = (c - o.color).map(sign) * (w_rgb / (3.0 * t.n_rgb as f64));
            let dd = if o.depth > 0.0 { sign(d - o.depth) * w_d / t.n_depth as f64 } else { 0.0 };
            batch.composite_backward(i, &dc, dd, up);
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SdfTerms {
    pub free_space: f64,
    pub sdf: f64,
    /// Rays with a valid observed depth and at least one sample.
    pub n_rays: usize,
}

/// Free-space and truncation-band SDF losses: per-ray means, then the mean
/// over rays.
pub fn loss_sdf(
    batch: &BatchRender,
    obs: &[RayObservation],
    grad: Option<(&mut SampleUpstream, f64, f64)>,
) -> SdfTerms {
    let tr = batch.config.truncation;
    let mut t = SdfTerms::default();
    let mut fs = 0.0;
    let mut band = 0.0;
    // (ray, n_fs, n_tr) for the gradient pass.
    let mut counts = Vec::new();
    for (i, (r, o)) in batch.rays.iter().zip(obs).enumerate() {
        if !(o.depth > 0.0) || r.start == r.end {
            continue;
        }
        t.n_rays += 1;
        let (mut nf, mut nt, mut sf, mut st) = (0usize, 0usize, 0.0, 0.0);
        for s in batch.ray_samples(i) {
            if s.depth < o.depth - tr {
                nf += 1;
                sf += (s.sdf - tr).powi(2);
            } else if (o.depth - s.depth).abs() <= tr {
                nt += 1;
                st += (s.sdf - (o.depth - s.depth)).powi(2);
            }
        }
        if nf > 0 {
            fs += sf / nf as f64;
        }
        if nt > 0 {
            band += st / nt as f64;
        }
        counts.push((i, nf, nt));
    }
    if t.n_rays > 0 {
        t.free_space = fs / t.n_rays as f64;
        t.sdf = band / t.n_rays as f64;
    }
    if let Some((up, w_fs, w_sdf)) = grad {
        let n = t.n_rays as f64;
        for (i, nf, nt) in counts {
            let o = obs[i];
            let r = &batch.rays[i];
            for j in r.start..r.end {
                let s = &batch.samples[j];
                if s.depth < o.depth - tr {
                    up.sdf[j] += w_fs * 2.0 * (s.sdf - tr) / (nf as f64 * n);
                } else if (o.depth - s.depth).abs() <= tr {
                    up.sdf[j] += w_sdf * 2.0 * (s.sdf - (o.depth - s.depth)) / (nt as f64 * n);
                }
            }
        }
    }
    t
}

/// Inputs of the warping losses. Frames and poses are indexed by slot.
#[derive(Debug, Clone)]
pub struct WarpSetup<'a> {
    pub current_slot: usize,
    pub target_slots: Vec<usize>,
    /// Valid-depth pixels sampled on the current frame.
    pub pixels: Vec<(usize, usize)>,
    pub frames: &'a [&'a Frame],
    /// Depth residual beyond which a correspondence counts as occluded.
    pub occlusion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WarpTerms {
    pub rgb: f64,
    pub depth: f64,
    /// In-view correspondences.
    pub n: usize,
}

/// Photometric and geometric re-projection residuals normalized by the
/// number of sampled pixels. With `grad`, weighted pose gradients are added
/// per slot.
pub fn loss_warp(
    setup: &WarpSetup<'_>,
    poses: &[Pose],
    intr: &CameraIntrinsics,
    mut grad: Option<(&mut [Tangent], f64, f64)>,
) -> WarpTerms {
    let mut t = WarpTerms::default();
    if setup.pixels.is_empty() {
        return t;
    }
    let cur = setup.frames[setup.current_slot];
    let pose_c = &poses[setup.current_slot];
    let norm = setup.pixels.len() as f64;
    for &(x, y) in &setup.pixels {
        let q = Vector2::new(x as f64, y as f64);
        let depth = cur.depth_at(x, y);
        let c_obs = cur.color.pixel(x, y);
        for &slot in &setup.target_slots {
            if slot == setup.current_slot {
                continue;
            }
            let target = setup.frames[slot];
            let pose_w = &poses[slot];
            let Some(wp) = warp_pixel(&q, depth, pose_c, pose_w, intr) else { continue };
            let d_obs = target.depth.nearest(&wp.pixel).map_or(0.0, |&d| d as f64);
            let rd = wp.depth - d_obs;
            if d_obs > 0.0 && rd.abs() > setup.occlusion {
                continue;
            }
            t.n += 1;
            let (c_w, dc_dq) = target.color.bilinear(&wp.pixel);
            let rc = c_obs - c_w;
            t.rgb += rc.abs().sum() / 3.0;
            if d_obs > 0.0 {
                t.depth += rd.abs();
            }
            if let Some((g, w_rgb, w_d)) = grad.as_mut() {
                // dL/dq for the colour term, then dL/dx_w.
                let sc = rc.map(sign) * (-*w_rgb / (3.0 * norm));
                let dl_dq = Vector2::new(sc.dot(&dc_dq[0]), sc.dot(&dc_dq[1]));
                let mut dl_dx = project_jacobian(&wp.point, intr).transpose() * dl_dq;
                if d_obs > 0.0 {
                    dl_dx.z += sign(rd) * *w_d / norm;
                }
                let g_world = pose_w.rotation() * dl_dx;
                let gc = pose_grad_from_point(&wp.world, &g_world);
                g[setup.current_slot] += gc;
                g[slot] -= gc;
            }
        }
    }
    t.rgb /= norm;
    t.depth /= norm;
    t
}

/// Evaluates the weighted objective on a rendered batch (and optionally the
/// warping terms) and back-propagates into the requested groups.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    map: &HybridVoxelMap,
    params: &DecoderParams,
    batch: &BatchRender,
    obs: &[RayObservation],
    warp: Option<&WarpSetup<'_>>,
    poses: &[Pose],
    intr: &CameraIntrinsics,
    weights: &LossWeights,
    req: Option<GradRequest>,
) -> (LossBreakdown, Option<Gradients>) {
    let mut up = req.map(|_| SampleUpstream::zeros(batch.num_samples()));
    let rt = loss_render(batch, obs, up.as_mut().map(|u| (u, weights.rgb, weights.depth)));
    let st = loss_sdf(batch, obs, up.as_mut().map(|u| (u, weights.free_space, weights.sdf)));
    let mut grads = req.map(|r| Gradients::new(poses.len(), map, params, r));
    if let (Some(g), Some(u), Some(r)) = (grads.as_mut(), up.as_ref(), req) {
        batch.backward(map, params, u, r, g);
    }
    let wt = match warp {
        Some(setup) => {
            let pose_grad = match (grads.as_mut(), req) {
                (Some(g), Some(r)) if r.poses => Some((g.poses.as_mut_slice(), weights.warp_rgb, weights.warp_depth)),
                _ => None,
            };
            loss_warp(setup, poses, intr, pose_grad)
        }
        None => WarpTerms::default(),
    };
    let total = weights.rgb * rt.rgb
        + weights.depth * rt.depth
        + weights.free_space * st.free_space
        + weights.sdf * st.sdf
        + weights.warp_rgb * wt.rgb
        + weights.warp_depth * wt.depth;
    let breakdown = LossBreakdown {
        rgb: rt.rgb,
        depth: rt.depth,
        free_space: st.free_space,
        sdf: st.sdf,
        warp_rgb: wt.rgb,
        warp_depth: wt.depth,
        total,
        n_rgb: rt.n_rgb,
        n_depth: rt.n_depth,
        n_sdf_rays: st.n_rays,
        n_warp: wt.n,
    };
    (breakdown, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Image;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24, 0.001).unwrap()
    }

    fn textured(depth: f32) -> Frame {
        let mut color = Image::filled(32, 24, [0.0f32; 3]);
        for y in 0..24 {
            for x in 0..32 {
                let v = 0.5 + 0.4 * ((x as f32 * 0.7).sin() * (y as f32 * 0.5).cos());
                *color.get_mut(x, y) = [v, 1.0 - v, 0.3];
            }
        }
        Frame::new(0, 0.0, color, Image::filled(32, 24, depth), &intr()).unwrap()
    }

    #[test]
    fn default_weights_are_valid() {
        assert!(LossWeights::default().is_valid());
        assert!(!LossWeights { sdf: -1.0, ..LossWeights::default() }.is_valid());
    }

    #[test]
    fn identical_views_have_zero_warp_loss() {
        let f = textured(1.5);
        let frames = [&f, &f];
        let pixels: Vec<_> = (0..24).flat_map(|y| (0..32).map(move |x| (x, y))).collect();
        let setup =
            WarpSetup { current_slot: 0, target_slots: vec![1], pixels, frames: &frames, occlusion: f64::INFINITY };
        let poses = [Pose::identity(), Pose::identity()];
        let mut g = vec![Tangent::zeros(); 2];
        let t = loss_warp(&setup, &poses, &intr(), Some((&mut g, 1.0, 1.0)));
        assert_eq!((t.rgb, t.depth), (0.0, 0.0));
        assert_eq!(t.n, 32 * 24);
        assert!(g.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn warp_out_of_view_counts_nothing() {
        let f = textured(1.5);
        let frames = [&f, &f];
        let setup = WarpSetup {
            current_slot: 0,
            target_slots: vec![1],
            pixels: vec![(3, 3), (20, 10)],
            frames: &frames,
            occlusion: f64::INFINITY,
        };
        let far = Pose::from_translation(Vector3::new(100.0, 0.0, 0.0));
        let t = loss_warp(&setup, &[Pose::identity(), far], &intr(), None);
        assert_eq!(t, WarpTerms::default());
    }

    #[test]
    fn occluded_correspondences_are_skipped() {
        let (f, near) = (textured(1.5), textured(1.3));
        let frames = [&f, &near];
        let pixels: Vec<_> = (4..20).flat_map(|y| (4..28).map(move |x| (x, y))).collect();
        let poses = [Pose::identity(), Pose::identity()];
        let gated = WarpSetup { current_slot: 0, target_slots: vec![1], pixels, frames: &frames, occlusion: 0.1 };
        assert_eq!(loss_warp(&gated, &poses, &intr(), None), WarpTerms::default());
        let open = WarpSetup { occlusion: 0.3, ..gated };
        let t = loss_warp(&open, &poses, &intr(), None);
        assert_eq!(t.n, 16 * 24);
        assert!((t.depth - 0.2).abs() < 1e-6);
    }

    #[test]
    fn warp_depth_grows_with_offset() {
        let f = textured(1.5);
        let frames = [&f, &f];
        let pixels: Vec<_> = (4..20).flat_map(|y| (4..28).map(move |x| (x, y))).collect();
        let setup =
            WarpSetup { current_slot: 0, target_slots: vec![1], pixels, frames: &frames, occlusion: f64::INFINITY };
        let at = |dz: f64| {
            loss_warp(&setup, &[Pose::identity(), Pose::from_translation(Vector3::new(0.0, 0.0, dz))], &intr(), None)
        };
        assert_eq!(at(0.0).depth, 0.0);
        assert!(at(0.01).depth > 0.0);
        assert!(at(0.02).depth > at(0.01).depth);
    }

    #[test]
    fn warp_pose_gradient_matches_finite_differences() {
        let f = textured(1.5);
        let frames = [&f, &f];
        let pixels: Vec<_> = (4..20).step_by(3).flat_map(|y| (4..28).step_by(3).map(move |x| (x, y))).collect();
        let setup =
            WarpSetup { current_slot: 0, target_slots: vec![1], pixels, frames: &frames, occlusion: f64::INFINITY };
        let base = [
            Pose::exp(&Tangent::new(0.011, -0.007, 0.013, 0.004, -0.006, 0.002)),
            Pose::exp(&Tangent::new(-0.02, 0.004, 0.031, -0.003, 0.005, 0.007)),
        ];
        let mut g = vec![Tangent::zeros(); 2];
        loss_warp(&setup, &base, &intr(), Some((&mut g, 0.0, 1.0)));
        let h = 1e-7;
        for slot in 0..2 {
            for k in 0..6 {
                let mut d = Tangent::zeros();
                d[k] = h;
                let mut p = base;
                p[slot] = base[slot].retract(&d);
                let mut m = base;
                m[slot] = base[slot].retract(&(-d));
                let fd = (loss_warp(&setup, &p, &intr(), None).depth - loss_warp(&setup, &m, &intr(), None).depth)
                    / (2.0 * h);
                assert!(
                    (fd - g[slot][k]).abs() <= 1e-5 * fd.abs().max(1e-2),
                    "slot {slot} k {k}: {fd} vs {}",
                    g[slot][k]
                );
            }
        }
    }
}
