//! Sparse volume rendering over the hybrid map.
//!
//! Rays are sampled at a fixed spacing only inside allocated leaves. At each
//! sample the map is interpolated, the residual decoder adds its correction
//! to the coarse SDF, and colour/depth are composited with the bell-shaped
//! weight `sigmoid(s/tr) * sigmoid(-s/tr)`, normalized by the weight sum.
//!
//! [`BatchRender`] keeps everything needed for the reverse pass: gradients
//! reach the vertex features, the vertex priors, the decoder and the pose of
//! the camera that cast each ray (left perturbation).

use nalgebra::{DMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{sigmoid, DecoderOutput, DecoderParams};
use crate::frame::{ColorImage, DepthImage, Image};
use crate::geometry::{pose_grad_from_point, CameraIntrinsics, Pose, Tangent};
use crate::svo::{HybridVoxelMap, Interp, PriorBlend, VoxelCoord};

/// Weight sums at or below this mark a ray as empty.
pub const EMPTY_RAY_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum RenderError {
    #[error("ray carries no rendering weight")]
    EmptyRay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Truncation distance `tr` in meters.
    pub truncation: f64,
    /// Sample spacing along the ray in meters.
    pub step: f64,
    pub max_samples: usize,
    pub max_range: f64,
    /// When false the coarse SDF is dropped and geometry comes from the
    /// decoder alone.
    pub use_prior: bool,
    /// Blend the coarse SDF over observed vertices only, so vertices without
    /// an accepted prior estimate do not read as surface.
    pub observed_prior_only: bool,
    /// Composite only up to `truncation` behind the first surface crossing.
    pub first_surface_only: bool,
    /// Width of the rendering weight kernel as a fraction of `truncation`.
    pub kernel_scale: f64,
}

impl RenderConfig {
    /// Length scale passed to [`weight`].
    pub fn kernel_width(&self) -> f64 {
        self.truncation * self.kernel_scale
    }

    /// Coarse SDF at a stencil; `None` when priors are disabled.
    pub fn prior_blend(&self, map: &HybridVoxelMap, it: &Interp) -> Option<PriorBlend> {
        match (self.use_prior, self.observed_prior_only) {
            (false, _) => None,
            (true, true) => Some(map.blend_prior_observed(it)),
            (true, false) => Some(map.blend_prior_all(it)),
        }
    }
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            truncation: 0.1,
            step: 0.05,
            max_samples: 48,
            max_range: 10.0,
            use_prior: true,
            observed_prior_only: true,
            first_surface_only: true,
            kernel_scale: 0.125,
        }
    }
}

/// Rendering weight of a sample with signed distance `s`.
#[inline]
pub fn weight(s: f64, tr: f64) -> f64 {
    let x = s / tr;
    sigmoid(x) * sigmoid(-x)
}

/// `d weight / d s`.
#[inline]
pub fn weight_derivative(s: f64, tr: f64) -> f64 {
    let x = s / tr;
    let a = sigmoid(x);
    let b = sigmoid(-x);
    a * b * (b - a) / tr
}

/// A sample position on a ray, tagged with the leaf it was drawn from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub t: f64,
    pub voxel: VoxelCoord,
}

/// Samples at `t = (k + 1/2) * step` that fall inside allocated leaves,
/// nearest first, capped at `max_samples`.
pub fn sample_ray(
    map: &HybridVoxelMap,
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    max_range: f64,
    step: f64,
    max_samples: usize,
) -> Vec<SamplePoint> {
    let mut out = Vec::new();
    for hit in map.ray_voxel_intersect(origin, direction, max_range) {
        let mut k = (hit.t_entry / step - 0.5).ceil().max(0.0) as i64;
        loop {
            let t = (k as f64 + 0.5) * step;
            if t >= hit.t_exit || t > max_range || out.len() >= max_samples {
                break;
            }
            if t >= hit.t_entry {
                out.push(SamplePoint { t, voxel: hit.voxel });
            }
            k += 1;
        }
        if out.len() >= max_samples {
            break;
        }
    }
    out
}

/// Fully evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySample {
    pub t: f64,
    /// z-depth of the sample in the casting camera.
    pub depth: f64,
    pub point: Vector3<f64>,
    pub sdf_coarse: f64,
    pub sdf: f64,
    pub color: [f64; 3],
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub color: Vector3<f64>,
    pub depth: f64,
    pub weight_sum: f64,
    pub samples: Vec<RaySample>,
}

impl RenderResult {
    /// Normalized compositing coefficients `w_j / sum w`.
    pub fn coefficients(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.weight / self.weight_sum).collect()
    }
}

/// Weight-normalized colour and depth of a ray.
pub fn composite(samples: Vec<RaySample>) -> Result<RenderResult, RenderError> {
    let weight_sum: f64 = samples.iter().map(|s| s.weight).sum();
    if !(weight_sum > EMPTY_RAY_EPS) {
        return Err(RenderError::EmptyRay);
    }
    let mut color = Vector3::zeros();
    let mut depth = 0.0;
    for s in &samples {
        color += Vector3::from(s.color) * s.weight;
        depth += s.depth * s.weight;
    }
    Ok(RenderResult { color: color / weight_sum, depth: depth / weight_sum, weight_sum, samples })
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradRequest {
    pub poses: bool,
    pub features: bool,
    pub priors: bool,
    pub decoder: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest { poses: true, features: true, priors: true, decoder: true };
    pub const POSES: GradRequest = GradRequest { poses: true, features: false, priors: false, decoder: false };
}

/// Accumulated gradients. Buffers for groups that were not requested are
/// left empty.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub poses: Vec<Tangent>,
    /// Vertex-major, `num_vertices * feature_dim`.
    pub features: Vec<f64>,
    pub priors: Vec<f64>,
    pub decoder: Option<DecoderParams>,
}

impl Gradients {
    pub fn new(num_poses: usize, map: &HybridVoxelMap, params: &DecoderParams, req: GradRequest) -> Self {
        Self {
            poses: vec![Tangent::zeros(); num_poses],
            features: if req.features { vec![0.0; map.num_vertices() * map.feature_dim()] } else { Vec::new() },
            priors: if req.priors { vec![0.0; map.num_vertices()] } else { Vec::new() },
            decoder: req.decoder.then(|| params.zeros_like()),
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.poses.iter_mut().for_each(|p| *p *= k);
        self.features.iter_mut().for_each(|g| *g *= k);
        self.priors.iter_mut().for_each(|g| *g *= k);
        if let Some(d) = &mut self.decoder {
            for s in d.slices_mut() {
                s.iter_mut().for_each(|g| *g *= k);
            }
        }
    }
}

/// One ray to render: the camera slot casting it and the integer pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RayQuery {
    pub slot: usize,
    pub pixel: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct RayRecord {
    pub query: RayQuery,
    /// Range into the batch's sample arrays.
    pub start: usize,
    pub end: usize,
    /// Composited colour, depth and weight sum; `None` for empty rays.
    pub result: Option<(Vector3<f64>, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub ray: usize,
    pub depth: f64,
    pub point: Vector3<f64>,
    pub interp: Interp,
    pub sdf_coarse: f64,
    pub sdf: f64,
    pub color: [f64; 3],
    pub weight: f64,
    /// False for samples cut off behind the first surface crossing.
    pub visible: bool,
}

/// Per-sample upstream gradients `(dL/ds_j, dL/dc_j)`.
#[derive(Debug, Clone)]
pub struct SampleUpstream {
    pub sdf: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl SampleUpstream {
    pub fn zeros(n: usize) -> Self {
        Self { sdf: vec![0.0; n], color: vec![[0.0; 3]; n] }
    }
}

/// Forward pass over a batch of rays, retaining what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct BatchRender {
    pub rays: Vec<RayRecord>,
    pub samples: Vec<SampleRecord>,
    pub config: RenderConfig,
    features: DMatrix<f64>,
    decoded: Option<DecoderOutput>,
}

impl BatchRender {
    pub fn forward(
        map: &HybridVoxelMap,
        params: &DecoderParams,
        poses: &[Pose],
        intr: &CameraIntrinsics,
        queries: &[RayQuery],
        config: &RenderConfig,
    ) -> Self {
        let mut rays = Vec::with_capacity(queries.len());
        let mut samples = Vec::new();
        for (ri, q) in queries.iter().enumerate() {
            let pose = &poses[q.slot];
            let dir_cam = intr.ray_through(&Vector2::new(q.pixel.0 as f64, q.pixel.1 as f64));
            let norm = dir_cam.norm();
            let unit_cam = dir_cam / norm;
            let origin = *pose.translation();
            let dir = pose.transform_vector(&unit_cam);
            let start = samples.len();
            for sp in sample_ray(map, &origin, &dir, config.max_range, config.step, config.max_samples) {
                let point = origin + dir * sp.t;
                let Some(interp) = map.interp_in(&sp.voxel, &point) else { continue };
                let sdf_coarse = config.prior_blend(map, &interp).map_or(0.0, |b| b.value);
                samples.push(SampleRecord {
                    ray: ri,
                    depth: sp.t / norm,
                    point,
                    interp,
                    sdf_coarse,
                    sdf: 0.0,
                    color: [0.0; 3],
                    weight: 0.0,
                    visible: true,
                });
            }
            rays.push(RayRecord { query: *q, start, end: samples.len(), result: None });
        }

        let d = map.feature_dim();
        let mut features = DMatrix::zeros(d, samples.len());
        for (j, s) in samples.iter().enumerate() {
            map.blend_feature(&s.interp, features.column_mut(j).as_mut_slice());
        }
        let decoded = (!samples.is_empty()).then(|| params.forward(&features));
        if let Some(out) = &decoded {
            for (j, s) in samples.iter_mut().enumerate() {
                s.sdf = s.sdf_coarse + out.sdf[(0, j)];
                s.color = [out.color[(0, j)], out.color[(1, j)], out.color[(2, j)]];
                s.weight = weight(s.sdf, config.kernel_width());
            }
        }
        if config.first_surface_only {
            for r in &rays {
                cut_behind_first_surface(&mut samples[r.start..r.end], config.truncation);
            }
        }
        for r in &mut rays {
            let ss = &samples[r.start..r.end];
            let wsum: f64 = ss.iter().map(|s| s.weight).sum();
            if wsum > EMPTY_RAY_EPS {
                let mut c = Vector3::zeros();
                let mut dep = 0.0;
                for s in ss {
                    c += Vector3::from(s.color) * s.weight;
                    dep += s.depth * s.weight;
                }
                r.result = Some((c / wsum, dep / wsum, wsum));
            }
        }
        Self { rays, samples, config: *config, features, decoded }
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn ray_samples(&self, ray: usize) -> &[SampleRecord] {
        &self.samples[self.rays[ray].start..self.rays[ray].end]
    }

    /// Materializes one ray as a [`RenderResult`].
    pub fn result(&self, ray: usize) -> Result<RenderResult, RenderError> {
        let r = &self.rays[ray];
        let (color, depth, weight_sum) = r.result.ok_or(RenderError::EmptyRay)?;
        let samples = self
            .ray_samples(ray)
            .iter()
            .map(|s| RaySample {
                t: 0.0,
                depth: s.depth,
                point: s.point,
                sdf_coarse: s.sdf_coarse,
                sdf: s.sdf,
                color: s.color,
                weight: s.weight,
            })
            .collect();
        Ok(RenderResult { color, depth, weight_sum, samples })
    }

    /// Pushes gradients on a ray's composited colour and depth down to its
    /// samples.
    pub fn composite_backward(&self, ray: usize, d_color: &Vector3<f64>, d_depth: f64, up: &mut SampleUpstream) {
        let r = &self.rays[ray];
        let Some((color, depth, wsum)) = r.result else { return };
        let tr = self.config.kernel_width();
        for j in r.start..r.end {
            let s = &self.samples[j];
            if !s.visible {
                continue;
            }
            let a = s.weight / wsum;
            for k in 0..3 {
                up.color[j][k] += d_color[k] * a;
            }
            let dw = d_color.dot(&(Vector3::from(s.color) - color)) / wsum + d_depth * (s.depth - depth) / wsum;
            up.sdf[j] += dw * weight_derivative(s.sdf, tr);
        }
    }

    /// Reverse pass from per-sample upstream gradients into `grads`.
    pub fn backward(
        &self,
        map: &HybridVoxelMap,
        params: &DecoderParams,
        up: &SampleUpstream,
        req: GradRequest,
        grads: &mut Gradients,
    ) {
        let Some(out) = &self.decoded else { return };
        let n = self.samples.len();
        let active: Vec<bool> = (0..n).map(|j| up.sdf[j] != 0.0 || up.color[j].iter().any(|&c| c != 0.0)).collect();
        if !active.iter().any(|&a| a) {
            return;
        }
        let d_color = DMatrix::from_fn(3, n, |k, j| up.color[j][k]);
        let d_sdf = DMatrix::from_fn(1, n, |_, j| up.sdf[j]);
        let (dparams, d_feat) = params.backward(&self.features, out, &d_color, &d_sdf, req.decoder);
        if let (Some(dp), Some(acc)) = (dparams, grads.decoder.as_mut()) {
            for (a, g) in acc.slices_mut().into_iter().zip(dp.slices()) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
        }
        let vs = map.voxel_size();
        let d = map.feature_dim();
        for (j, s) in self.samples.iter().enumerate() {
            if !active[j] {
                continue;
            }
            let de = &d_feat.as_slice()[j * d..(j + 1) * d];
            let ds = up.sdf[j];
            let blend = self.config.prior_blend(map, &s.interp);
            map.scatter_into(
                &s.interp,
                req.features.then_some(de),
                ds,
                req.features.then_some(grads.features.as_mut_slice()),
                None,
            );
            if let (true, Some(b)) = (req.priors, &blend) {
                for (&vid, &w) in s.interp.vertices.iter().zip(&b.weights) {
                    grads.priors[vid as usize] += w * ds;
                }
            }
            if req.poses {
                let wg = s.interp.weight_gradients(vs);
                let mut gp = Vector3::zeros();
                for (c, &vid) in s.interp.vertices.iter().enumerate() {
                    let mut coeff: f64 = map.feature(vid).iter().zip(de.iter()).map(|(e, g)| e * g).sum();
                    if let Some(b) = &blend {
                        coeff += ds * b.coefficients[c];
                    }
                    gp += wg[c] * coeff;
                }
                let slot = self.rays[s.ray].query.slot;
                grads.poses[slot] += pose_grad_from_point(&s.point, &gp);
            }
        }
    }
}

/// Zeroes the weight of samples lying more than `tr` behind the first
/// positive-to-negative SDF crossing.
fn cut_behind_first_surface(samples: &mut [SampleRecord], tr: f64) {
    let Some(k) = samples.windows(2).position(|w| w[0].sdf > 0.0 && w[1].sdf <= 0.0) else { return };
    let (a, b) = (&samples[k], &samples[k + 1]);
    let cut = a.depth + a.sdf / (a.sdf - b.sdf) * (b.depth - a.depth) + tr;
    for s in &mut samples[k + 1..] {
        if s.depth > cut {
            s.weight = 0.0;
            s.visible = false;
        }
    }
}

/// Renders a single pixel from `pose`.
pub fn render_pixel(
    map: &HybridVoxelMap,
    params: &DecoderParams,
    pose: &Pose,
    pixel: (usize, usize),
    intr: &CameraIntrinsics,
    config: &RenderConfig,
) -> Result<RenderResult, RenderError> {
    let batch = BatchRender::forward(map, params, &[*pose], intr, &[RayQuery { slot: 0, pixel }], config);
    batch.result(0)
}

/// Renders a full colour and depth image; empty rays come out black with
/// zero depth.
pub fn render_image(
    map: &HybridVoxelMap,
    params: &DecoderParams,
    pose: &Pose,
    intr: &CameraIntrinsics,
    config: &RenderConfig,
) -> (ColorImage, DepthImage) {
    let mut color = Image::filled(intr.width, intr.height, [0.0f32; 3]);
    let mut depth = Image::filled(intr.width, intr.height, 0.0f32);
    // Row chunks keep the decoder batches at a moderate size.
    for y in 0..intr.height {
        let queries: Vec<_> = (0..intr.width).map(|x| RayQuery { slot: 0, pixel: (x, y) }).collect();
        let batch = BatchRender::forward(map, params, &[*pose], intr, &queries, config);
        for (x, r) in batch.rays.iter().enumerate() {
            if let Some((c, d, _)) = r.result {
                *color.get_mut(x, y) = [c.x as f32, c.y as f32, c.z as f32];
                *depth.get_mut(x, y) = d as f32;
            }
        }
    }
    (color, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::svo::MapConfig;

    #[test]
    fn weight_properties() {
        assert_eq!(weight(0.0, 0.1), 0.25);
        assert!(weight(1e3, 0.1) < 1e-300 + 1e-12);
        assert!(weight(-1e3, 0.1) < 1e-12);
        for s in [0.01, 0.2, -0.37, 1.5] {
            assert_eq!(weight(s, 0.1), weight(-s, 0.1));
            assert!(weight(s, 0.1) < 0.25);
        }
        let h = 1e-7;
        for s in [-0.2, -0.03, 0.0, 0.04, 0.3] {
            let fd = (weight(s + h, 0.1) - weight(s - h, 0.1)) / (2.0 * h);
            assert!((fd - weight_derivative(s, 0.1)).abs() < 1e-6);
        }
    }

    fn sample(depth: f64, color: [f64; 3], weight: f64) -> RaySample {
        RaySample { t: depth, depth, point: Vector3::zeros(), sdf_coarse: 0.0, sdf: 0.0, color, weight }
    }

    #[test]
    fn composite_examples() {
        let r = composite(vec![sample(1.3, [0.1, 0.2, 0.3], 0.2)]).unwrap();
        assert!((r.color - Vector3::new(0.1, 0.2, 0.3)).norm() < 1e-15);
        assert!((r.depth - 1.3).abs() < 1e-15);
        let r = composite(vec![sample(1.0, [0.0; 3], 0.1), sample(2.0, [1.0; 3], 0.1)]).unwrap();
        assert!((r.color.x - 0.5).abs() < 1e-15);
        assert!((r.coefficients().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(composite(vec![sample(1.0, [0.0; 3], 0.0)]), Err(RenderError::EmptyRay));
        assert_eq!(composite(Vec::new()), Err(RenderError::EmptyRay));
    }

    #[test]
    fn one_voxel_four_samples() {
        let mut map = HybridVoxelMap::new(MapConfig { feature_dim: 2, ..MapConfig::default() });
        map.allocate(VoxelCoord::new(5, 0, 0));
        let s = sample_ray(&map, &Vector3::new(0.0, 0.1, 0.1), &Vector3::x(), 10.0, 0.05, 48);
        assert_eq!(s.len(), 4);
        assert!(s.iter().all(|p| p.t >= 1.0 && p.t < 1.2));
        assert!(sample_ray(&map, &Vector3::new(0.0, 0.5, 0.1), &Vector3::x(), 10.0, 0.05, 48).is_empty());
    }

    #[test]
    fn uncovered_pixel_is_empty() {
        let map = HybridVoxelMap::new(MapConfig { feature_dim: 4, ..MapConfig::default() });
        let params = DecoderParams::new(4, &DecoderConfig { hidden: 8, ..DecoderConfig::default() });
        let intr = CameraIntrinsics::new(50.0, 50.0, 20.0, 15.0, 40, 30, 0.001).unwrap();
        let r = render_pixel(&map, &params, &Pose::identity(), (3, 4), &intr, &RenderConfig::default());
        assert_eq!(r, Err(RenderError::EmptyRay));
    }
}
