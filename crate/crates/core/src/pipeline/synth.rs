//! Analytic test scenes rendered into RGB-D sequences with exact poses.
//!
//! Depth is found by sphere tracing the scene SDF, colour is a procedural
//! albedo under view-independent Lambert shading from a point light. Images
//! are quantized exactly as the on-disk dataset stores them (8-bit colour,
//! millimeter depth) so in-memory and reloaded sequences agree bit for bit.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{ColorImage, DepthImage, Image};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::pipeline::dataset::{DatasetSequence, FrameRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("camera {frame} is {clearance:.3} m from the nearest surface (needs > {min} m)")]
    LeavesFreeSpace { frame: usize, clearance: f64, min: f64 },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

/// Minimum distance between any camera centre and the scene.
pub const MIN_CLEARANCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Free space is the inside of the box.
    Room {
        min: Vector3<f64>,
        max: Vector3<f64>,
    },
    Cuboid {
        center: Vector3<f64>,
        half: Vector3<f64>,
    },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    /// Free space on the side `normal` points to.
    Plane {
        point: Vector3<f64>,
        normal: Vector3<f64>,
    },
}

impl Shape {
    /// Signed distance, positive in free space.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            Shape::Room { min, max } => {
                let a = p - min;
                let b = max - p;
                a.min().min(b.min())
            }
            Shape::Cuboid { center, half } => {
                let q = (p - center).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Plane { point, normal } => (p - point).dot(&normal),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub surfaces: Vec<Surface>,
    pub light: Vector3<f64>,
    pub ambient: f64,
    /// Modulate albedo with a smooth procedural pattern.
    pub textured: bool,
}

impl SyntheticScene {
    /// A 4.4 x 4.4 x 2.6 m room (z up) with two boxes and a sphere.
    pub fn room() -> Self {
        let v = Vector3::new;
        Self {
            surfaces: vec![
                Surface {
                    shape: Shape::Room { min: v(-2.2, -2.2, 0.0), max: v(2.2, 2.2, 2.6) },
                    albedo: [0.85, 0.8, 0.7],
                },
                Surface {
                    shape: Shape::Cuboid { center: v(0.35, 0.25, 0.3), half: v(0.3, 0.25, 0.3) },
                    albedo: [0.8, 0.3, 0.25],
                },
                Surface {
                    shape: Shape::Cuboid { center: v(-0.3, 0.45, 0.55), half: v(0.2, 0.2, 0.55) },
                    albedo: [0.3, 0.6, 0.35],
                },
                Surface { shape: Shape::Sphere { center: v(-0.25, -0.4, 0.4), radius: 0.4 }, albedo: [0.3, 0.4, 0.85] },
            ],
            light: v(0.3, -0.2, 2.4),
            ambient: 0.35,
            textured: true,
        }
    }

    /// A lone sphere of the given radius at the origin.
    pub fn sphere(radius: f64) -> Self {
        Self {
            surfaces: vec![Surface {
                shape: Shape::Sphere { center: Vector3::zeros(), radius },
                albedo: [0.7, 0.6, 0.5],
            }],
            light: Vector3::new(1.0, -2.0, 3.0),
            ambient: 0.35,
            textured: true,
        }
    }

    /// The plane `z = distance`, free space toward the origin.
    pub fn plane(distance: f64) -> Self {
        Self {
            surfaces: vec![Surface {
                shape: Shape::Plane { point: Vector3::new(0.0, 0.0, distance), normal: -Vector3::z() },
                albedo: [0.6, 0.6, 0.6],
            }],
            light: Vector3::zeros(),
            ambient: 0.35,
            textured: true,
        }
    }

    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.surfaces.iter().map(|s| s.shape.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    fn closest(&self, p: &Vector3<f64>) -> &Surface {
        self.surfaces.iter().min_by(|a, b| a.shape.sdf(p).total_cmp(&b.shape.sdf(p))).expect("scene has surfaces")
    }

    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-5;
        let d = |e: Vector3<f64>| self.sdf(&(p + e * h)) - self.sdf(&(p - e * h));
        Vector3::new(d(Vector3::x()), d(Vector3::y()), d(Vector3::z())).normalize()
    }

    /// Shaded colour of a surface point.
    pub fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        let s = self.closest(p);
        let pattern = if self.textured {
            0.5 + ((5.1 * p.x + 1.3).sin() + (4.3 * p.y + 0.7).sin() + (3.7 * p.z + 2.1).sin()) / 6.0
        } else {
            1.0
        };
        let n = self.normal(p);
        let l = (self.light - p).normalize();
        let shade = self.ambient + (1.0 - self.ambient) * n.dot(&l).abs();
        let k = (0.55 + 0.45 * pattern) * shade;
        s.albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    /// Sphere-traces a ray; returns the distance to the first hit.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_t: f64) -> Option<f64> {
        let mut t = 0.0;
        for _ in 0..1024 {
            let d = self.sdf(&(origin + dir * t));
            if d < 1e-9 {
                return Some(t);
            }
            t += d;
            if t > max_t {
                return None;
            }
        }
        (self.sdf(&(origin + dir * t)) < 1e-6).then_some(t)
    }

    /// Renders quantized colour and depth (z-depth, 0 where nothing is hit).
    pub fn render(&self, pose: &Pose, intr: &CameraIntrinsics) -> (ColorImage, DepthImage) {
        let mut color = Image::filled(intr.width, intr.height, [0.0f32; 3]);
        let mut depth = Image::filled(intr.width, intr.height, 0.0f32);
        let origin = *pose.translation();
        for y in 0..intr.height {
            for x in 0..intr.width {
                let dc = intr.ray_through(&nalgebra::Vector2::new(x as f64, y as f64));
                let len = dc.norm();
                let dir = pose.transform_vector(&(dc / len));
                if let Some(t) = self.cast(&origin, &dir, 30.0) {
                    let p = origin + dir * t;
                    *depth.get_mut(x, y) = (t / len) as f32;
                    *color.get_mut(x, y) = self.color(&p).map(|c| c as f32);
                }
            }
        }
        (color, depth)
    }
}

/// Rounds colour to 8 bits and depth to millimeters (the dataset encoding).
pub fn quantize(color: &mut ColorImage, depth: &mut DepthImage, depth_scale: f64) {
    for c in color.data_mut() {
        *c = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    }
    for d in depth.data_mut() {
        let units = (*d as f64 / depth_scale).round();
        *d = if units <= 0.0 || units > u16::MAX as f64 { 0.0 } else { (units * depth_scale) as f32 };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenePreset {
    Room,
    Sphere,
    Plane,
}

impl ScenePreset {
    pub fn build(self) -> SyntheticScene {
        match self {
            ScenePreset::Room => SyntheticScene::room(),
            ScenePreset::Sphere => SyntheticScene::sphere(0.5),
            ScenePreset::Plane => SyntheticScene::plane(1.0),
        }
    }
}

impl std::str::FromStr for ScenePreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "room" => Ok(Self::Room),
            "sphere" => Ok(Self::Sphere),
            "plane" => Ok(Self::Plane),
            other => Err(format!("unknown scene `{other}` (room, sphere, plane)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    /// Arc around the room centre looking inward.
    Arc,
    /// Closed small circle with a sweeping gaze; ends where it started.
    Loop,
    /// Orbit around the origin (sphere scene).
    Orbit,
    /// Fixed camera at the origin looking down +z (plane scene).
    Static,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arc" => Ok(Self::Arc),
            "loop" => Ok(Self::Loop),
            "orbit" => Ok(Self::Orbit),
            "static" => Ok(Self::Static),
            other => Err(format!("unknown trajectory `{other}` (arc, loop, orbit, static)")),
        }
    }
}

/// Ground-truth camera pose of frame `i` out of `n`.
pub fn trajectory_pose(kind: TrajectoryKind, i: usize, n: usize) -> Pose {
    let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let z = Vector3::z();
    match kind {
        TrajectoryKind::Arc => {
            let a = -0.5 + 1.0 * u;
            let eye = Vector3::new(1.6 * a.cos(), 1.6 * a.sin(), 1.2 + 0.1 * (3.0 * a).sin());
            Pose::look_at(eye, Vector3::new(0.0, 0.0, 0.5), z)
        }
        TrajectoryKind::Loop => {
            let a = std::f64::consts::TAU * u;
            let eye = Vector3::new(1.3 + 0.25 * a.cos(), 0.25 * a.sin(), 1.2);
            let target = Vector3::new(0.0, 0.6 * a.sin(), 0.5 + 0.1 * a.cos());
            Pose::look_at(eye, target, z)
        }
        TrajectoryKind::Orbit => {
            let a = std::f64::consts::TAU * u;
            let eye = Vector3::new(1.5 * a.cos(), 1.5 * a.sin(), 0.6 * (2.0 * a).sin());
            Pose::look_at(eye, Vector3::zeros(), z)
        }
        TrajectoryKind::Static => Pose::identity(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub scene: ScenePreset,
    pub trajectory: TrajectoryKind,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Standard deviation of additive depth noise in meters.
    pub depth_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            scene: ScenePreset::Room,
            trajectory: TrajectoryKind::Arc,
            frames: 200,
            width: 160,
            height: 120,
            depth_noise: 0.0,
            seed: 0,
        }
    }
}

/// Pinhole intrinsics with a 67 degree horizontal field of view.
pub fn default_intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    let f = 0.75 * width as f64;
    CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height, 0.001)
        .expect("positive focal length")
}

/// Renders the whole sequence in memory. Timestamps are `i / 30`.
pub fn generate(spec: &SynthSpec) -> Result<DatasetSequence, SynthError> {
    if spec.width < 2 || spec.height < 2 {
        return Err(SynthError::Spec("resolution must be at least 2x2".into()));
    }
    if !(spec.depth_noise >= 0.0) {
        return Err(SynthError::Spec("depth noise must be non-negative".into()));
    }
    let scene = spec.scene.build();
    let intr = default_intrinsics(spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.depth_noise.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut records = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let pose = trajectory_pose(spec.trajectory, i, spec.frames);
        let clearance = scene.sdf(pose.translation());
        if clearance <= MIN_CLEARANCE {
            return Err(SynthError::LeavesFreeSpace { frame: i, clearance, min: MIN_CLEARANCE });
        }
        let (mut color, mut depth) = scene.render(&pose, &intr);
        if spec.depth_noise > 0.0 {
            for d in depth.data_mut().iter_mut().filter(|d| **d > 0.0) {
                *d = (*d as f64 + noise.sample(&mut rng)).max(0.0) as f32;
            }
        }
        quantize(&mut color, &mut depth, intr.depth_scale);
        let timestamp = i as f64 / 30.0;
        records.push(FrameRecord { timestamp, color, depth });
        gt.push((timestamp, pose));
    }
    Ok(DatasetSequence { intrinsics: intr, frames: records, ground_truth: Some(gt) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_center_depth() {
        let intr = default_intrinsics(41, 31);
        let (_, depth) = SyntheticScene::plane(1.0).render(&Pose::identity(), &intr);
        assert!((*depth.get(20, 15) as f64 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn sphere_silhouette_depth() {
        // Camera 2 m from the centre of a 0.5 m sphere: the nearest point
        // sits at depth 1.5 on the optical axis.
        let intr = default_intrinsics(41, 31);
        let pose = Pose::look_at(Vector3::new(0.0, 0.0, -2.0), Vector3::zeros(), Vector3::y());
        let (_, depth) = SyntheticScene::sphere(0.5).render(&pose, &intr);
        let min = depth.data().iter().filter(|d| **d > 0.0).fold(f32::INFINITY, |a, &b| a.min(b));
        assert!((min as f64 - 1.5).abs() < 1e-3);
        assert_eq!(*depth.get(0, 0), 0.0);
    }

    #[test]
    fn shapes_are_lipschitz() {
        let scene = SyntheticScene::room();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = rand_distr::Uniform::new(-2.5, 2.5).unwrap();
        for _ in 0..2000 {
            let a = Vector3::new(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng));
            let b = Vector3::new(u.sample(&mut rng), u.sample(&mut rng), u.sample(&mut rng));
            assert!((scene.sdf(&a) - scene.sdf(&b)).abs() <= (a - b).norm() + 1e-12);
        }
    }

    #[test]
    fn trajectories_stay_in_free_space() {
        let room = SyntheticScene::room();
        for kind in [TrajectoryKind::Arc, TrajectoryKind::Loop] {
            for i in 0..50 {
                assert!(room.sdf(trajectory_pose(kind, i, 50).translation()) > MIN_CLEARANCE);
            }
        }
        let loop_start = trajectory_pose(TrajectoryKind::Loop, 0, 50);
        let loop_end = trajectory_pose(TrajectoryKind::Loop, 49, 50);
        assert!(loop_start.distance(&loop_end).0 < 1e-9);
    }

    #[test]
    fn noise_free_generation_is_reproducible() {
        let spec = SynthSpec { frames: 2, width: 32, height: 24, ..SynthSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.frames[1].depth, b.frames[1].depth);
        assert_eq!(a.frames[1].color, b.frames[1].color);
    }

    #[test]
    fn leaving_free_space_is_an_error() {
        let spec = SynthSpec {
            scene: ScenePreset::Sphere,
            trajectory: TrajectoryKind::Static,
            frames: 1,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&spec), Err(SynthError::LeavesFreeSpace { .. })));
    }
}
