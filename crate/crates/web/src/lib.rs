//! Browser bindings: render views of a fused map, plot the rendering weight
//! and run sliding-window selection on hand-edited overlap counts.

use nalgebra::Vector3;
use wasm_bindgen::prelude::*;

use hvslam::decoder::{DecoderConfig, DecoderParams};
use hvslam::frame::{Frame, Image};
use hvslam::fusion::integrate_frame;
use hvslam::geometry::{CameraIntrinsics, Pose};
use hvslam::pipeline::model::Model;
use hvslam::pipeline::synth::{default_intrinsics, generate, ScenePreset, SynthSpec, TrajectoryKind};
use hvslam::render::{render_image, weight, RenderConfig};
use hvslam::svo::{HybridVoxelMap, MapConfig};
use hvslam::window::{select_window, KeyframeList, WindowMode};

/// A map with its decoder, viewed by an orbiting camera.
#[wasm_bindgen]
pub struct Viewer {
    model: Model,
    target: Vector3<f64>,
    width: usize,
    height: usize,
}

#[wasm_bindgen]
impl Viewer {
    /// Fuses SDF priors from `views` synthetic frames of a preset scene
    /// (`room` or `sphere`) into a fresh map. The decoder residual is zero,
    /// so the geometry is the fused prior alone and colour is flat grey.
    pub fn fused(scene: &str, views: usize, width: usize, height: usize) -> Result<Viewer, String> {
        let preset: ScenePreset = scene.parse()?;
        let (trajectory, target) = match preset {
            ScenePreset::Room => (TrajectoryKind::Arc, Vector3::new(0.0, 0.0, 0.5)),
            ScenePreset::Sphere => (TrajectoryKind::Orbit, Vector3::zeros()),
            ScenePreset::Plane => return Err("the plane scene has no orbit to fuse from".into()),
        };
        let spec = SynthSpec { scene: preset, trajectory, frames: views.max(1), width, height, ..SynthSpec::default() };
        let seq = generate(&spec).map_err(|e| e.to_string())?;
        let gt = seq.ground_truth.clone().ok_or("generator returned no ground truth")?;
        let mut map = HybridVoxelMap::new(MapConfig::default());
        for (i, (_, pose)) in gt.iter().enumerate() {
            let mut frame = seq.frame(i).map_err(|e| e.to_string())?;
            frame.pose = *pose;
            map.allocate_from_frame(&frame, &seq.intrinsics);
            integrate_frame(&mut map, &frame, &seq.intrinsics);
        }
        let mut decoder = DecoderParams::new(map.feature_dim(), &DecoderConfig::default());
        for m in [&mut decoder.ws, &mut decoder.wc] {
            m.fill(0.0);
        }
        decoder.bs.fill(0.0);
        decoder.bc.fill(0.0);
        let model = Model { map, decoder, render: RenderConfig::default() };
        Ok(Viewer { model, target, width, height })
    }

    /// Loads a model file written by `hvslam run --model`, looking at
    /// `(tx, ty, tz)`.
    pub fn from_model(bytes: &[u8], tx: f64, ty: f64, tz: f64, width: usize, height: usize) -> Result<Viewer, String> {
        let model = Model::read(&mut &bytes[..]).map_err(|e| e.to_string())?;
        Ok(Viewer { model, target: Vector3::new(tx, ty, tz), width, height })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn leaves(&self) -> usize {
        self.model.map.num_leaves()
    }

    /// Renders from a camera at `distance` from the target, at azimuth and
    /// elevation in degrees (z up). Returns `width * height * 4` values per
    /// pixel `r, g, b, depth`; empty rays are all zero.
    pub fn render(&self, azimuth: f64, elevation: f64, distance: f64) -> Vec<f32> {
        let pose = self.orbit_pose(azimuth, elevation, distance);
        let (color, depth) =
            render_image(&self.model.map, &self.model.decoder, &pose, &self.intrinsics(), &self.model.render);
        color.data().iter().zip(depth.data()).flat_map(|(c, d)| [c[0], c[1], c[2], *d]).collect()
    }

    /// Toggles the fused prior in the coarse SDF.
    pub fn set_use_prior(&mut self, on: bool) {
        self.model.render.use_prior = on;
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        default_intrinsics(self.width, self.height)
    }

    fn orbit_pose(&self, azimuth: f64, elevation: f64, distance: f64) -> Pose {
        let (a, e) = (azimuth.to_radians(), elevation.to_radians().clamp(-1.5, 1.5));
        let eye = self.target + Vector3::new(a.cos() * e.cos(), a.sin() * e.cos(), e.sin()) * distance;
        Pose::look_at(eye, self.target, Vector3::z())
    }
}

/// Rendering weight at `samples` evenly spaced SDF values across
/// `[-range, range]`, for truncation `tr` and kernel scale `scale`.
#[wasm_bindgen]
pub fn weight_curve(tr: f64, scale: f64, range: f64, samples: usize) -> Vec<f64> {
    let k = tr * scale;
    let n = samples.max(2);
    (0..n).map(|i| weight(-range + 2.0 * range * i as f64 / (n - 1) as f64, k)).collect()
}

/// Window chosen for the current frame from per-keyframe overlap counts.
#[wasm_bindgen]
pub struct WindowChoice {
    local: Vec<u32>,
    historical: Vec<u32>,
}

#[wasm_bindgen]
impl WindowChoice {
    /// Keyframe indices with the largest overlap (or drawn, per mode).
    pub fn local(&self) -> Vec<u32> {
        self.local.clone()
    }

    /// Keyframe indices drawn from the rest.
    pub fn historical(&self) -> Vec<u32> {
        self.historical.clone()
    }
}

/// Selects a window of `size` keyframes. `mode` is `standard`, `loop-rand`
/// or `random`; `counts[i]` is the overlap of keyframe `i`.
#[wasm_bindgen]
pub fn choose_window(counts: Vec<u32>, size: usize, mode: &str, seed: u64) -> Result<WindowChoice, String> {
    let mode: WindowMode = mode.parse()?;
    if size < 2 || !size.is_multiple_of(2) {
        return Err("window size must be even and at least 2".into());
    }
    let intr = CameraIntrinsics::new(1.0, 1.0, 0.5, 0.5, 2, 2, 0.001).map_err(|e| e.to_string())?;
    let mut kfs = KeyframeList::new();
    for i in 0..counts.len() {
        let frame = Frame::new(i, i as f64, Image::filled(2, 2, [0.0; 3]), Image::filled(2, 2, 1.0), &intr)
            .map_err(|e| e.to_string())?;
        kfs.push(frame);
    }
    let counts: Vec<usize> = counts.iter().map(|&c| c as usize).collect();
    let w = select_window(&counts, &kfs, size, mode, seed);
    let ids = |v: &[usize]| v.iter().map(|&i| i as u32).collect();
    Ok(WindowChoice { local: ids(&w.local), historical: ids(&w.historical) })
}
