//! RGB-D frames and the small image container they are built on.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    SizeMismatch { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("depth must be finite and non-negative (found {0})")]
    BadDepth(f32),
}

/// Row-major image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "pixel buffer does not match image size");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    /// Nearest pixel to a continuous location, if it lies on the image.
    #[inline]
    pub fn nearest(&self, px: &Vector2<f64>) -> Option<&T> {
        let x = px.x.round();
        let y = px.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some(self.get(x as usize, y as usize))
    }
}

pub type DepthImage = Image<f32>;
pub type ColorImage = Image<[f32; 3]>;

impl ColorImage {
    /// Bilinear colour lookup plus its derivative with respect to the pixel
    /// location (columns: d/du, d/dv). The location must lie inside
    /// `[0, w-1] x [0, h-1]`.
    pub fn bilinear(&self, px: &Vector2<f64>) -> (Vector3<f64>, [Vector3<f64>; 2]) {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        // Locations within round-off of a pixel centre read that pixel exactly.
        let snap = |a: f64| if (a - a.round()).abs() < 1e-9 { a.round() } else { a };
        let u = snap(px.x.clamp(0.0, max_x));
        let v = snap(px.y.clamp(0.0, max_y));
        let x0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let c = |x: usize, y: usize| {
            let p = self.get(x, y);
            Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
        };
        let (c00, c10, c01, c11) = (c(x0, y0), c(x1, y0), c(x0, y1), c(x1, y1));
        let value =
            c00 * ((1.0 - fx) * (1.0 - fy)) + c10 * (fx * (1.0 - fy)) + c01 * ((1.0 - fx) * fy) + c11 * (fx * fy);
        let du = (c10 - c00) * (1.0 - fy) + (c11 - c01) * fy;
        let dv = (c01 - c00) * (1.0 - fx) + (c11 - c10) * fx;
        (value, [du, dv])
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vector3<f64> {
        let p = self.get(x, y);
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    }
}

/// One RGB-D observation with its current pose estimate.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: usize,
    pub timestamp: f64,
    pub color: ColorImage,
    /// z-depth in meters; 0 marks a missing measurement.
    pub depth: DepthImage,
    /// World-from-camera.
    pub pose: Pose,
    pub is_keyframe: bool,
    valid: Vec<u32>,
}

impl Frame {
    pub fn new(
        id: usize,
        timestamp: f64,
        color: ColorImage,
        depth: DepthImage,
        intr: &CameraIntrinsics,
    ) -> Result<Self, FrameError> {
        for img in [(color.width, color.height), (depth.width, depth.height)] {
            if img != (intr.width, intr.height) {
                return Err(FrameError::SizeMismatch {
                    got_w: img.0,
                    got_h: img.1,
                    want_w: intr.width,
                    want_h: intr.height,
                });
            }
        }
        if let Some(&bad) = depth.data.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(FrameError::BadDepth(bad));
        }
        let valid = depth.data.iter().enumerate().filter(|(_, &d)| d > 0.0).map(|(i, _)| i as u32).collect();
        Ok(Self { id, timestamp, color, depth, pose: Pose::identity(), is_keyframe: false, valid })
    }

    pub fn width(&self) -> usize {
        self.depth.width
    }

    pub fn height(&self) -> usize {
        self.depth.height
    }

    /// Linear indices of pixels carrying a valid depth.
    pub fn valid_pixels(&self) -> &[u32] {
        &self.valid
    }

    #[inline]
    pub fn pixel_of(&self, index: u32) -> (usize, usize) {
        let i = index as usize;
        (i % self.width(), i / self.width())
    }

    #[inline]
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        *self.depth.get(x, y) as f64
    }

    /// Draws `n` valid-depth pixels uniformly (with replacement).
    pub fn sample_valid<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
        if self.valid.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| self.pixel_of(self.valid[rng.random_range(0..self.valid.len())])).collect()
    }
}
