//! RGB-D sequences, the on-disk dataset layout and TUM trajectory text.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! intrinsics.txt   fx fy cx cy width height depth_scale
//! frames.txt       timestamp rgb/000000.png depth/000000.png   (one per frame)
//! rgb/%06d.png     8-bit RGB
//! depth/%06d.png   16-bit depth in units of depth_scale meters (0 = missing)
//! gt_traj.txt      optional ground truth, TUM format
//! ```
//!
//! Without `frames.txt` the frames are the sorted `rgb/*.png` files paired
//! with equally named depth files, stamped from `gt_traj.txt` when it has a
//! matching length and at 30 Hz otherwise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, Vector3};
use thiserror::Error;

use crate::frame::{ColorImage, DepthImage, Frame, FrameError};
use crate::geometry::{CameraIntrinsics, Pose};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// One RGB-D frame of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub color: ColorImage,
    pub depth: DepthImage,
}

/// An RGB-D sequence held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSequence {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameRecord>,
    pub ground_truth: Option<Vec<(f64, Pose)>>,
}

impl DatasetSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks sizes, depth values and timestamp order.
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.intrinsics.validate().map_err(|e| DatasetError::Invalid(e.to_string()))?;
        for w in self.frames.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                return Err(DatasetError::Invalid("timestamps decrease".into()));
            }
        }
        for (i, _) in self.frames.iter().enumerate() {
            self.frame(i)?;
        }
        Ok(())
    }

    /// Builds frame `i` with an identity pose.
    pub fn frame(&self, i: usize) -> Result<Frame, DatasetError> {
        let r = &self.frames[i];
        Ok(Frame::new(i, r.timestamp, r.color.clone(), r.depth.clone(), &self.intrinsics)?)
    }

    /// Keeps every `step`-th frame of the first `limit` frames.
    pub fn subsample(&self, limit: usize, step: usize) -> Self {
        let step = step.max(1);
        let keep = |i: &usize| *i < limit && i.is_multiple_of(step);
        Self {
            intrinsics: self.intrinsics,
            frames: self.frames.iter().enumerate().filter(|(i, _)| keep(i)).map(|(_, f)| f.clone()).collect(),
            ground_truth: self
                .ground_truth
                .as_ref()
                .map(|gt| gt.iter().enumerate().filter(|(i, _)| keep(i)).map(|(_, p)| *p).collect()),
        }
    }
}

/// `fx fy cx cy width height depth_scale`
pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!("{} {} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale)
}

pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics, String> {
    let line =
        text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#')).ok_or("no intrinsics line")?;
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 7 {
        return Err(format!("expected 7 fields, found {}", f.len()));
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {}: {e}", i + 1));
    let int = |i: usize| f[i].parse::<usize>().map_err(|e| format!("field {}: {e}", i + 1));
    CameraIntrinsics::new(num(0)?, num(1)?, num(2)?, num(3)?, int(4)?, int(5)?, num(6)?).map_err(|e| e.to_string())
}

/// TUM trajectory text: `timestamp tx ty tz qx qy qz qw` per line.
pub fn format_tum(traj: &[(f64, Pose)]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (ts, pose) in traj {
        let t = pose.translation();
        let mut q = pose.quaternion().into_inner();
        // One of the two equivalent signs, fixed for reproducible files.
        if q.w < 0.0 {
            q = -q;
        }
        writeln!(s, "{ts:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}", t.x, t.y, t.z, q.i, q.j, q.k, q.w)
            .expect("writing to a String");
    }
    s
}

pub fn parse_tum(text: &str) -> Result<Vec<(f64, Pose)>, (usize, String)> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let v = v.map_err(|e| (n + 1, e.to_string()))?;
        if v.len() != 8 {
            return Err((n + 1, format!("expected 8 fields, found {}", v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err((n + 1, "zero quaternion".into()));
        }
        out.push((v[0], Pose::from_quaternion(q, Vector3::new(v[1], v[2], v[3]))));
    }
    Ok(out)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

pub fn read_text(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>, DatasetError> {
    parse_tum(&read_text(path)?).map_err(|(line, msg)| DatasetError::Parse { path: path.into(), line, msg })
}

pub fn write_trajectory(path: &Path, traj: &[(f64, Pose)]) -> Result<(), DatasetError> {
    write_text(path, &format_tum(traj))
}

#[cfg(feature = "io")]
pub mod png_io {
    use super::*;
    use image::{ImageBuffer, Luma, Rgb};

    pub fn write_color(path: &Path, img: &ColorImage) -> Result<(), DatasetError> {
        let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(img.width() as u32, img.height() as u32, |x, y| {
            Rgb(img.get(x as usize, y as usize).map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        buf.save(path).map_err(|e| DatasetError::Image { path: path.into(), msg: e.to_string() })
    }

    pub fn write_depth(path: &Path, img: &DepthImage, depth_scale: f64) -> Result<(), DatasetError> {
        let buf = ImageBuffer::<Luma<u16>, _>::from_fn(img.width() as u32, img.height() as u32, |x, y| {
            let units = (*img.get(x as usize, y as usize) as f64 / depth_scale).round();
            Luma([units.clamp(0.0, u16::MAX as f64) as u16])
        });
        buf.save(path).map_err(|e| DatasetError::Image { path: path.into(), msg: e.to_string() })
    }

    fn open(path: &Path) -> Result<image::DynamicImage, DatasetError> {
        image::open(path).map_err(|e| DatasetError::Image { path: path.into(), msg: e.to_string() })
    }

    pub fn read_color(path: &Path) -> Result<ColorImage, DatasetError> {
        let img = open(path)?.to_rgb8();
        let data = img.pixels().map(|p| p.0.map(|c| c as f32 / 255.0)).collect();
        Ok(ColorImage::from_vec(img.width() as usize, img.height() as usize, data))
    }

    pub fn read_depth(path: &Path, depth_scale: f64) -> Result<DepthImage, DatasetError> {
        let img = match open(path)? {
            image::DynamicImage::ImageLuma16(b) => b,
            _ => return Err(DatasetError::Image { path: path.into(), msg: "depth must be 16-bit grayscale".into() }),
        };
        let data = img.pixels().map(|p| (p.0[0] as f64 * depth_scale) as f32).collect();
        Ok(DepthImage::from_vec(img.width() as usize, img.height() as usize, data))
    }
}

#[cfg(feature = "io")]
impl DatasetSequence {
    /// Writes the sequence in the dataset layout, creating `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DatasetError> {
        for sub in ["rgb", "depth"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        write_text(&dir.join("intrinsics.txt"), &format_intrinsics(&self.intrinsics))?;
        let mut index = String::from("# timestamp rgb depth\n");
        for (i, f) in self.frames.iter().enumerate() {
            let rgb = format!("rgb/{i:06}.png");
            let depth = format!("depth/{i:06}.png");
            png_io::write_color(&dir.join(&rgb), &f.color)?;
            png_io::write_depth(&dir.join(&depth), &f.depth, self.intrinsics.depth_scale)?;
            writeln!(index, "{:.6} {rgb} {depth}", f.timestamp).expect("writing to a String");
        }
        write_text(&dir.join("frames.txt"), &index)?;
        if let Some(gt) = &self.ground_truth {
            write_trajectory(&dir.join("gt_traj.txt"), gt)?;
        }
        Ok(())
    }

    /// Loads a dataset directory.
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let kpath = dir.join("intrinsics.txt");
        let intrinsics = parse_intrinsics(&read_text(&kpath)?).map_err(|msg| DatasetError::Parse {
            path: kpath.clone(),
            line: 1,
            msg,
        })?;
        let gt_path = dir.join("gt_traj.txt");
        let ground_truth = if gt_path.exists() { Some(read_trajectory(&gt_path)?) } else { None };

        let index_path = dir.join("frames.txt");
        let entries: Vec<(f64, PathBuf, PathBuf)> = if index_path.exists() {
            let mut v = Vec::new();
            for (n, line) in read_text(&index_path)?.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let f: Vec<&str> = line.split_whitespace().collect();
                let bad = |msg: String| DatasetError::Parse { path: index_path.clone(), line: n + 1, msg };
                if f.len() != 3 {
                    return Err(bad(format!("expected 3 fields, found {}", f.len())));
                }
                let ts = f[0].parse::<f64>().map_err(|e| bad(e.to_string()))?;
                v.push((ts, dir.join(f[1]), dir.join(f[2])));
            }
            v
        } else {
            let rgb_dir = dir.join("rgb");
            let mut names: Vec<_> = std::fs::read_dir(&rgb_dir)
                .map_err(io_err(&rgb_dir))?
                .filter_map(|e| e.ok().map(|e| e.file_name()))
                .filter(|n| n.to_string_lossy().ends_with(".png"))
                .collect();
            names.sort();
            let stamps: Option<Vec<f64>> = ground_truth
                .as_ref()
                .filter(|gt| gt.len() == names.len())
                .map(|gt| gt.iter().map(|(t, _)| *t).collect());
            names
                .into_iter()
                .enumerate()
                .map(|(i, n)| {
                    let ts = stamps.as_ref().map_or(i as f64 / 30.0, |s| s[i]);
                    (ts, rgb_dir.join(&n), dir.join("depth").join(&n))
                })
                .collect()
        };

        let mut frames = Vec::with_capacity(entries.len());
        for (timestamp, rgb, depth) in entries {
            frames.push(FrameRecord {
                timestamp,
                color: png_io::read_color(&rgb)?,
                depth: png_io::read_depth(&depth, intrinsics.depth_scale)?,
            });
        }
        let seq = Self { intrinsics, frames, ground_truth };
        seq.validate()?;
        Ok(seq)
    }
}
