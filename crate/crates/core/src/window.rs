//! Keyframe list and covisibility-driven sliding-window selection.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frame::Frame;
use crate::geometry::{warp_pixel, CameraIntrinsics};

/// Keyframes in insertion order. Ids are strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct KeyframeList {
    frames: Vec<Frame>,
}

impl KeyframeList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a keyframe.
    ///
    /// # Panics
    /// If its id does not exceed the last keyframe id.
    pub fn push(&mut self, mut frame: Frame) {
        if let Some(last) = self.frames.last() {
            assert!(frame.id > last.id, "keyframe ids must increase");
        }
        frame.is_keyframe = true;
        self.frames.push(frame);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn get(&self, i: usize) -> &Frame {
        &self.frames[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Frame {
        &mut self.frames[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowMode {
    /// Local half by overlap rank, historical half at random.
    #[default]
    Standard,
    /// Local half drawn at random from the 2W best-overlapping keyframes.
    LoopRand,
    /// Every slot drawn uniformly at random (baseline without overlap).
    Random,
}

impl std::str::FromStr for WindowMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Self::Standard),
            "loop-rand" | "loop_rand" => Ok(Self::LoopRand),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown window mode `{other}` (standard, loop-rand, random)")),
        }
    }
}

/// Keyframe indices (into the [`KeyframeList`]) optimized together with the
/// current frame.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlidingWindow {
    pub local: Vec<usize>,
    pub historical: Vec<usize>,
}

impl SlidingWindow {
    pub fn keyframes(&self) -> impl Iterator<Item = usize> + '_ {
        self.local.iter().chain(&self.historical).copied()
    }

    pub fn len(&self) -> usize {
        self.local.len() + self.historical.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// For each keyframe, how many of `n_rep` sampled current-frame pixels land
/// inside it with positive depth.
pub fn overlap_counts(
    current: &Frame,
    kfs: &KeyframeList,
    intr: &CameraIntrinsics,
    n_rep: usize,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = current.sample_valid(n_rep, &mut rng);
    kfs.iter()
        .map(|kf| {
            pixels
                .iter()
                .filter(|&&(x, y)| {
                    warp_pixel(
                        &nalgebra::Vector2::new(x as f64, y as f64),
                        current.depth_at(x, y),
                        &current.pose,
                        &kf.pose,
                        intr,
                    )
                    .is_some()
                })
                .count()
        })
        .collect()
}

/// Indices sorted by descending count, ties to the lower keyframe id.
fn ranked(counts: &[usize], kfs: &KeyframeList) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(kfs.get(a).id.cmp(&kfs.get(b).id)));
    order
}

fn draw(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Builds the sliding window.
///
/// # Panics
/// If `w` is odd or zero, or if `counts` and `kfs` differ in length.
pub fn select_window(counts: &[usize], kfs: &KeyframeList, w: usize, mode: WindowMode, seed: u64) -> SlidingWindow {
    assert!(w >= 2 && w.is_multiple_of(2), "window size must be even and positive");
    assert_eq!(counts.len(), kfs.len());
    let half = w / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = ranked(counts, kfs);
    let local = match mode {
        WindowMode::Standard => order.iter().take(half).copied().collect(),
        WindowMode::LoopRand => {
            let top: Vec<usize> = order.iter().take(2 * w).copied().collect();
            draw(&top, half, &mut rng)
        }
        WindowMode::Random => {
            let all: Vec<usize> = (0..kfs.len()).collect();
            draw(&all, half, &mut rng)
        }
    };
    let rest: Vec<usize> = (0..kfs.len()).filter(|i| !local.contains(i)).collect();
    let historical = draw(&rest, half, &mut rng);
    SlidingWindow { local, historical }
}

/// True on frames that become keyframes.
pub fn insert_keyframe_policy(frame_index: usize, interval: usize) -> bool {
    assert!(interval >= 1);
    frame_index.is_multiple_of(interval)
}
