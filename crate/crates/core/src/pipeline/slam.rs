//! The tracking and mapping loop over a sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::decoder::DecoderParams;
use crate::fusion::integrate_frame;
use crate::geometry::Pose;
use crate::optimize::{map_update, track_frame, LossHistory, MapSlot, OptimConfig, Problem};
use crate::pipeline::config::SlamConfig;
use crate::pipeline::dataset::{DatasetError, DatasetSequence};
use crate::svo::HybridVoxelMap;
use crate::window::{insert_keyframe_policy, overlap_counts, select_window, KeyframeList, SlidingWindow};

#[derive(Debug, Error)]
pub enum SlamError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlamStats {
    /// Mapping iterations actually run, summed over frames.
    pub mapping_iterations: usize,
    /// Frames on which mapping ran.
    pub mapped_frames: usize,
    /// Frames whose tracking was lost (their pose was propagated).
    pub tracking_lost: Vec<usize>,
    /// Frame indices that became keyframes.
    pub keyframes: Vec<usize>,
    /// Window keyframe ids chosen at each mapped frame.
    pub windows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SlamOutput {
    /// `(timestamp, pose)` per input frame, in input order.
    pub trajectory: Vec<(f64, Pose)>,
    pub map: HybridVoxelMap,
    pub decoder: DecoderParams,
    pub history: LossHistory,
    pub stats: SlamStats,
}

/// Optional per-frame callback receiving `(frame index, frame count)`.
pub type Progress<'a> = &'a mut dyn FnMut(usize, usize);

/// Runs tracking and mapping over every frame. The first frame defines the
/// world frame (identity pose) and stays fixed.
pub fn run_slam(seq: &DatasetSequence, cfg: &SlamConfig) -> Result<SlamOutput, SlamError> {
    run_slam_with_progress(seq, cfg, &mut |_, _| {})
}

pub fn run_slam_with_progress(
    seq: &DatasetSequence,
    cfg: &SlamConfig,
    progress: Progress<'_>,
) -> Result<SlamOutput, SlamError> {
    cfg.validate().map_err(SlamError::Config)?;
    let intr = seq.intrinsics;
    let mut map = HybridVoxelMap::new(cfg.map);
    let mut decoder = DecoderParams::new(cfg.map.feature_dim, &cfg.decoder);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let pb = Problem { intr: &intr, render: &cfg.render, weights: &cfg.loss, optim: &cfg.optim };
    let first_optim = OptimConfig { iters_map: cfg.optim.iters_first_map, early_end: false, ..cfg.optim };
    let first_pb = Problem { optim: &first_optim, ..pb };
    let mut history = LossHistory::default();
    let mut stats = SlamStats::default();
    let mut keyframes = KeyframeList::new();
    let mut poses: Vec<Pose> = Vec::with_capacity(seq.len());

    for i in 0..seq.len() {
        progress(i, seq.len());
        let mut frame = seq.frame(i)?;
        frame.pose = if i == 0 {
            Pose::identity()
        } else {
            match track_frame(&map, &decoder, &frame, &poses[i - 1], &pb, &mut rng) {
                Ok(r) => r.pose,
                Err(e) => {
                    stats.tracking_lost.push(i);
                    e.last_pose()
                }
            }
        };

        let is_keyframe = insert_keyframe_policy(i, cfg.window.keyframe_interval);
        if is_keyframe || i % cfg.window.map_every == 0 {
            map.allocate_from_frame(&frame, &intr);
            if cfg.render.use_prior {
                integrate_frame(&mut map, &frame, &intr);
            }
            let window = if keyframes.is_empty() {
                SlidingWindow::default()
            } else {
                let counts = overlap_counts(&frame, &keyframes, &intr, cfg.window.overlap_samples, rng.random());
                select_window(&counts, &keyframes, cfg.window.size, cfg.window.mode, rng.random())
            };
            let members: Vec<usize> = window.keyframes().collect();
            stats.windows.push(members.iter().map(|&k| keyframes.get(k).id).collect());
            let mut slots: Vec<MapSlot<'_>> =
                members.iter().map(|&k| MapSlot { frame: keyframes.get(k), fixed: keyframes.get(k).id == 0 }).collect();
            slots.push(MapSlot { frame: &frame, fixed: i == 0 });
            let init: Vec<Pose> = slots.iter().map(|s| s.frame.pose).collect();
            let phase = if i == 0 { &first_pb } else { &pb };
            let result = map_update(&mut map, &mut decoder, &slots, &init, phase, &mut history, &mut rng);
            stats.mapping_iterations += result.iterations;
            stats.mapped_frames += 1;
            for (&k, pose) in members.iter().zip(&result.poses) {
                let kf = keyframes.get_mut(k);
                kf.pose = *pose;
                poses[kf.id] = *pose;
            }
            frame.pose = *result.poses.last().expect("current slot");
        }
        poses.push(frame.pose);
        if is_keyframe {
            stats.keyframes.push(i);
            keyframes.push(frame);
        }
    }
    let trajectory = seq.frames.iter().zip(&poses).map(|(f, p)| (f.timestamp, *p)).collect();
    Ok(SlamOutput { trajectory, map, decoder, history, stats })
}
