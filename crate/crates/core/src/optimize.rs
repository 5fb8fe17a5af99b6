//! First-order optimization for tracking (current pose only) and mapping
//! (window poses, vertex features and decoder jointly), plus the adaptive
//! early-ending rule for mapping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::DecoderParams;
use crate::frame::Frame;
use crate::geometry::{CameraIntrinsics, Pose, Tangent};
use crate::objectives::{observe, total_loss, LossBreakdown, LossWeights, WarpSetup};
use crate::render::{BatchRender, GradRequest, RayQuery, RenderConfig};
use crate::svo::HybridVoxelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    Momentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub iters_track: usize,
    pub iters_map: usize,
    /// Mapping iterations on the first frame, which has no map to track against.
    pub iters_first_map: usize,
    pub lr_pose: f64,
    pub lr_feature: f64,
    pub lr_decoder: f64,
    /// Tracking anneals the pose rate geometrically down to `lr_pose * track_lr_final`.
    pub track_lr_final: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rays_track: usize,
    pub rays_map: usize,
    pub rays_warp: usize,
    pub early_end: bool,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iters_track: 30,
            iters_map: 15,
            iters_first_map: 200,
            lr_pose: 5e-3,
            lr_feature: 1e-2,
            lr_decoder: 1e-3,
            track_lr_final: 0.1,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rays_track: 1024,
            rays_map: 1024,
            rays_warp: 1024,
            early_end: false,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iters_track == 0 || self.iters_map == 0 || self.iters_first_map == 0 {
            return Err("iteration counts must be at least 1".into());
        }
        for (name, lr) in [("lr_pose", self.lr_pose), ("lr_feature", self.lr_feature), ("lr_decoder", self.lr_decoder)]
        {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(format!("{name} must be a non-negative number"));
            }
        }
        if !(self.track_lr_final > 0.0 && self.track_lr_final <= 1.0) {
            return Err("track_lr_final must lie in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err("momentum and adam_beta2 must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Per-parameter optimizer state for one group.
#[derive(Debug, Clone)]
pub struct GroupState {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl GroupState {
    pub fn new(len: usize, cfg: &OptimConfig) -> Self {
        let adam = cfg.optimizer == OptimizerKind::Adam;
        Self {
            kind: cfg.optimizer,
            beta1: cfg.momentum,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: vec![0.0; len],
            v: if adam { vec![0.0; len] } else { Vec::new() },
        }
    }

    /// Returns the update `delta` (to be added) for gradient `g`.
    pub fn delta(&mut self, g: &[f64], lr: f64, out: &mut [f64]) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Momentum => {
                for ((m, &gi), o) in self.m.iter_mut().zip(g).zip(out.iter_mut()) {
                    *m = self.beta1 * *m + gi;
                    *o = -lr * *m;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - self.beta1.powi(self.step);
                let c2 = 1.0 - self.beta2.powi(self.step);
                for (((m, v), &gi), o) in self.m.iter_mut().zip(self.v.iter_mut()).zip(g).zip(out.iter_mut()) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                    *o = -lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
            }
        }
    }

    /// Applies the update in place.
    pub fn apply(&mut self, params: &mut [f64], g: &[f64], lr: f64) {
        let mut d = vec![0.0; params.len()];
        self.delta(g, lr, &mut d);
        for (p, di) in params.iter_mut().zip(d) {
            *p += di;
        }
    }

    /// Left-retracts a pose along the update.
    pub fn apply_pose(&mut self, pose: &mut Pose, g: &Tangent, lr: f64) {
        let mut d = Tangent::zeros();
        self.delta(g.as_slice(), lr, d.as_mut_slice());
        *pose = pose.retract(&d).normalized();
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    /// No sampled ray hit the map; carries the pose tracking started from.
    #[error("tracking lost: no rendered rays at iteration {iteration}")]
    Lost { iteration: usize, last_pose: Pose },
    #[error("frame has no valid depth pixels")]
    NoValidDepth { last_pose: Pose },
}

impl TrackingError {
    pub fn last_pose(&self) -> Pose {
        match self {
            TrackingError::Lost { last_pose, .. } | TrackingError::NoValidDepth { last_pose } => *last_pose,
        }
    }
}

/// Shared read-only context of an optimization phase.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub intr: &'a CameraIntrinsics,
    pub render: &'a RenderConfig,
    pub weights: &'a LossWeights,
    pub optim: &'a OptimConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub pose: Pose,
    pub losses: Vec<f64>,
}

/// Optimizes the pose of `frame` starting from `init`; the map and decoder
/// are read-only.
pub fn track_frame(
    map: &HybridVoxelMap,
    params: &DecoderParams,
    frame: &Frame,
    init: &Pose,
    pb: &Problem<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<TrackResult, TrackingError> {
    if frame.valid_pixels().is_empty() {
        return Err(TrackingError::NoValidDepth { last_pose: *init });
    }
    let mut pose = *init;
    let mut state = GroupState::new(6, pb.optim);
    let mut losses = Vec::with_capacity(pb.optim.iters_track);
    let frames = [frame];
    for iteration in 0..pb.optim.iters_track {
        let queries: Vec<RayQuery> =
            frame.sample_valid(pb.optim.rays_track, rng).into_iter().map(|pixel| RayQuery { slot: 0, pixel }).collect();
        let poses = [pose];
        let batch = BatchRender::forward(map, params, &poses, pb.intr, &queries, pb.render);
        let obs = observe(&batch, &frames);
        let (loss, grads) =
            total_loss(map, params, &batch, &obs, None, &poses, pb.intr, pb.weights, Some(GradRequest::POSES));
        if loss.n_rgb == 0 {
            return Err(TrackingError::Lost { iteration, last_pose: *init });
        }
        losses.push(loss.total);
        let g = grads.expect("gradients requested").poses[0];
        let frac = iteration as f64 / (pb.optim.iters_track.max(2) - 1) as f64;
        state.apply_pose(&mut pose, &g, pb.optim.lr_pose * pb.optim.track_lr_final.powf(frac));
    }
    Ok(TrackResult { pose, losses })
}

/// Final mapping losses of previous frames and the losses of the frame being
/// mapped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    pub final_losses: Vec<f64>,
    pub current: Vec<f64>,
}

impl LossHistory {
    pub fn mean_final(&self) -> Option<f64> {
        (!self.final_losses.is_empty()).then(|| self.final_losses.iter().sum::<f64>() / self.final_losses.len() as f64)
    }
}

/// True when strictly more than `iters_map / 3` of the current frame's
/// iteration losses lie below the mean final loss of previous frames.
pub fn early_end_check(history: &LossHistory, iter_losses: &[f64], iters_map: usize) -> bool {
    let Some(mean) = history.mean_final() else { return false };
    iter_losses.iter().filter(|&&l| l < mean).count() > iters_map / 3
}

/// One frame taking part in mapping.
#[derive(Debug, Clone, Copy)]
pub struct MapSlot<'a> {
    pub frame: &'a Frame,
    /// Pose held fixed (the anchor frame).
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub poses: Vec<Pose>,
    pub iterations: usize,
    pub losses: Vec<f64>,
    pub last: LossBreakdown,
}

/// Joint optimization of features, decoder and non-fixed slot poses. The last
/// slot is the current frame; warping pairs it with every other slot.
/// Priors are read but never updated here.
#[allow(clippy::too_many_arguments)]
pub fn map_update(
    map: &mut HybridVoxelMap,
    params: &mut DecoderParams,
    slots: &[MapSlot<'_>],
    init_poses: &[Pose],
    pb: &Problem<'_>,
    history: &mut LossHistory,
    rng: &mut ChaCha8Rng,
) -> MapResult {
    assert!(!slots.is_empty() && slots.len() == init_poses.len());
    let mut poses = init_poses.to_vec();
    let frames: Vec<&Frame> = slots.iter().map(|s| s.frame).collect();
    let current = slots.len() - 1;
    let req = GradRequest { poses: true, features: true, priors: false, decoder: true };
    let mut feat_state = GroupState::new(map.features().len(), pb.optim);
    let mut dec_state = GroupState::new(params.num_params(), pb.optim);
    let mut pose_states: Vec<GroupState> = slots.iter().map(|_| GroupState::new(6, pb.optim)).collect();
    let with_valid: Vec<usize> = (0..slots.len()).filter(|&i| !frames[i].valid_pixels().is_empty()).collect();
    history.current.clear();
    let mut last = LossBreakdown::default();
    let mut iterations = 0;
    let mut flat = Vec::new();
    for _ in 0..pb.optim.iters_map {
        let mut queries = Vec::with_capacity(pb.optim.rays_map);
        if !with_valid.is_empty() {
            for _ in 0..pb.optim.rays_map {
                let slot = with_valid[rng.random_range(0..with_valid.len())];
                let pixel = frames[slot].sample_valid(1, rng)[0];
                queries.push(RayQuery { slot, pixel });
            }
        }
        let warp = (slots.len() > 1 && pb.optim.rays_warp > 0).then(|| WarpSetup {
            current_slot: current,
            target_slots: (0..current).collect(),
            pixels: frames[current].sample_valid(pb.optim.rays_warp, rng),
            frames: &frames,
            occlusion: pb.weights.warp_occlusion,
        });
        let batch = BatchRender::forward(map, params, &poses, pb.intr, &queries, pb.render);
        let obs = observe(&batch, &frames);
        let (loss, grads) =
            total_loss(map, params, &batch, &obs, warp.as_ref(), &poses, pb.intr, pb.weights, Some(req));
        let grads = grads.expect("gradients requested");
        iterations += 1;
        history.current.push(loss.total);
        last = loss;

        feat_state.apply(map.features_mut(), &grads.features, pb.optim.lr_feature);
        if let Some(dg) = &grads.decoder {
            flat.clear();
            for s in dg.slices() {
                flat.extend_from_slice(s);
            }
            let mut values = params.to_flat();
            dec_state.apply(&mut values, &flat, pb.optim.lr_decoder);
            let mut off = 0;
            for s in params.slices_mut() {
                let n = s.len();
                s.copy_from_slice(&values[off..off + n]);
                off += n;
            }
        }
        for (i, slot) in slots.iter().enumerate() {
            if !slot.fixed {
                pose_states[i].apply_pose(&mut poses[i], &grads.poses[i], pb.optim.lr_pose);
            }
        }
        if pb.optim.early_end && early_end_check(history, &history.current, pb.optim.iters_map) {
            break;
        }
    }
    history.final_losses.push(last.total);
    MapResult { poses, iterations, losses: history.current.clone(), last }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_end_examples() {
        let mut h = LossHistory::default();
        assert!(!early_end_check(&h, &[0.0; 15], 15));
        h.final_losses = vec![1.0, 3.0];
        let losses = [1.0, 1.5, 2.5, 0.5, 0.4, 3.0, 1.9, 1.8];
        // Six of eight lie below the mean of 2.0; the threshold is 5.
        assert!(early_end_check(&h, &losses, 15));
        assert!(!early_end_check(&h, &losses[..5], 15));
        assert!(!early_end_check(&h, &[5.0; 15], 15));
    }

    #[test]
    fn momentum_first_step_is_plain_gradient_step() {
        let cfg = OptimConfig { optimizer: OptimizerKind::Momentum, ..OptimConfig::default() };
        let mut s = GroupState::new(3, &cfg);
        let mut p = vec![1.0, 2.0, 3.0];
        s.apply(&mut p, &[0.5, -1.0, 0.0], 0.1);
        assert_eq!(p, vec![0.95, 2.1, 3.0]);
        s.apply(&mut p, &[0.5, -1.0, 0.0], 0.1);
        // Velocity 0.9 * 0.5 + 0.5 = 0.95.
        assert!((p[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut s = GroupState::new(2, &OptimConfig::default());
        let mut p = vec![0.0, 0.0];
        s.apply(&mut p, &[3.0, -0.01], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(OptimConfig { iters_map: 0, ..OptimConfig::default() }.validate().is_err());
        assert!(OptimConfig { lr_pose: f64::NAN, ..OptimConfig::default() }.validate().is_err());
    }
}
