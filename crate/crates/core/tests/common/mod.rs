//! Shared fixtures for the integration and acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hvslam::decoder::{DecoderConfig, DecoderParams};
use hvslam::frame::Frame;
use hvslam::fusion::integrate_frame;
use hvslam::geometry::{CameraIntrinsics, Pose, Tangent};
use hvslam::objectives::{observe, total_loss, LossWeights, WarpSetup};
use hvslam::pipeline::synth::{generate, SynthSpec};
use hvslam::render::{BatchRender, GradRequest, Gradients, RayQuery, RenderConfig};
use hvslam::svo::{HybridVoxelMap, MapConfig};

/// How the coarse SDF is formed in a gradient scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// Blend over observed vertices only.
    Observed,
    /// Plain trilinear blend of every corner prior.
    All,
    /// Decoder-only geometry.
    Off,
}

/// Two views of the synthetic room with a fused map, a random decoder and
/// perturbed poses; the objective includes every loss term.
pub struct GradScene {
    pub intr: CameraIntrinsics,
    pub frames: Vec<Frame>,
    pub map: HybridVoxelMap,
    pub params: DecoderParams,
    pub poses: Vec<Pose>,
    pub queries: Vec<RayQuery>,
    pub warp_pixels: Vec<(usize, usize)>,
    pub render: RenderConfig,
    pub weights: LossWeights,
}

impl GradScene {
    pub fn new(seed: u64, mode: PriorMode) -> Self {
        let spec = SynthSpec { frames: 40, width: 40, height: 30, seed, ..SynthSpec::default() };
        let seq = generate(&spec).unwrap();
        let gt = seq.ground_truth.clone().unwrap();
        let intr = seq.intrinsics;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let ids = [0, 2 + (seed as usize % 5)];
        let mut map = HybridVoxelMap::new(MapConfig { feature_init: 0.3, seed, ..MapConfig::default() });
        let mut frames = Vec::new();
        for &i in &ids {
            let mut f = seq.frame(i).unwrap();
            f.pose = gt[i].1;
            map.allocate_from_frame(&f, &intr);
            integrate_frame(&mut map, &f, &intr);
            frames.push(f);
        }
        // The fresh SDF head is all zero, which puts every decoder-only
        // sample exactly on the surface; jitter moves the probe point off
        // that degenerate configuration.
        let mut params = DecoderParams::new(
            map.feature_dim(),
            &DecoderConfig { hidden: 16, seed: seed + 11, ..DecoderConfig::default() },
        );
        for s in params.slices_mut() {
            s.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let poses: Vec<Pose> = frames
            .iter()
            .map(|f| {
                let d = Tangent::from_fn(|_, _| rng.random_range(-0.01..0.01));
                f.pose.retract(&d)
            })
            .collect();
        let mut queries = Vec::new();
        for (slot, f) in frames.iter().enumerate() {
            queries.extend(f.sample_valid(40, &mut rng).into_iter().map(|pixel| RayQuery { slot, pixel }));
        }
        let warp_pixels = frames[1].sample_valid(24, &mut rng);
        let render = RenderConfig {
            use_prior: mode != PriorMode::Off,
            observed_prior_only: mode == PriorMode::Observed,
            ..RenderConfig::default()
        };
        Self { intr, frames, map, params, poses, queries, warp_pixels, render, weights: LossWeights::default() }
    }

    fn evaluate(
        &self,
        map: &HybridVoxelMap,
        params: &DecoderParams,
        poses: &[Pose],
        req: Option<GradRequest>,
    ) -> (f64, Option<Gradients>) {
        let frames: Vec<&Frame> = self.frames.iter().collect();
        let warp = WarpSetup {
            current_slot: 1,
            target_slots: vec![0],
            pixels: self.warp_pixels.clone(),
            frames: &frames,
            occlusion: self.weights.warp_occlusion,
        };
        let batch = BatchRender::forward(map, params, poses, &self.intr, &self.queries, &self.render);
        let obs = observe(&batch, &frames);
        let (loss, grads) = total_loss(map, params, &batch, &obs, Some(&warp), poses, &self.intr, &self.weights, req);
        (loss.total, grads)
    }

    pub fn loss(&self, map: &HybridVoxelMap, params: &DecoderParams, poses: &[Pose]) -> f64 {
        self.evaluate(map, params, poses, None).0
    }

    pub fn gradients(&self) -> Gradients {
        self.evaluate(&self.map, &self.params, &self.poses, Some(GradRequest::ALL)).1.unwrap()
    }
}

/// Central difference refined by one Richardson step (error `O(h^4)`).
pub fn richardson(f: &impl Fn(f64) -> f64, h: f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

/// The objective is piecewise smooth (absolute residuals, the first-surface
/// cut, samples entering or leaving leaves). Starting from `h`, the step is
/// divided by 10 until two successive estimates agree to 1e-7 relative, so
/// that no break point lies inside the stencil. At most three levels.
pub fn derivative(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let mut prev = richardson(&f, h);
    for level in 1..3 {
        let next = richardson(&f, h / 10f64.powi(level));
        if rel_error(prev, next) < 1e-7 {
            return prev;
        }
        prev = next;
    }
    prev
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Decoder,
    Feature,
    Prior,
    Pose,
}

#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub group: Group,
    pub mode: PriorMode,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel(&self) -> f64 {
        rel_error(self.analytic, self.numeric)
    }

    /// 1e-4 for poses, 1e-6 otherwise.
    pub fn tolerance(&self) -> f64 {
        if self.group == Group::Pose {
            1e-4
        } else {
            1e-6
        }
    }

    pub fn passes(&self) -> bool {
        self.rel() < self.tolerance()
    }
}

/// Components drawn as probes carry at least this fraction of the largest
/// gradient in their group; smaller ones are dominated by rounding noise in
/// the finite differences.
pub const ACTIVE_FRACTION: f64 = 0.05;

fn pick_active(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let active: Vec<usize> =
        (0..values.len()).filter(|&i| max > 0.0 && values[i].abs() >= ACTIVE_FRACTION * max).collect();
    (0..k.min(active.len())).map(|_| active[rng.random_range(0..active.len())]).collect()
}

/// Finite-difference probes over `scenes` random scenes, cycling through
/// the prior modes. Each scene contributes decoder, feature, prior (when
/// priors are on) and pose probes.
pub fn gradient_probes(scenes: u64) -> Vec<Probe> {
    let modes = [PriorMode::Observed, PriorMode::All, PriorMode::Off];
    let mut probes = Vec::new();
    for seed in 0..scenes {
        let mode = modes[seed as usize % 3];
        let sc = GradScene::new(seed, mode);
        let g = sc.gradients();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

        let flat_dec: Vec<f64> = g.decoder.as_ref().unwrap().slices().iter().flat_map(|s| s.iter().copied()).collect();
        for i in pick_active(&flat_dec, 3, &mut rng) {
            let numeric = derivative(
                |h| {
                    let mut p = sc.params.clone();
                    p.set(i, p.get(i) + h);
                    sc.loss(&sc.map, &p, &sc.poses)
                },
                1e-4,
            );
            probes.push(Probe { group: Group::Decoder, mode, index: i, analytic: flat_dec[i], numeric });
        }
        for i in pick_active(&g.features, 3, &mut rng) {
            let numeric = derivative(
                |h| {
                    let mut m = sc.map.clone();
                    m.features_mut()[i] += h;
                    sc.loss(&m, &sc.params, &sc.poses)
                },
                1e-3,
            );
            probes.push(Probe { group: Group::Feature, mode, index: i, analytic: g.features[i], numeric });
        }
        if mode != PriorMode::Off {
            for i in pick_active(&g.priors, 2, &mut rng) {
                let numeric = derivative(
                    |h| {
                        let mut m = sc.map.clone();
                        m.priors_mut()[i] += h;
                        sc.loss(&m, &sc.params, &sc.poses)
                    },
                    1e-4,
                );
                probes.push(Probe { group: Group::Prior, mode, index: i, analytic: g.priors[i], numeric });
            }
        }
        for _ in 0..2 {
            let slot = rng.random_range(0..2);
            let k = rng.random_range(0..6);
            let numeric = derivative(
                |h| {
                    let mut poses = sc.poses.clone();
                    let mut d = Tangent::zeros();
                    d[k] = h;
                    poses[slot] = poses[slot].retract(&d);
                    sc.loss(&sc.map, &sc.params, &poses)
                },
                1e-5,
            );
            probes.push(Probe { group: Group::Pose, mode, index: slot * 6 + k, analytic: g.poses[slot][k], numeric });
        }
    }
    probes
}
