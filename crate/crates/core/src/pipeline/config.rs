//! Run configuration, stored as TOML with one section per subsystem.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::DecoderConfig;
use crate::objectives::LossWeights;
use crate::optimize::OptimConfig;
use crate::render::RenderConfig;
use crate::svo::MapConfig;
use crate::window::WindowMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Keyframes per window besides the current frame (even).
    pub size: usize,
    pub mode: WindowMode,
    /// Pixels re-projected when scoring keyframe overlap.
    pub overlap_samples: usize,
    pub keyframe_interval: usize,
    /// Run mapping on every n-th frame (keyframes are always mapped).
    pub map_every: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { size: 4, mode: WindowMode::Standard, overlap_samples: 1024, keyframe_interval: 50, map_every: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamConfig {
    pub map: MapConfig,
    pub decoder: DecoderConfig,
    pub render: RenderConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub window: WindowConfig,
}

impl SlamConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate().map_err(ConfigError::Invalid)?;
        Ok(cfg)
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Seeds feature initialization, decoder initialization and sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.map.seed = seed;
        self.decoder.seed = seed.wrapping_add(1);
        self.optim.seed = seed;
    }

    /// Disables the fused SDF prior (decoder-only geometry).
    pub fn disable_prior(&mut self) {
        self.render.use_prior = false;
    }

    pub fn validate(&self) -> Result<(), String> {
        let m = &self.map;
        if !(m.voxel_size > 0.0) || m.feature_dim == 0 || m.levels == 0 || m.allocation_threshold == 0 {
            return Err("map: voxel_size, feature_dim, levels and allocation_threshold must be positive".into());
        }
        if self.decoder.hidden == 0 {
            return Err("decoder: hidden width must be positive".into());
        }
        let r = &self.render;
        if !(r.truncation > 0.0 && r.step > 0.0 && r.max_range > 0.0) || r.max_samples == 0 {
            return Err("render: truncation, step, max_range and max_samples must be positive".into());
        }
        if !self.loss.is_valid() {
            return Err("loss: weights must be finite and non-negative".into());
        }
        self.optim.validate().map_err(|e| format!("optim: {e}"))?;
        let w = &self.window;
        if w.size < 2 || !w.size.is_multiple_of(2) {
            return Err("window: size must be even and at least 2".into());
        }
        if w.keyframe_interval == 0 || w.map_every == 0 || w.overlap_samples == 0 {
            return Err("window: keyframe_interval, map_every and overlap_samples must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_and_reload() {
        let mut cfg = SlamConfig::default();
        cfg.set_seed(7);
        cfg.window.mode = WindowMode::LoopRand;
        let text = cfg.to_toml();
        assert!(text.contains("[optim]") && text.contains("iters_track = 30"));
        assert_eq!(SlamConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = SlamConfig::from_toml("[optim]\niters_map = 7\n[window]\nmode = \"loop-rand\"\n").unwrap();
        assert_eq!(cfg.optim.iters_map, 7);
        assert_eq!(cfg.optim.iters_track, 30);
        assert_eq!(cfg.window.mode, WindowMode::LoopRand);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(SlamConfig::from_toml("[window]\nsize = 3\n").is_err());
        assert!(SlamConfig::from_toml("[render]\ntruncation = -1.0\n").is_err());
        assert!(SlamConfig::from_toml("[nope").is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(SlamConfig::from_toml("[optim]\niters_mapping = 7\n").is_err());
        assert!(SlamConfig::from_toml("[mapping]\niters = 7\n").is_err());
    }
}
