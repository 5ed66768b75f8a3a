//! Flat TOML configuration shared by the library pipeline and the CLI.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::finetune::{FinetuneConfig, LearningRates, LossWeights, ViewSampling};
use crate::matching::PlaneSpacing;
use crate::ptf::{FusionRule, PtfParams};
use crate::render::TILE_SIZES;
use crate::wfr::{WfrParams, WfrStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    // depth prediction
    pub d_near: f64,
    pub d_far: f64,
    pub num_planes: usize,
    pub plane_spacing: PlaneSpacing,
    pub temperature: f64,
    pub num_neighbors: usize,
    pub smooth_cost_volume: bool,
    /// Lift from the frames' own depth maps instead of the cost volume.
    pub use_gt_depth: bool,
    /// Triplet weight used with `use_gt_depth`.
    pub gt_confidence: f64,

    // lifting and decoding
    pub stride: usize,
    /// Isotropic Gaussian size in lift-grid pixels at the lifting depth.
    pub base_scale_px: f64,

    // fusion
    pub enable_fusion: bool,
    pub broader_fusion: bool,
    pub ptf_delta: f64,

    // floater removal
    pub enable_wfr: bool,
    pub wfr_delta: f64,
    pub wfr_strategy: WfrStrategy,
    pub wfr_epsilon_floor: f64,

    // rendering
    pub tile_size: usize,

    // fine-tuning
    pub finetune_iters: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub use_ssim_loss: bool,
    pub lr_mean: f64,
    pub lr_log_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub view_sampling: ViewSampling,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let rates = LearningRates::default();
        let weights = LossWeights::default();
        Self {
            d_near: 0.25,
            d_far: 8.0,
            num_planes: 64,
            plane_spacing: PlaneSpacing::Uniform,
            temperature: 0.05,
            num_neighbors: 2,
            smooth_cost_volume: true,
            use_gt_depth: false,
            gt_confidence: 0.9,
            stride: 2,
            base_scale_px: 0.8,
            enable_fusion: true,
            broader_fusion: true,
            ptf_delta: 0.1,
            enable_wfr: true,
            wfr_delta: 0.1,
            wfr_strategy: WfrStrategy::NeighborAccumulate,
            wfr_epsilon_floor: 0.01,
            tile_size: 16,
            finetune_iters: 200,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            use_ssim_loss: weights.use_ssim_loss,
            lr_mean: rates.mean,
            lr_log_scale: rates.log_scale,
            lr_opacity: rates.opacity,
            lr_color: rates.color,
            view_sampling: ViewSampling::RoundRobin,
            seed: 0,
        }
    }
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, reason: reason.into() }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides. Values are parsed as TOML, falling back
    /// to a bare string (so `wfr_strategy=uniform` works unquoted).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        let mut table = toml::Table::try_from(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::BadOverride(raw.to_string()));
            }
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        let updated: Self = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.d_near > 0.0 && self.d_far > self.d_near && self.d_far.is_finite()) {
            return Err(invalid("d_near", format!("need 0 < d_near < d_far, got {} and {}", self.d_near, self.d_far)));
        }
        if self.num_planes < 2 {
            return Err(invalid("num_planes", "at least 2 planes"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be positive"));
        }
        if self.num_neighbors == 0 {
            return Err(invalid("num_neighbors", "at least 1"));
        }
        if !(self.gt_confidence > 0.0 && self.gt_confidence < 1.0) {
            return Err(invalid("gt_confidence", "must lie in (0, 1)"));
        }
        if ![1, 2, 4].contains(&self.stride) {
            return Err(invalid("stride", "must be 1, 2 or 4"));
        }
        if !(self.base_scale_px > 0.0 && self.base_scale_px.is_finite()) {
            return Err(invalid("base_scale_px", "must be positive"));
        }
        if !(self.ptf_delta > 0.0) {
            return Err(invalid("ptf_delta", "must be positive"));
        }
        if !(self.wfr_delta > 0.0) {
            return Err(invalid("wfr_delta", "must be positive"));
        }
        if !(self.wfr_epsilon_floor > 0.0 && self.wfr_epsilon_floor <= 1.0) {
            return Err(invalid("wfr_epsilon_floor", "must lie in (0, 1]"));
        }
        if !TILE_SIZES.contains(&self.tile_size) {
            return Err(invalid("tile_size", "must be 8, 16 or 32"));
        }
        if !(0.0..1.0).contains(&self.lambda1) {
            return Err(invalid("lambda1", "must lie in [0, 1)"));
        }
        if !(self.lambda2 >= 0.0) {
            return Err(invalid("lambda2", "must be >= 0"));
        }
        for (key, v) in [
            ("lr_mean", self.lr_mean),
            ("lr_log_scale", self.lr_log_scale),
            ("lr_opacity", self.lr_opacity),
            ("lr_color", self.lr_color),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(key, "must be a finite non-negative rate"));
            }
        }
        Ok(())
    }

    pub fn ptf_params(&self) -> PtfParams {
        PtfParams {
            delta: self.ptf_delta,
            rule: if self.broader_fusion { FusionRule::Broad } else { FusionRule::Symmetric },
            enabled: self.enable_fusion,
        }
    }

    pub fn wfr_params(&self) -> WfrParams {
        WfrParams { delta: self.wfr_delta, strategy: self.wfr_strategy, epsilon_floor: self.wfr_epsilon_floor }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            weights: LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, use_ssim_loss: self.use_ssim_loss },
            rates: LearningRates { mean: self.lr_mean, log_scale: self.lr_log_scale, opacity: self.lr_opacity, color: self.lr_color },
            sampling: self.view_sampling,
            seed: self.seed,
            tile_size: self.tile_size,
        }
    }

    /// `(key, value)` pairs in TOML form, for report headers.
    pub fn entries(&self) -> Vec<(String, String)> {
        let table = toml::Table::try_from(self).expect("config serializes");
        table.into_iter().map(|(k, v)| (k, v.to_string())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("num_plane = 3").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(m) if m.contains("num_plane")));
    }

    #[test]
    fn overrides_parse_bare_strings_and_numbers() {
        let mut c = PipelineConfig::default();
        c.apply_overrides(&["wfr_strategy=uniform", "lambda2 = 1.0", "enable_fusion=false", "stride=4"]).unwrap();
        assert_eq!(c.wfr_strategy, WfrStrategy::Uniform);
        assert_eq!(c.lambda2, 1.0);
        assert!(!c.enable_fusion);
        assert_eq!(c.stride, 4);
        assert!(c.apply_overrides(&["stride=3"]).is_err());
        assert_eq!(c.stride, 4);
        assert!(matches!(c.apply_overrides(&["nonsense"]), Err(ConfigError::BadOverride(_))));
        assert!(c.apply_overrides(&["bogus_key=1"]).is_err());
    }

    #[test]
    fn ablation_toggles_map_to_module_params() {
        let mut c = PipelineConfig::default();
        assert_eq!(c.ptf_params().rule, FusionRule::Broad);
        c.broader_fusion = false;
        assert_eq!(c.ptf_params().rule, FusionRule::Symmetric);
        c.enable_fusion = false;
        assert!(!c.ptf_params().enabled);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = PipelineConfig::default();
        c.lambda2 = 0.5;
        c.wfr_strategy = WfrStrategy::DirectRemoval;
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
