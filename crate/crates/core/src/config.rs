//! Pipeline configuration file (TOML). Every section is optional and
//! falls back to module defaults; unknown keys are rejected.

use crate::association::{AssociationConfig, MatchMode};
use crate::perception::{ClassLabel, HeuristicClassifier};
use crate::season_map::MapConfig;
use crate::simulator::{NoiseModel, TrajectoryParams, WorldConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config value out of range: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Classes scored against simulator truth.
    pub classes: Vec<ClassLabel>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { classes: vec![ClassLabel::Vegetation, ClassLabel::Shrub] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Pose drift sigmas (meters) for the F1 sweep.
    pub noise_sweep: Vec<f64>,
    /// Seeds per sweep point.
    pub sweep_seeds: u64,
    pub histogram_bins: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { noise_sweep: vec![0.0, 0.1, 0.25, 0.5], sweep_seeds: 1, histogram_bins: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seed for all randomness; the world seed and clustering seed follow it.
    pub seed: u64,
    pub world: WorldConfig,
    pub noise: NoiseModel,
    pub trajectory: TrajectoryParams,
    pub map: MapConfig,
    pub classifier: HeuristicClassifier,
    pub association: AssociationConfig,
    pub evaluation: EvaluationConfig,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            noise: NoiseModel::default(),
            trajectory: TrajectoryParams::default(),
            map: MapConfig::default(),
            classifier: HeuristicClassifier::default(),
            association: AssociationConfig::default(),
            evaluation: EvaluationConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: MatchMode) -> Self {
        self.association.matching.mode = mode;
        self
    }

    /// World config carrying the pipeline seed.
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig { rng_seed: self.seed, ..self.world.clone() }
    }

    /// Map config carrying the pipeline seed.
    pub fn map_config(&self) -> MapConfig {
        let mut m = self.map.clone();
        m.cluster.seed = self.seed;
        m
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.world_config().validate().map_err(|e| bad(&e))?;
        self.noise.validate().map_err(|e| bad(&e))?;
        self.trajectory.validate().map_err(|e| bad(&e))?;
        self.map.octree.validate().map_err(|e| bad(&e))?;
        let m = &self.map;
        if !(m.link_radius > 0.0) || !(m.shrub.link_radius > 0.0) || !(m.conmod_max_spread > 0.0) {
            return Err(ConfigError::Invalid("map radii must be positive".into()));
        }
        if m.cluster.max_k == 0 || m.cluster.max_iterations == 0 || m.cluster.k == Some(0) {
            return Err(ConfigError::Invalid("cluster k and iteration limits must be positive".into()));
        }
        let a = &self.association;
        a.matching.gate.validate().map_err(|e| bad(&e))?;
        a.matching.descriptor.transition.validate().map_err(|e| bad(&e))?;
        let p = &a.persistence;
        let prob = |x: f64| (0.0..=1.0).contains(&x);
        if !prob(p.detector.p_detect) || !prob(p.detector.p_false) || !prob(p.initial_prior) {
            return Err(ConfigError::Invalid("persistence probabilities must lie in [0, 1]".into()));
        }
        if !(p.survival.hazard_rate >= 0.0) || !(p.survey_radius >= 0.0) || !(a.context_radius >= 0.0) {
            return Err(ConfigError::Invalid("hazard rate and radii must be non-negative".into()));
        }
        if self.report.histogram_bins == 0 || self.report.sweep_seeds == 0 {
            return Err(ConfigError::Invalid("report.histogram_bins and report.sweep_seeds must be positive".into()));
        }
        if self.report.noise_sweep.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(ConfigError::Invalid("noise sweep sigmas must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn octree_resolution_default() {
        assert_eq!(PipelineConfig::default().map.octree.resolution, 0.15);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(PipelineConfig::from_toml_str("sed = 3"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            PipelineConfig::from_toml_str("[world]\nplot_sise = 3.0"),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(matches!(
            PipelineConfig::from_toml_str("[association.persistence]\ninitial_prior = 1.5"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_str("[noise]\npose_noise_sigma = 2.0\npose_noise_max = 1.0"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = PipelineConfig::from_toml_str("seed = 7\n[world]\nplot_size = 6.0").unwrap();
        assert_eq!(cfg.world_config().rng_seed, 7);
        assert_eq!(cfg.world.plot_size, 6.0);
        assert_eq!(cfg.world.plot_count, 18);
    }
}
