//! Runtime configuration.
//!
//! Every tunable threshold of the engine lives here so that a single TOML
//! file (plus CLI overrides) controls a whole run. All distances are meters,
//! all angles are degrees in the file (`*_deg` fields) and converted at the
//! call site.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::frame::NoiseModel;

/// Parameters of the RANSAC shape detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Minimum inlier count as a fraction of the input cloud size.
    pub min_inlier_fraction: f64,
    /// Absolute floor on the minimum inlier count.
    pub min_inliers_abs: usize,
    /// Base distance threshold for the inlier test, before noise modulation.
    pub dist_epsilon: f64,
    /// Multiplier on the sensor noise threshold; the effective inlier
    /// distance is `max(dist_epsilon, noise_scale * sigma_z(z))`.
    pub noise_scale: f64,
    /// Maximum angle between a sample normal and the shape normal at the
    /// footpoint for the sample to count as an inlier.
    pub normal_epsilon_deg: f64,
    /// Probability that no shape above the minimum size was missed when the
    /// detector stops.
    pub success_probability: f64,
    /// Size cap of the random subset used to extrapolate inlier counts.
    pub subset_count: usize,
    /// Candidates generated per sampling round.
    pub candidates_per_round: usize,
    /// Assumed probability that a localized companion sample lies on the
    /// same shape as the seed sample. Drives the stopping criterion.
    pub localized_hit_rate: f64,
    /// Octree depth used for localized minimal-set sampling.
    pub octree_levels: u32,
    /// Hard cap on candidate draws per extraction round.
    pub max_draws: usize,
    /// Shape kinds the detector is allowed to propose.
    pub detect_planes: bool,
    pub detect_cylinders: bool,
    pub detect_spheres: bool,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            min_inlier_fraction: 0.025,
            min_inliers_abs: 50,
            dist_epsilon: 0.008,
            noise_scale: 3.0,
            normal_epsilon_deg: 20.0,
            success_probability: 0.99,
            subset_count: 5000,
            candidates_per_round: 4,
            localized_hit_rate: 0.5,
            octree_levels: 5,
            max_draws: 4000,
            detect_planes: true,
            detect_cylinders: true,
            detect_spheres: true,
        }
    }
}

/// Full engine configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// RNG seed for the whole pipeline (detection sampling, subsets).
    pub seed: u64,

    // Depth pre-filter.
    /// Spatial sigma of the bilateral pre-filter, in pixels.
    pub bilateral_sigma: f64,
    /// Depth difference beyond which a neighbor is ignored by the
    /// bilateral pre-filter.
    pub bilateral_range_limit: f64,

    /// Axial sensor noise model.
    pub noise: NoiseModel,

    /// Shape detector parameters.
    pub detect: DetectionConfig,

    // Proxy lifecycle and tracking.
    /// Votes required for a tracked proxy to count as supported.
    pub keep_threshold: usize,
    /// Consecutive unsupported frames after which a probation proxy is purged.
    pub purge_after: usize,
    /// Supported-frame count after which a proxy is never purged.
    pub veteran_after: usize,
    /// Distance band around a shape within which samples vote for it and
    /// their statistics are accumulated into its cells.
    pub support_band: f64,
    /// Frames at the start of a run used to look for the scene orientation.
    pub manhattan_warmup: usize,
    /// Angular tolerance when classifying near-horizontal / near-vertical
    /// planes during orientation estimation.
    pub manhattan_tol_deg: f64,
    /// Hint for the gravity-opposite direction in world coordinates.
    pub up_hint: [f64; 3],

    // Grid.
    /// Side length of a proxy grid cell.
    pub cell_size: f64,
    /// Log2 of the per-cell color sub-grid resolution.
    pub color_res_log2: u8,
    /// Length of the per-cell visitation window, in frames (max 128).
    pub activation_window: u16,
    /// Fraction of the window that must be visited to activate a cell.
    pub activation_ratio: f64,

    // Proxy merging.
    pub merge_angle_deg: f64,
    pub merge_offset: f64,
    pub merge_radius: f64,

    // Cell statistics.
    /// Floor on the histogram kernel bandwidth.
    pub slh_sigma_floor: f64,
    /// A sample within `slh_merge_width * sigma` of an existing kernel is
    /// folded into it instead of creating a new kernel.
    pub slh_merge_width: f64,
    /// Standard-deviation factor of the color contribution weight.
    pub color_alpha: f64,

    // Stream processing.
    /// Side of the square structural element used by hole closing, in cells.
    pub closing_size: usize,
    /// Dihedral angle range within which two planes are extrapolated to
    /// their intersection line.
    pub extrapolate_min_deg: f64,
    pub extrapolate_max_deg: f64,
    /// Maximum distance a proxy is extrapolated toward an intersection.
    pub extrapolate_gap: f64,

    // Codec.
    /// Peak value used by depth PSNR (sensor maximum range).
    pub psnr_peak: f64,
    /// Quantization step of archived cell distances.
    pub quantization_step: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            bilateral_sigma: 2.0,
            bilateral_range_limit: 0.20,
            noise: NoiseModel::default(),
            detect: DetectionConfig::default(),
            keep_threshold: 50,
            purge_after: 30,
            veteran_after: 300,
            support_band: 0.05,
            manhattan_warmup: 5,
            manhattan_tol_deg: 30.0,
            up_hint: [0.0, 1.0, 0.0],
            cell_size: 0.05,
            color_res_log2: 2,
            activation_window: 100,
            activation_ratio: 0.25,
            merge_angle_deg: 10.0,
            merge_offset: 0.05,
            merge_radius: 0.02,
            slh_sigma_floor: 0.003,
            slh_merge_width: 2.0,
            color_alpha: 3.0,
            closing_size: 7,
            extrapolate_min_deg: 60.0,
            extrapolate_max_deg: 120.0,
            extrapolate_gap: 1.0,
            psnr_peak: 8.0,
            quantization_step: 0.0005,
        }
    }
}

impl Config {
    /// Load a configuration file, falling back to defaults for absent keys.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        let cfg: Config =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.activation_window == 0 || self.activation_window > 128 {
            return Err(ConfigError::Invalid(
                "activation_window must be in 1..=128".into(),
            ));
        }
        if !(0.0 < self.detect.success_probability && self.detect.success_probability < 1.0) {
            return Err(ConfigError::Invalid(
                "detect.success_probability must be in (0, 1)".into(),
            ));
        }
        if self.cell_size <= 0.0 {
            return Err(ConfigError::Invalid("cell_size must be positive".into()));
        }
        if self.closing_size == 0 || self.closing_size % 2 == 0 {
            return Err(ConfigError::Invalid(
                "closing_size must be a positive odd cell count".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("cannot parse config {0}: {1}")]
    Parse(String, #[source] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: Config = toml::from_str("seed = 9\n[detect]\ndist_epsilon = 0.01\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.detect.dist_epsilon, 0.01);
        assert_eq!(cfg.keep_threshold, 50);
        assert_eq!(cfg.closing_size, 7);
    }
}
