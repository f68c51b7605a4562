//! Merged run configuration for every pipeline stage.
//!
//! One flat JSON object with a documented default for every field; unknown
//! keys are rejected so typos surface immediately. Precedence is
//! built-in default < config file < CLI flag (the CLI applies its own
//! overrides after loading).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::infer::ExtractionMethod;
use crate::model::LocatorConfig;
use crate::synth::PhantomSpec;
use crate::train::{PreprocessOptions, TrainConfig};
use crate::volume::{Dims, Spacing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // Preprocessing geometry.
    /// Downsampled working grid (z, y, x).
    pub target_dims: Dims,
    /// Intensity window (lo, hi) mapped to [0, 1].
    pub window: [f64; 2],
    /// Std of the target Gaussian, in downsampled voxels.
    pub sigma_vox: f64,

    // Model.
    pub levels: usize,
    pub base_channels: usize,
    pub attention: bool,
    pub dropout_p: f64,

    // Training.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub w2: f64,
    pub w1: f64,
    pub shift_max_vox: i64,
    pub flip_prob: f64,
    pub folds: usize,
    pub seed: u64,
    /// Train folds on separate threads; per-fold results are unchanged.
    pub parallel_folds: bool,

    // Inference.
    pub method: ExtractionMethod,
    /// Threshold fraction for the Gaussian-fit extractor.
    pub tau: f64,
    /// Crop size (z, y, x); omit to return raw coordinates only.
    pub crop: Option<Dims>,
    pub crop_pad_value: f64,

    // Synthetic phantoms.
    pub phantom_count: usize,
    pub phantom_dims: Dims,
    pub phantom_spacing_mm: Spacing,
    pub phantom_semi_axes: [f64; 2],
    pub phantom_contrast: f32,
    pub phantom_noise_std: f32,
    pub phantom_margin_vox: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let phantom = PhantomSpec::default();
        RunConfig {
            target_dims: [64, 128, 128],
            window: [-1000.0, 1000.0],
            sigma_vox: 3.0,
            levels: 3,
            base_channels: 8,
            attention: true,
            dropout_p: 0.1,
            epochs: 200,
            batch_size: 2,
            lr: 1e-3,
            w2: 1.0,
            w1: 0.1,
            shift_max_vox: 5,
            flip_prob: 0.5,
            folds: 5,
            seed: 0,
            parallel_folds: false,
            method: ExtractionMethod::Fit,
            tau: 0.5,
            crop: None,
            crop_pad_value: -1024.0,
            phantom_count: phantom.n_samples,
            phantom_dims: phantom.full_dims,
            phantom_spacing_mm: phantom.spacing_mm,
            phantom_semi_axes: phantom.semi_axes_vox,
            phantom_contrast: phantom.contrast,
            phantom_noise_std: phantom.noise_std,
            phantom_margin_vox: phantom.margin_vox,
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Parse(msg) => write!(f, "cannot parse config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    /// Defaults when `path` is `None`, otherwise the parsed file.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let bytes = std::fs::read(p).map_err(ConfigError::Io)?;
                serde_json::from_slice(&bytes).map_err(|e| ConfigError::Parse(e.to_string()))
            }
        }
    }

    pub fn preprocess_options(&self) -> PreprocessOptions {
        PreprocessOptions {
            target_dims: self.target_dims,
            window: self.window,
            sigma_vox: self.sigma_vox,
        }
    }

    pub fn locator_config(&self) -> LocatorConfig {
        LocatorConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            attention: self.attention,
            dropout_p: self.dropout_p,
            in_dims: self.target_dims,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            w2: self.w2,
            w1: self.w1,
            sigma_vox: self.sigma_vox,
            shift_max_vox: self.shift_max_vox,
            flip_prob: self.flip_prob,
            folds: self.folds,
            seed: self.seed,
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            full_dims: self.phantom_dims,
            spacing_mm: self.phantom_spacing_mm,
            n_samples: self.phantom_count,
            semi_axes_vox: self.phantom_semi_axes,
            contrast: self.phantom_contrast,
            noise_std: self.phantom_noise_std,
            margin_vox: self.phantom_margin_vox,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn file_values_override_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"epochs": 7, "attention": false, "method": "argmax"}}"#).unwrap();
        let cfg = RunConfig::load(Some(f.path())).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert!(!cfg.attention);
        assert_eq!(cfg.method, ExtractionMethod::Argmax);
        // Untouched fields keep their defaults.
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.sigma_vox, 3.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"epochz": 7}}"#).unwrap();
        match RunConfig::load(Some(f.path())) {
            Err(ConfigError::Parse(msg)) => assert!(msg.contains("epochz"), "{msg}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            RunConfig::load(Some(Path::new("/no/such/config.json"))),
            Err(ConfigError::Io(_))
        ));
    }

    #[test]
    fn derived_configs_are_consistent() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.locator_config().in_dims, cfg.target_dims);
        assert_eq!(cfg.train_config().sigma_vox, cfg.preprocess_options().sigma_vox);
        assert_eq!(cfg.phantom_spec().seed, cfg.seed);
    }
}
