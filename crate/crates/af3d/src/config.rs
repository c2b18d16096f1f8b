//! Run configuration: a single JSON file wiring every module together.
//!
//! The schema is strict. Unknown keys are rejected so a typo in an
//! experiment config fails at load time instead of silently falling back
//! to a default. Every section has defaults, so `{}` (plus a mode) is a
//! valid config and the canonical one for smoke tests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::{AnchorConfig, AssignConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::network::{NetworkConfig, OptimConfig};
use crate::postprocess::PostprocessConfig;
use crate::synth::SynthConfig;
use crate::tiling::DEFAULT_WINDOW_OVERLAP;

/// Detection head layout. Anchor-free predicts one point per cell,
/// anchor-based scores three candidate diameters per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    AnchorFree,
    AnchorBased,
}

impl Mode {
    /// Prediction slots per grid cell.
    pub fn k(self) -> usize {
        match self {
            Mode::AnchorFree => 1,
            Mode::AnchorBased => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::AnchorFree => "anchor_free",
            Mode::AnchorBased => "anchor_based",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchor_free" => Ok(Mode::AnchorFree),
            "anchor_based" => Ok(Mode::AnchorBased),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}, expected anchor_free or anchor_based"
            ))),
        }
    }
}

/// Where the dataset lives and how it splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding the manifest, volumes, and annotation CSV.
    pub dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            n_train: 32,
            n_val: 8,
        }
    }
}

/// Training-loop knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Crops accumulated into one optimizer step.
    pub batch_size: usize,
    /// Crop shape in voxels `(z, y, x)`; each axis a positive multiple
    /// of 16.
    pub crop_shape: [usize; 3],
    /// Probability that a training crop is centered on a lesion.
    pub p_lesion: f64,
    /// Lesions at or above this diameter are dropped from training.
    pub max_diameter_mm: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            crop_shape: [64, 64, 64],
            p_lesion: 0.7,
            max_diameter_mm: 48.0,
            checkpoint_every: 500,
            log_every: 10,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Intensity window applied before the network sees a volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub hu_min: f32,
    pub hu_max: f32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            hu_min: -1024.0,
            hu_max: 2048.0,
        }
    }
}

/// Sliding-window inference geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    /// Window shape in voxels `(z, y, x)`; each axis a positive multiple
    /// of 16.
    pub window_shape: [usize; 3],
    pub overlap: [usize; 3],
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            window_shape: [128, 128, 128],
            overlap: DEFAULT_WINDOW_OVERLAP,
        }
    }
}

/// Union of all module configs plus run-level settings. Loaded from JSON
/// with unknown-key rejection at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Isotropic voxel spacing volumes are resampled to.
    pub spacing_mm: f64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub window: WindowConfig,
    pub tiling: TilingConfig,
    pub assign: AssignConfig,
    pub anchors: AnchorConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub network: NetworkConfig,
    pub postprocess: PostprocessConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            mode: Mode::AnchorFree,
            seed: 0,
            spacing_mm: 1.0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            window: WindowConfig::default(),
            tiling: TilingConfig::default(),
            assign: AssignConfig::default(),
            anchors: AnchorConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            network: NetworkConfig::default(),
            postprocess: PostprocessConfig::default(),
            synth: SynthConfig::default(),
        };
        cfg.network.k_per_point = cfg.mode.k();
        cfg
    }
}

fn check_crop_axes(name: &str, shape: [usize; 3]) -> Result<()> {
    for (axis, &s) in shape.iter().enumerate() {
        if s == 0 || s % 16 != 0 {
            return Err(Error::Config(format!(
                "{name} axis {axis} is {s}, must be a positive multiple of 16"
            )));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.assign.validate()?;
        self.anchors.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.network.validate()?;
        self.postprocess.validate()?;
        self.synth.validate()?;
        if self.network.k_per_point != self.mode.k() {
            return Err(Error::Config(format!(
                "mode {} implies {} slots per cell, network has {}",
                self.mode.as_str(),
                self.mode.k(),
                self.network.k_per_point
            )));
        }
        if !(self.spacing_mm > 0.0) || !self.spacing_mm.is_finite() {
            return Err(Error::Config(format!(
                "spacing_mm must be positive, got {}",
                self.spacing_mm
            )));
        }
        if self.train.steps == 0 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        check_crop_axes("train.crop_shape", self.train.crop_shape)?;
        if !(0.0..=1.0).contains(&self.train.p_lesion) {
            return Err(Error::Config(format!(
                "train.p_lesion must lie in [0, 1], got {}",
                self.train.p_lesion
            )));
        }
        if !(self.train.max_diameter_mm > 0.0) {
            return Err(Error::Config(format!(
                "train.max_diameter_mm must be positive, got {}",
                self.train.max_diameter_mm
            )));
        }
        if self.train.checkpoint_every == 0 || self.train.log_every == 0 {
            return Err(Error::Config(
                "train.checkpoint_every and train.log_every must be >= 1".into(),
            ));
        }
        if !(self.window.hu_max > self.window.hu_min) {
            return Err(Error::Config(format!(
                "window requires hu_max > hu_min, got [{}, {}]",
                self.window.hu_min, self.window.hu_max
            )));
        }
        check_crop_axes("tiling.window_shape", self.tiling.window_shape)?;
        for axis in 0..3 {
            if self.tiling.overlap[axis] >= self.tiling.window_shape[axis] {
                return Err(Error::Config(format!(
                    "tiling.overlap axis {axis} is {}, must be below the window shape {}",
                    self.tiling.overlap[axis], self.tiling.window_shape[axis]
                )));
            }
        }
        Ok(())
    }
}

/// Reads and validates a run config. The network's slots-per-cell count is
/// derived from the mode, never from the file.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.network.k_per_point = cfg.mode.k();
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &RunConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("serialize: {e}")))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("af3d-config-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn default_validates() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn empty_json_is_the_default() {
        let dir = tmp_dir("empty");
        let path = dir.join("run.json");
        fs::write(&path, "{}").unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.network.k_per_point, 1);
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tmp_dir("roundtrip");
        let path = dir.join("run.json");
        let mut cfg = RunConfig::default();
        cfg.mode = Mode::AnchorBased;
        cfg.network.k_per_point = 3;
        cfg.seed = 71;
        cfg.train.crop_shape = [32, 48, 64];
        cfg.optim.learning_rate = 0.005;
        save_config(&cfg, &path).unwrap();
        let back = load_config(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.network.k_per_point, 3);
    }

    #[test]
    fn unknown_key_names_the_key() {
        let dir = tmp_dir("unknown");
        let path = dir.join("run.json");
        fs::write(&path, r#"{"train": {"stepz": 5}}"#).unwrap();
        let err = load_config(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stepz"), "{msg}");
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        let dir = tmp_dir("toplevel");
        let path = dir.join("run.json");
        fs::write(&path, r#"{"learning_rate": 0.1}"#).unwrap();
        assert!(load_config(&path).is_err());
    }

    #[test]
    fn mode_string_controls_k() {
        let dir = tmp_dir("mode");
        let path = dir.join("run.json");
        fs::write(&path, r#"{"mode": "anchor_based"}"#).unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.mode, Mode::AnchorBased);
        assert_eq!(cfg.network.k_per_point, 3);
        assert_eq!(cfg.network.head_out_channels(), 15);
    }

    #[test]
    fn crop_shape_must_divide_into_cells() {
        let mut cfg = RunConfig::default();
        cfg.train.crop_shape = [60, 64, 64];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("crop_shape"), "{msg}");
    }

    #[test]
    fn inverted_eps_rejected() {
        let mut cfg = RunConfig::default();
        cfg.assign.eps_p = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overlap_must_stay_below_window() {
        let mut cfg = RunConfig::default();
        cfg.tiling.overlap = [128, 32, 32];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_parses_from_cli_strings() {
        assert_eq!("anchor_free".parse::<Mode>().unwrap(), Mode::AnchorFree);
        assert_eq!("anchor_based".parse::<Mode>().unwrap(), Mode::AnchorBased);
        assert!("anchors".parse::<Mode>().is_err());
        assert_eq!(Mode::AnchorFree.as_str(), "anchor_free");
    }
}
