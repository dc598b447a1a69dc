//! Pipeline configuration: region geometry plus per-module hyperparameters,
//! loadable from a sectioned key = value file. Unknown keys are rejected so
//! typos cannot silently fall back to defaults.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Crop extents and voxel geometry around the reference box. Desk-scale
/// defaults give a 64×64×20 voxel grid over ±3.2 m.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub voxel_x: f64,
    pub voxel_y: f64,
    pub voxel_z: f64,
    /// Spatial stride of the first BEV conv; 1 keeps the full grid.
    pub bev_stride: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            x_min: -3.2,
            x_max: 3.2,
            y_min: -3.2,
            y_max: 3.2,
            z_min: -3.0,
            z_max: 1.0,
            voxel_x: 0.1,
            voxel_y: 0.1,
            voxel_z: 0.2,
            bev_stride: 1,
        }
    }
}

impl RegionConfig {
    fn axis_cells(&self, lo: f64, hi: f64, step: f64, name: &str) -> Result<usize, ConfigError> {
        if step <= 0.0 {
            return Err(ConfigError::Invalid(format!("{name} voxel size must be positive")));
        }
        if hi <= lo {
            return Err(ConfigError::Invalid(format!("{name} range is empty ({lo}..{hi})")));
        }
        let cells = (hi - lo) / step;
        if (cells - cells.round()).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "{name} range {lo}..{hi} is not an integer number of {step} m voxels"
            )));
        }
        Ok(cells.round() as usize)
    }

    /// Voxel grid extents (rows along x, cols along y, layers along z).
    pub fn grid_extents(&self) -> Result<(usize, usize, usize), ConfigError> {
        Ok((
            self.axis_cells(self.x_min, self.x_max, self.voxel_x, "x")?,
            self.axis_cells(self.y_min, self.y_max, self.voxel_y, "y")?,
            self.axis_cells(self.z_min, self.z_max, self.voxel_z, "z")?,
        ))
    }

    /// BEV grid extents after the encoder stride.
    pub fn bev_extents(&self) -> Result<(usize, usize), ConfigError> {
        let (h, l, _) = self.grid_extents()?;
        Ok((h / self.bev_stride, l / self.bev_stride))
    }

    /// Meters per BEV cell along x (row axis).
    pub fn cell_size_x(&self) -> f64 {
        self.voxel_x * self.bev_stride as f64
    }

    /// Meters per BEV cell along y (col axis).
    pub fn cell_size_y(&self) -> f64 {
        self.voxel_y * self.bev_stride as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (h, l, z) = self.grid_extents()?;
        if self.bev_stride == 0 {
            return Err(ConfigError::Invalid("bev_stride must be ≥ 1".into()));
        }
        if h % self.bev_stride != 0 || l % self.bev_stride != 0 {
            return Err(ConfigError::Invalid(format!(
                "grid {h}×{l} not divisible by bev_stride {}",
                self.bev_stride
            )));
        }
        if z == 0 || h == 0 || l == 0 {
            return Err(ConfigError::Invalid("grid has a zero extent".into()));
        }
        Ok(())
    }
}

/// Stage-I motion predictor hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BmpConfig {
    /// History length N: number of past boxes consumed (padded if fewer).
    pub history_len: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
}

impl Default for BmpConfig {
    fn default() -> Self {
        BmpConfig { history_len: 5, token_dim: 128, heads: 4, encoder_layers: 2, decoder_layers: 2, ffn_dim: 256 }
    }
}

impl BmpConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.history_len < 2 {
            return Err(ConfigError::Invalid("bmp.history_len must be ≥ 2".into()));
        }
        if self.token_dim == 0 || self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "bmp.token_dim {} must be a positive multiple of bmp.heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.ffn_dim == 0 {
            return Err(ConfigError::Invalid("bmp layer counts and ffn_dim must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Feature-interaction hyperparameters (BEV channels, pyramid depth,
/// deformable sampling).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RimConfig {
    /// BEV feature channels D.
    pub channels: usize,
    /// Pyramid depth I: levels downsampled by 2^i for i < scale_layers.
    pub scale_layers: usize,
    /// Deformable attention heads.
    pub heads: usize,
    /// Sampled reference points K per scale per head.
    pub ref_points: usize,
}

impl Default for RimConfig {
    fn default() -> Self {
        RimConfig { channels: 16, scale_layers: 3, heads: 4, ref_points: 4 }
    }
}

impl RimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=3).contains(&self.scale_layers) {
            return Err(ConfigError::Invalid("rim.scale_layers must be in 1..=3".into()));
        }
        if self.ref_points == 0 {
            return Err(ConfigError::Invalid("rim.ref_points must be ≥ 1".into()));
        }
        if self.channels == 0 || self.heads == 0 || (2 * self.channels) % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "paired channel dim {} must be a positive multiple of rim.heads {}",
                2 * self.channels,
                self.heads
            )));
        }
        Ok(())
    }
}

/// Motion-refinement hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct IrmConfig {
    /// Refinement iterations N.
    pub iterations: usize,
    /// Correlation lookup radius r in cells.
    pub radius: usize,
    /// Hidden channels of the refinement convolutions.
    pub hidden: usize,
    /// Scale the correlation volume by 1/√D to keep magnitudes O(1).
    pub scale_corr: bool,
}

impl Default for IrmConfig {
    fn default() -> Self {
        IrmConfig { iterations: 10, radius: 4, hidden: 64, scale_corr: true }
    }
}

impl IrmConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.iterations == 0 {
            return Err(ConfigError::Invalid("irm.iterations must be ≥ 1".into()));
        }
        if self.radius == 0 {
            return Err(ConfigError::Invalid("irm.radius must be ≥ 1".into()));
        }
        if self.hidden == 0 {
            return Err(ConfigError::Invalid("irm.hidden must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Training-loop knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Std-dev (meters) of the centering jitter applied to history boxes so
    /// the refinement stage learns to correct stage-I drift.
    pub jitter_sigma: f64,
    pub log_every: usize,
    /// Steps between checkpoint writes (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 500, lr: 1e-3, jitter_sigma: 0.1, log_every: 25, checkpoint_every: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.steps == 0 {
            return Err(ConfigError::Invalid("train.steps must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ConfigError::Invalid("train.lr must be positive".into()));
        }
        if self.jitter_sigma < 0.0 {
            return Err(ConfigError::Invalid("train.jitter_sigma must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Complete pipeline configuration, one section per module.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub region: RegionConfig,
    pub bmp: BmpConfig,
    pub rim: RimConfig,
    pub irm: IrmConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.region.validate()?;
        self.bmp.validate()?;
        self.rim.validate()?;
        self.irm.validate()?;
        self.train.validate()?;
        let (h, l) = self.region.bev_extents()?;
        let min_extent = 1usize << (self.rim.scale_layers - 1);
        if h < min_extent || l < min_extent {
            return Err(ConfigError::Invalid(format!(
                "BEV grid {h}×{l} too small for {} pyramid levels",
                self.rim.scale_layers
            )));
        }
        Ok(())
    }
}
