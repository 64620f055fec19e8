//! Run configuration shared by every pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{AnchorConfig, AnchorThresholds, ProposalThresholds};
use crate::motion::MotionConfig;
use crate::pooling::TemporalMode;
use crate::sampling::BatchConfig;
use crate::synth::SceneConfig;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "TUBEKIT_CONFIG";

/// The shipped default configuration, annotated.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../config/default.toml");

pub const SQUARE_ASPECT_RATIOS: [f64; 1] = [1.0];
pub const DIVERSE_ASPECT_RATIOS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const DEFAULT_ANCHOR_SCALES: [f64; 6] = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: Box<toml::de::Error> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameSize {
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorPresets {
    pub square: Vec<f64>,
    pub diverse: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    pub proposal_positive: f64,
    pub proposal_background_low: f64,
    pub anchor_positive: f64,
    pub anchor_negative: f64,
}

impl LabelConfig {
    pub fn proposal(&self) -> ProposalThresholds {
        ProposalThresholds { positive: self.proposal_positive, background_low: self.proposal_background_low }
    }

    pub fn anchor(&self) -> AnchorThresholds {
        AnchorThresholds { positive: self.anchor_positive, negative: self.anchor_negative }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmsConfig {
    pub proposal: f64,
    pub detection: f64,
    pub top_n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    pub side: usize,
    pub deep_side: usize,
    pub temporal: TemporalMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfigs {
    pub classifier: BatchConfig,
    pub proposal_network: BatchConfig,
    pub hard: BatchConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub recall_threshold: f64,
    pub ap_iou: f64,
    pub corloc_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tube_length: usize,
    pub seed: u64,
    pub frame: FrameSize,
    pub anchors: AnchorConfig,
    pub anchor_presets: AnchorPresets,
    pub labels: LabelConfig,
    pub nms: NmsConfig,
    pub pooling: PoolingConfig,
    pub batch: BatchConfigs,
    pub motion: MotionConfig,
    pub metrics: MetricConfig,
    pub synth: SceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tube_length: 10,
            seed: 0,
            frame: FrameSize { width: 320.0, height: 240.0 },
            anchors: AnchorConfig {
                stride: 16.0,
                scales: DEFAULT_ANCHOR_SCALES.to_vec(),
                aspect_ratios: SQUARE_ASPECT_RATIOS.to_vec(),
            },
            anchor_presets: AnchorPresets {
                square: SQUARE_ASPECT_RATIOS.to_vec(),
                diverse: DIVERSE_ASPECT_RATIOS.to_vec(),
            },
            labels: LabelConfig {
                proposal_positive: 0.5,
                proposal_background_low: 0.1,
                anchor_positive: 0.5,
                anchor_negative: 0.3,
            },
            nms: NmsConfig { proposal: 0.7, detection: 0.3, top_n: 300 },
            pooling: PoolingConfig { side: 6, deep_side: 7, temporal: TemporalMode::Max },
            batch: BatchConfigs {
                classifier: BatchConfig::classifier(),
                proposal_network: BatchConfig::proposal_network(),
                hard: BatchConfig::hard_mining(),
            },
            motion: MotionConfig::default(),
            metrics: MetricConfig { recall_threshold: 0.5, ap_iou: 0.5, corloc_iou: 0.5 },
            synth: SceneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text).map_err(|e| ConfigError::Parse { path: path.to_path_buf(), source: Box::new(e) })
    }

    /// Loads `path`, else the file named by [`CONFIG_ENV`], else the defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    /// Anchor config with the diverse ratio set swapped in.
    pub fn diverse_anchors(&self) -> AnchorConfig {
        AnchorConfig { aspect_ratios: self.anchor_presets.diverse.clone(), ..self.anchors.clone() }
    }
}
