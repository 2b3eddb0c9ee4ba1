//! Run configuration: one JSON document describing data, model, schedule,
//! training, sampling, and the optional masked task.

use serde::{Deserialize, Serialize};
use spvd::data::NormalizeMode;
use spvd::diffusion::ScheduleConfig;
use spvd::error::{Error, Result};
use spvd::net::NetworkConfig;
use spvd::train::TrainConfig;
use std::path::PathBuf;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub task: TaskSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad run config: {e}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic shape family (sphere, box, cylinder, chairoid, tableoid).
    /// Ignored when `path` points at a directory of clouds.
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_n_shapes")]
    pub n_shapes: usize,
    #[serde(default = "default_n_points")]
    pub n_points: usize,
    #[serde(default = "default_normalization")]
    pub normalization: NormalizeMode,
}

fn default_n_shapes() -> usize {
    8
}
fn default_n_points() -> usize {
    256
}
fn default_normalization() -> NormalizeMode {
    NormalizeMode::PerShapeUnitBox
}

/// Either a named preset or an explicit block table, with optional scalar
/// overrides applied on top.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub blocks: Option<NetworkConfig>,
    #[serde(default)]
    pub base_resolution: Option<u32>,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl ModelSection {
    pub fn resolve(&self) -> Result<NetworkConfig> {
        let mut cfg = match (&self.preset, &self.blocks) {
            (Some(_), Some(_)) => {
                return Err(Error::config("model: give either preset or blocks, not both"))
            }
            (Some(name), None) => NetworkConfig::preset(name)?,
            (None, Some(blocks)) => blocks.clone(),
            (None, None) => return Err(Error::config("model: preset or blocks required")),
        };
        if let Some(r) = self.base_resolution {
            cfg.base_resolution = r;
        }
        if let Some(c) = self.num_classes {
            cfg.num_classes = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr_peak")]
    pub lr_peak: f64,
    #[serde(default = "default_true")]
    pub one_cycle: bool,
    #[serde(default)]
    pub seed: u64,
    /// Extra checkpoint every this many steps (final checkpoint always written).
    #[serde(default)]
    pub save_every: Option<usize>,
}

fn default_steps() -> usize {
    1000
}
fn default_batch() -> usize {
    8
}
fn default_lr_peak() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: default_steps(),
            batch_size: default_batch(),
            lr_peak: default_lr_peak(),
            one_cycle: true,
            seed: 0,
            save_every: None,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr_peak: self.lr_peak,
            one_cycle: self.one_cycle,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "default_rule")]
    pub rule: String,
    /// Defaults to T for ddpm and min(50, T) for ddim.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_rule() -> String {
    "ddim".to_string()
}
fn default_count() -> usize {
    8
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            rule: default_rule(),
            steps: None,
            count: default_count(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSection {
    #[default]
    None,
    Completion {
        m: usize,
    },
    Superres {
        k_in: usize,
        n_out: usize,
    },
}
