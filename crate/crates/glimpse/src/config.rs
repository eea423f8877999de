//! TOML run configuration.
//!
//! Every key is optional; omitted keys take the desk-scale defaults below and
//! unknown keys are rejected. One top-level `seed` drives everything: decoder
//! weights use `seed`, the visual stub `seed + 1`, predictor init `seed + 2`, and
//! the training shuffle `seed`.
//!
//! ```toml
//! seed = 0
//! [model]   # layers = 4, hidden = 32, heads = 4, ffn = 64, vocab = 21, prune_layer = ceil(2L/3)
//! [visual]  # grid_h = 8, grid_w = 8, channels = 64, levels = 2
//! [vip]     # hidden = 8, cond = 8, blocks = 2, heads = 2, tau = 0.5, r_max unset
//! [train]   # lr = 3e-3, warmup_ratio = 0.1, schedule = "cosine", epochs = 1, grad_accum = 1
//! [paths]   # data, checkpoint, metrics
//! ```

use std::path::{Path, PathBuf};

use glimpse_core::backbone::{default_prune_layer, Backbone, DecoderConfig, VisualStubConfig};
use glimpse_core::numerics::DEFAULT_THETA;
use glimpse_core::training::{AdamWConfig, LossWeights, Schedule, TrainConfig};
use glimpse_core::vip::VipConfig;
use glimpse_core::vocab::MIN_VOCAB;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "GLIMPSE_SEED";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub visual: VisualSection,
    pub vip: VipSection,
    pub train: TrainSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub prune_layer: Option<usize>,
    pub rope_theta: f64,
    pub norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 32,
            heads: 4,
            ffn: 64,
            vocab: MIN_VOCAB,
            prune_layer: None,
            rope_theta: DEFAULT_THETA,
            norm_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualSection {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub levels: usize,
}

impl Default for VisualSection {
    fn default() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            channels: 64,
            levels: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VipSection {
    pub hidden: usize,
    pub cond: usize,
    pub blocks: usize,
    pub heads: usize,
    pub tau: f64,
    pub r_max: Option<f64>,
    pub rope_theta: f64,
    pub norm_eps: f64,
}

impl Default for VipSection {
    fn default() -> Self {
        Self {
            hidden: 8,
            cond: 8,
            blocks: 2,
            heads: 2,
            tau: 0.5,
            r_max: None,
            rope_theta: DEFAULT_THETA,
            norm_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub grad_accum: usize,
    pub weights: LossWeights,
    pub adamw: AdamWConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            warmup_ratio: t.warmup_ratio,
            schedule: t.schedule,
            epochs: t.epochs,
            grad_accum: t.grad_accum,
            weights: t.weights,
            adamw: t.adamw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// Everything needed to run or train, built from one resolved config.
pub struct Model {
    pub backbone: Backbone,
    pub vip: VipConfig,
    pub train: TrainConfig,
}

/// `GLIMPSE_SEED` if set and valid.
pub fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fixes the seed: `flag`, else the file's `seed`, else `GLIMPSE_SEED`, else 0.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> CliResult<u64> {
        let seed = match flag.or(self.seed) {
            Some(s) => s,
            None => env_seed()?.unwrap_or(0),
        };
        self.seed = Some(seed);
        Ok(seed)
    }

    pub fn decoder(&self) -> DecoderConfig {
        let m = &self.model;
        DecoderConfig {
            layers: m.layers,
            hidden: m.hidden,
            heads: m.heads,
            ffn: m.ffn,
            vocab: m.vocab,
            prune_layer: m.prune_layer.unwrap_or_else(|| default_prune_layer(m.layers)),
            rope_theta: m.rope_theta,
            norm_eps: m.norm_eps,
            seed: self.seed.unwrap_or(0),
        }
    }

    pub fn visual_stub(&self) -> VisualStubConfig {
        let v = &self.visual;
        VisualStubConfig {
            grid_h: v.grid_h,
            grid_w: v.grid_w,
            channels: v.channels,
            levels: v.levels,
            seed: self.seed.unwrap_or(0).wrapping_add(1),
        }
    }

    pub fn vip_config(&self) -> VipConfig {
        let v = &self.vip;
        VipConfig {
            hidden: v.hidden,
            cond: v.cond,
            blocks: v.blocks,
            heads: v.heads,
            tau: v.tau,
            r_max: v.r_max,
            rope_theta: v.rope_theta,
            norm_eps: v.norm_eps,
            seed: self.seed.unwrap_or(0).wrapping_add(2),
        }
    }

    pub fn train_config(&self, samples: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            warmup_ratio: t.warmup_ratio,
            schedule: t.schedule,
            epochs: t.epochs,
            grad_accum: t.grad_accum,
            seed: self.seed.unwrap_or(0),
            dataset_size: samples,
            weights: t.weights,
            adamw: t.adamw,
        }
    }

    pub fn build(&self) -> CliResult<Model> {
        if self.model.vocab < MIN_VOCAB {
            return Err(CliError::Usage(format!("model.vocab {} is below the symbol table size {}", self.model.vocab, MIN_VOCAB)));
        }
        let backbone = Backbone::new(&self.decoder(), &self.visual_stub())?;
        let vip = self.vip_config();
        vip.validate()?;
        let train = self.train_config(0);
        train.validate()?;
        Ok(Model { backbone, vip, train })
    }
}
