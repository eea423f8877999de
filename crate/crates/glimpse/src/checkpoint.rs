//! JSON checkpoints. Floats are written with shortest round-trip formatting, so
//! a save/load cycle reproduces every bit.

use std::path::Path;

use glimpse_core::numerics::Tensor;
use glimpse_core::prune::GlimpseParams;
use glimpse_core::training::AdamW;
use serde::{Deserialize, Serialize};

use crate::config::{Model, RunConfig};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn of(name: String, t: &Tensor) -> Self {
        Self {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Config with its seed resolved.
    pub config: RunConfig,
    /// `[L, D]` glimpse rows.
    pub glimpse: NamedTensor,
    pub vip: Vec<NamedTensor>,
    #[serde(default)]
    pub optimizer: Option<AdamW>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, params: &GlimpseParams, optimizer: Option<AdamW>) -> Self {
        let mut named = params.named().into_iter();
        let (gname, g) = named.next().expect("glimpse group first");
        Self {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            glimpse: NamedTensor::of(gname, g),
            vip: named.map(|(n, t)| NamedTensor::of(n, t)).collect(),
            optimizer,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let probe: VersionProbe = serde_json::from_str(text).map_err(|e| CliError::Format(format!("checkpoint: {e}")))?;
        match probe.format_version {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(CliError::Format(format!(
                    "checkpoint format_version {v} is not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(CliError::Format("checkpoint has no format_version".into())),
        }
        serde_json::from_str(text).map_err(|e| CliError::Format(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
    }

    /// Rebuilds the model and trainable parameters, checking every group's name and shape.
    pub fn restore(&self) -> CliResult<(Model, GlimpseParams)> {
        let model = self.config.build()?;
        let mut params = GlimpseParams::init(&model.backbone, &model.vip)?;
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let stored: Vec<&NamedTensor> = std::iter::once(&self.glimpse).chain(&self.vip).collect();
        if stored.len() != names.len() {
            return Err(CliError::Format(format!("checkpoint holds {} groups, model has {}", stored.len(), names.len())));
        }
        for ((t, name), s) in params.tensors_mut().into_iter().zip(&names).zip(stored) {
            if &s.name != name || s.shape != t.shape() || s.data.len() != t.len() {
                return Err(CliError::Format(format!(
                    "group {:?} {:?} does not match model group {:?} {:?}",
                    s.name,
                    s.shape,
                    name,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&s.data);
        }
        Ok((model, params))
    }
}
