use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::DEFAULT_THETA;

/// `ceil(2L/3)`: the layer after which visual tokens are pruned.
pub fn default_prune_layer(layers: usize) -> usize {
    (2 * layers).div_ceil(3)
}

/// Shape of the toy decoder. `prune_layer` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub prune_layer: usize,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    pub seed: u64,
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}

fn default_eps() -> f64 {
    1e-6
}

impl DecoderConfig {
    /// Builds a config with `prune_layer = ceil(2L/3)`.
    pub fn new(layers: usize, hidden: usize, heads: usize, ffn: usize, vocab: usize, seed: u64) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ffn,
            vocab,
            prune_layer: default_prune_layer(layers),
            rope_theta: DEFAULT_THETA,
            norm_eps: 1e-6,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.vocab == 0 {
            bail!(Config, "decoder dimensions must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) {
            bail!(Config, "hidden {} not divisible by heads {}", self.hidden, self.heads);
        }
        if !self.head_dim().is_multiple_of(2) {
            bail!(Config, "head dim {} must be even for rotary embeddings", self.head_dim());
        }
        if self.prune_layer == 0 || self.prune_layer > self.layers {
            bail!(Config, "prune layer {} outside 1..={}", self.prune_layer, self.layers);
        }
        if !(self.norm_eps > 0.0) || !(self.rope_theta > 0.0) {
            bail!(Config, "norm_eps and rope_theta must be positive");
        }
        Ok(())
    }
}

/// Visual encoder stub: patch grid, feature width `channels` (C) and `levels` (M).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualStubConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub levels: usize,
    pub seed: u64,
}

impl VisualStubConfig {
    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            bail!(Config, "visual stub needs at least one feature level");
        }
        if self.num_tokens() == 0 || self.channels == 0 {
            bail!(Config, "visual grid and channel count must be positive");
        }
        Ok(())
    }
}
