//! Closed-form prefill, decode and KV-cache costs.
//!
//! FLOPs count matmuls only, at two per multiply-add, matching the decoder's
//! instrumented counter: per layer `8·S·D² + 4·S²·D + 6·S·D·ffn` for a prefill of
//! `S` rows, and `8·D² + 4·n·D + 6·D·ffn` for one decode step against `n` cached
//! rows. The vocabulary head and the vision encoder are excluded.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::default_prune_layer;
use crate::error::{bail, Result};
use crate::vip::{vip_flops, VipConfig};

/// Decoder dimensions plus the predictor sizes used for its overhead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchPreset {
    pub name: String,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub prune_layer: usize,
    /// Visual feature width `C` seen by the predictor.
    pub channels: usize,
    pub vip_hidden: usize,
    pub vip_cond: usize,
    pub vip_heads: usize,
    pub vip_blocks: usize,
    #[serde(default)]
    pub notes: String,
}

struct Row(&'static str, usize, usize, usize, usize, usize, usize, &'static str);

const TABLE: [Row; 4] = [
    Row("qwen2.5-vl-3b", 36, 2048, 16, 11008, 24, 1280, "ffn from the public Qwen2.5-3B config"),
    Row("qwen2.5-vl-7b", 28, 3584, 28, 18944, 19, 1280, "ffn from the public Qwen2.5-7B config"),
    Row("llava-1.5-7b", 32, 4096, 32, 11008, 22, 1024, "ffn from the public Vicuna-7B config"),
    Row("llava-1.5-13b", 40, 5120, 40, 13824, 27, 1024, "ffn from the public Vicuna-13B config"),
];

impl ArchPreset {
    /// Custom dimensions; `K` defaults to `ceil(2L/3)`. The predictor is sized to
    /// zero, so it adds no cost until [`Self::with_predictor`] is applied.
    pub fn custom(layers: usize, hidden: usize, heads: usize, ffn: usize, prune_layer: Option<usize>) -> Self {
        Self {
            name: String::from("custom"),
            layers,
            hidden,
            heads,
            ffn,
            prune_layer: prune_layer.unwrap_or_else(|| default_prune_layer(layers)),
            channels: 0,
            vip_hidden: 0,
            vip_cond: 0,
            vip_heads: 1,
            vip_blocks: 0,
            notes: String::new(),
        }
    }

    pub fn with_predictor(mut self, channels: usize, hidden: usize, cond: usize, blocks: usize) -> Self {
        self.channels = channels;
        self.vip_hidden = hidden;
        self.vip_cond = cond;
        self.vip_blocks = blocks;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            bail!(Config, "preset {} has a zero dimension", self.name);
        }
        if self.prune_layer == 0 || self.prune_layer > self.layers {
            bail!(Config, "prune layer {} outside 1..={}", self.prune_layer, self.layers);
        }
        Ok(())
    }

    fn vip_config(&self) -> VipConfig {
        VipConfig::new(self.vip_hidden, self.vip_cond, self.vip_blocks, self.vip_heads, 0)
    }

    /// Predictor FLOPs for `num_visual` tokens.
    pub fn vip_flops(&self, num_visual: usize) -> f64 {
        vip_flops(num_visual, self.heads, self.channels, &self.vip_config()) as f64
    }
}

pub fn presets() -> Vec<ArchPreset> {
    TABLE
        .iter()
        .map(|r| ArchPreset {
            name: r.0.to_string(),
            layers: r.1,
            hidden: r.2,
            heads: r.3,
            ffn: r.4,
            prune_layer: r.5,
            channels: r.6,
            vip_hidden: 256,
            vip_cond: 512,
            vip_heads: 4,
            vip_blocks: 4,
            notes: r.7.to_string(),
        })
        .collect()
}

pub fn preset(name: &str) -> Option<ArchPreset> {
    presets().into_iter().find(|p| p.name == name)
}

/// `2·L·S·D` cached scalars.
pub fn kv_elements(layers: usize, seq: usize, hidden: usize) -> u64 {
    2 * layers as u64 * seq as u64 * hidden as u64
}

/// One decoder layer over a prefill of `seq` rows. `heads` does not change the count.
pub fn layer_flops(seq: usize, hidden: usize, _heads: usize, ffn: usize) -> f64 {
    let (s, d, f) = (seq as f64, hidden as f64, ffn as f64);
    2.0 * s * 4.0 * d * d + 2.0 * 2.0 * s * s * d + 2.0 * s * 3.0 * d * f
}

/// One decoder layer for a single new token against `cache_len` cached rows
/// (the new row included).
pub fn decode_layer_flops(cache_len: usize, hidden: usize, ffn: usize) -> f64 {
    let (n, d, f) = (cache_len as f64, hidden as f64, ffn as f64);
    2.0 * 4.0 * d * d + 2.0 * 2.0 * n * d + 2.0 * 3.0 * d * f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillEstimate {
    pub baseline: f64,
    pub pruned: f64,
    pub vip: f64,
    pub ratio: f64,
}

/// Baseline `L·layer(S)` against `K·layer(S) + (L−K)·layer(S′) + VIP`, with the
/// predictor sized for `S` visual tokens.
pub fn pruned_prefill_flops(p: &ArchPreset, seq: usize, seq_pruned: usize) -> Result<PrefillEstimate> {
    p.validate()?;
    if seq == 0 || seq_pruned > seq {
        bail!(Config, "need 1 <= S and S' <= S, got S={} S'={}", seq, seq_pruned);
    }
    let full = layer_flops(seq, p.hidden, p.heads, p.ffn);
    let short = layer_flops(seq_pruned, p.hidden, p.heads, p.ffn);
    let baseline = p.layers as f64 * full;
    let vip = p.vip_flops(seq);
    let pruned = p.prune_layer as f64 * full + (p.layers - p.prune_layer) as f64 * short + vip;
    Ok(PrefillEstimate {
        baseline,
        pruned,
        vip,
        ratio: pruned / baseline,
    })
}

/// Measured or predicted cost of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Cache length after prefill.
    pub cache_len: usize,
    pub prefill_flops: f64,
    /// Decoder FLOPs of the first decode step.
    pub decode_flops_per_token: f64,
    pub kv_elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub layers: usize,
    pub hidden: usize,
    pub prune_layer: usize,
    pub baseline: RunStats,
    pub pruned: RunStats,
    pub prefill_ratio: f64,
    pub decode_ratio: f64,
    pub kv_ratio: f64,
    pub bytes_per_element: usize,
    pub kv_bytes_baseline: u64,
    pub kv_bytes_pruned: u64,
}

pub fn compare_report(arch: &ArchPreset, baseline: RunStats, pruned: RunStats, bytes_per_element: usize) -> CostReport {
    CostReport {
        name: arch.name.clone(),
        layers: arch.layers,
        hidden: arch.hidden,
        prune_layer: arch.prune_layer,
        prefill_ratio: pruned.prefill_flops / baseline.prefill_flops,
        decode_ratio: pruned.decode_flops_per_token / baseline.decode_flops_per_token,
        kv_ratio: pruned.kv_elements as f64 / baseline.kv_elements as f64,
        bytes_per_element,
        kv_bytes_baseline: baseline.kv_elements * bytes_per_element as u64,
        kv_bytes_pruned: pruned.kv_elements * bytes_per_element as u64,
        baseline,
        pruned,
    }
}

/// Report predicted entirely from the closed forms.
pub fn analytic_report(p: &ArchPreset, seq: usize, seq_pruned: usize, bytes_per_element: usize) -> Result<CostReport> {
    let est = pruned_prefill_flops(p, seq, seq_pruned)?;
    let run = |len: usize, prefill: f64| RunStats {
        cache_len: len,
        prefill_flops: prefill,
        decode_flops_per_token: p.layers as f64 * decode_layer_flops(len + 1, p.hidden, p.ffn),
        kv_elements: kv_elements(p.layers, len, p.hidden),
    };
    Ok(compare_report(p, run(seq, est.baseline), run(seq_pruned, est.pruned), bytes_per_element))
}

pub const CSV_HEADER: [&str; 11] = [
    "name", "L", "D", "K", "S", "S_pruned", "prefill_base", "prefill_pruned", "ratio", "kv_base", "kv_pruned",
];

impl CostReport {
    /// Fields in [`CSV_HEADER`] order.
    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.name.clone(),
            self.layers.to_string(),
            self.hidden.to_string(),
            self.prune_layer.to_string(),
            self.baseline.cache_len.to_string(),
            self.pruned.cache_len.to_string(),
            format!("{}", self.baseline.prefill_flops),
            format!("{}", self.pruned.prefill_flops),
            format!("{}", self.prefill_ratio),
            self.baseline.kv_elements.to_string(),
            self.pruned.kv_elements.to_string(),
        ]
    }
}

#[cfg(test)]
mod tests;
