//! Visual Importance Predictor.
//!
//! Glimpse attention `A` (`[Nv, H]`) is lifted to `E` dims, then refined by `M`
//! self-attention blocks. Block `b` conditions on feature level `M-1-b` (deepest
//! first): the level is projected to `F` dims and concatenated onto the
//! 2D-rotated query and key of every head, while values stay in the `E` stream.
//! A final norm and a linear head give one logit per visual token.

mod select;

pub use select::{retention_cap, select_tokens, SelectionResult};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{GlimpseAttention, VisualFeatures};
use crate::error::{bail, Result};
use crate::numerics::{math, matmul_counted, rms_norm_rows, rotate_head_2d, softmax_in_place, FlopCounter, Rng, Tensor, DEFAULT_THETA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VipConfig {
    /// Hidden size E.
    pub hidden: usize,
    /// Condition size F.
    pub cond: usize,
    /// Number of blocks M; must equal the visual feature levels.
    pub blocks: usize,
    pub heads: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Maximum retention ratio in `(0, 1]`; `None` means unlimited.
    #[serde(default)]
    pub r_max: Option<f64>,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    pub seed: u64,
}

fn default_tau() -> f64 {
    0.5
}

fn default_theta() -> f64 {
    DEFAULT_THETA
}

fn default_eps() -> f64 {
    1e-6
}

impl VipConfig {
    pub fn new(hidden: usize, cond: usize, blocks: usize, heads: usize, seed: u64) -> Self {
        Self {
            hidden,
            cond,
            blocks,
            heads,
            tau: default_tau(),
            r_max: None,
            rope_theta: DEFAULT_THETA,
            norm_eps: 1e-6,
            seed,
        }
    }

    pub fn head_hidden(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn head_cond(&self) -> usize {
        self.cond / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.blocks == 0 {
            bail!(Config, "VIP dimensions must be positive");
        }
        if !self.hidden.is_multiple_of(self.heads) || !(self.hidden + self.cond).is_multiple_of(self.heads) {
            bail!(Config, "E={} and E+F={} must divide into {} heads", self.hidden, self.hidden + self.cond, self.heads);
        }
        if !self.head_hidden().is_multiple_of(4) {
            bail!(Config, "per-head E slice {} must be divisible by 4 for 2D rotary", self.head_hidden());
        }
        if !(self.tau >= 0.0 && self.tau <= 1.0) {
            bail!(Config, "tau {} outside [0, 1]", self.tau);
        }
        if let Some(r) = self.r_max {
            if !(r > 0.0 && r <= 1.0) {
                bail!(Config, "r_max {} outside (0, 1]", r);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VipBlock {
    pub proj_v: Tensor,
    pub proj_v_bias: Tensor,
    pub norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VipParams {
    pub proj_a: Tensor,
    pub proj_a_bias: Tensor,
    pub blocks: Vec<VipBlock>,
    pub final_norm: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / math::sqrt(fan_in as f64);
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_vec(&[rows, cols], data).expect("param shape")
}

impl VipParams {
    /// Scaled-uniform init; the output head starts at zero so `P ≡ 0.5`.
    pub fn init(cfg: &VipConfig, attn_heads: usize, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed ^ 0x0056_4950);
        let (e, f) = (cfg.hidden, cfg.cond);
        let proj_a = uniform(&mut rng, attn_heads, e, attn_heads);
        let proj_a_bias = uniform(&mut rng, 1, e, attn_heads);
        let blocks = (0..cfg.blocks)
            .map(|_| VipBlock {
                proj_v: uniform(&mut rng, channels, f, channels),
                proj_v_bias: Tensor::zeros(&[1, f]),
                norm: Tensor::from_vec(&[1, e], vec![1.0; e]).expect("norm"),
                wq: uniform(&mut rng, e, e, e),
                wk: uniform(&mut rng, e, e, e),
                wv: uniform(&mut rng, e, e, e),
                wo: uniform(&mut rng, e, e, e),
            })
            .collect();
        Ok(Self {
            proj_a,
            proj_a_bias,
            blocks,
            final_norm: Tensor::from_vec(&[1, e], vec![1.0; e])?,
            head_w: Tensor::zeros(&[e, 1]),
            head_b: Tensor::zeros(&[1, 1]),
        })
    }

    /// Parameter groups in a fixed order, keyed by stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (String::from("vip.proj_a"), &self.proj_a),
            (String::from("vip.proj_a_bias"), &self.proj_a_bias),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            out.push((format!("vip.block{b}.proj_v"), &blk.proj_v));
            out.push((format!("vip.block{b}.proj_v_bias"), &blk.proj_v_bias));
            out.push((format!("vip.block{b}.norm"), &blk.norm));
            out.push((format!("vip.block{b}.wq"), &blk.wq));
            out.push((format!("vip.block{b}.wk"), &blk.wk));
            out.push((format!("vip.block{b}.wv"), &blk.wv));
            out.push((format!("vip.block{b}.wo"), &blk.wo));
        }
        out.push((String::from("vip.final_norm"), &self.final_norm));
        out.push((String::from("vip.head_w"), &self.head_w));
        out.push((String::from("vip.head_b"), &self.head_b));
        out
    }

    /// Mutable groups, same order as [`VipParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.proj_a, &mut self.proj_a_bias];
        for blk in &mut self.blocks {
            out.push(&mut blk.proj_v);
            out.push(&mut blk.proj_v_bias);
            out.push(&mut blk.norm);
            out.push(&mut blk.wq);
            out.push(&mut blk.wk);
            out.push(&mut blk.wv);
            out.push(&mut blk.wo);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }
}

/// Per-token importance probabilities, strictly inside `(0, 1)` for finite logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ImportanceMap {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = logits.iter().map(|&z| math::sigmoid(z)).collect();
        Self { logits, probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Input scaling of the glimpse attention: mass relative to a uniform spread over `Nv` tokens.
pub fn attention_input_scale(num_visual: usize) -> f64 {
    num_visual as f64
}

/// Which feature level block `b` reads.
pub fn level_for_block(block: usize, levels: usize) -> usize {
    levels - 1 - block
}

/// Adds a `[1, n]` bias row to every row.
fn add_bias(x: &mut Tensor, bias: &Tensor) {
    let w = bias.len();
    for i in 0..x.rows() {
        for (v, b) in x.row_mut(i).iter_mut().zip(&bias.data()[..w]) {
            *v += b;
        }
    }
}

/// Runs the predictor. `coords` are the grid `(row, col)` of every visual token.
/// `rope` toggles the 2D rotary embedding (disabled only in equivariance checks).
pub fn vip_forward_with(
    attn: &GlimpseAttention,
    feats: &VisualFeatures,
    coords: &[(usize, usize)],
    params: &VipParams,
    cfg: &VipConfig,
    rope: bool,
    flops: &FlopCounter,
) -> Result<ImportanceMap> {
    let nv = attn.num_visual();
    if feats.levels() != cfg.blocks || params.blocks.len() != cfg.blocks {
        bail!(Config, "VIP has {} blocks but {} feature levels", params.blocks.len(), feats.levels());
    }
    if feats.num_tokens() != nv || coords.len() != nv {
        bail!(Shape, "attention covers {} tokens, features {}, coords {}", nv, feats.num_tokens(), coords.len());
    }
    let (e, heads) = (cfg.hidden, cfg.heads);
    let (eh, fh) = (cfg.head_hidden(), cfg.head_cond());
    let scale = 1.0 / math::sqrt((eh + fh) as f64);

    let mut a = attn.0.clone();
    let s = attention_input_scale(nv);
    a.data_mut().iter_mut().for_each(|v| *v *= s);
    let mut x = matmul_counted(&a, &params.proj_a, flops)?;
    add_bias(&mut x, &params.proj_a_bias);

    for (b, blk) in params.blocks.iter().enumerate() {
        let level = feats.level(level_for_block(b, cfg.blocks));
        let mut cond = matmul_counted(&level, &blk.proj_v, flops)?;
        add_bias(&mut cond, &blk.proj_v_bias);

        let h = rms_norm_rows(&x, blk.norm.data(), cfg.norm_eps);
        let mut q = matmul_counted(&h, &blk.wq, flops)?;
        let mut k = matmul_counted(&h, &blk.wk, flops)?;
        let v = matmul_counted(&h, &blk.wv, flops)?;
        if rope {
            for (i, &(r, c)) in coords.iter().enumerate() {
                for head in 0..heads {
                    let sl = head * eh..(head + 1) * eh;
                    rotate_head_2d(&mut q.row_mut(i)[sl.clone()], r as f64, c as f64, cfg.rope_theta, false);
                    rotate_head_2d(&mut k.row_mut(i)[sl], r as f64, c as f64, cfg.rope_theta, false);
                }
            }
        }
        let mut mixed = Tensor::zeros(&[nv, e]);
        for head in 0..heads {
            let qh = concat_head(&q, &cond, head, eh, fh);
            let kh = concat_head(&k, &cond, head, eh, fh);
            let mut probs = matmul_counted(&qh, &kh.transpose()?, flops)?;
            for i in 0..nv {
                let row = probs.row_mut(i);
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            let vh = crate::backbone::column_block(&v, head * eh, eh);
            let out = matmul_counted(&probs, &vh, flops)?;
            for i in 0..nv {
                mixed.row_mut(i)[head * eh..(head + 1) * eh].copy_from_slice(out.row(i));
            }
        }
        let o = matmul_counted(&mixed, &blk.wo, flops)?;
        x.add_assign(&o)?;
    }

    let h = rms_norm_rows(&x, params.final_norm.data(), cfg.norm_eps);
    let z = matmul_counted(&h, &params.head_w, flops)?;
    let b = params.head_b.data()[0];
    Ok(ImportanceMap::from_logits(z.data().iter().map(|v| v + b).collect()))
}

/// Runs the predictor with 2D rotary embeddings enabled.
pub fn vip_forward(
    attn: &GlimpseAttention,
    feats: &VisualFeatures,
    coords: &[(usize, usize)],
    params: &VipParams,
    cfg: &VipConfig,
    flops: &FlopCounter,
) -> Result<ImportanceMap> {
    vip_forward_with(attn, feats, coords, params, cfg, true, flops)
}

/// `[Nv, eh + fh]`: head slice of the E stream followed by the head slice of the condition.
fn concat_head(x: &Tensor, cond: &Tensor, head: usize, eh: usize, fh: usize) -> Tensor {
    let n = x.rows();
    let mut out = Vec::with_capacity(n * (eh + fh));
    for i in 0..n {
        out.extend_from_slice(&x.row(i)[head * eh..(head + 1) * eh]);
        out.extend_from_slice(&cond.row(i)[head * fh..(head + 1) * fh]);
    }
    Tensor::from_vec(&[n, eh + fh], out).expect("head concat")
}

/// Analytic FLOPs of one predictor pass, matching the counted forward.
pub fn vip_flops(num_visual: usize, attn_heads: usize, channels: usize, cfg: &VipConfig) -> u64 {
    let (n, e, f) = (num_visual as u64, cfg.hidden as u64, cfg.cond as u64);
    let per_block = 2 * n * channels as u64 * f + 4 * 2 * n * e * e + 2 * n * n * (e + f) + 2 * n * n * e;
    2 * n * attn_heads as u64 * e + cfg.blocks as u64 * per_block + 2 * n * e
}
