//! Pre-norm causal decoder with rotary attention and a gated SiLU MLP.
//!
//! Every projection goes through [`matmul_counted`], so a [`FlopCounter`]
//! sees exactly `2·S·4D² + 4·S·T·D + 6·S·D·F` per layer for `S` new rows
//! attending over `T` cached rows. The vocabulary head is not counted.

use alloc::vec;
use alloc::vec::Vec;

use super::cache::{KvCache, LayerCache};
use super::config::DecoderConfig;
use super::sequence::{GlimpseEmbeddings, TokenSequence};
use crate::error::{bail, Result};
use crate::numerics::{math, matmul, matmul_counted, rms_norm_into, rms_norm_rows, rotate_head, softmax_in_place, FlopCounter, Rng, Tensor};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Vec<f64>,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Frozen decoder weights, generated from `DecoderConfig::seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub lm_head: Tensor,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    Tensor::from_vec(&[rows, cols], data).expect("weight shape")
}

/// Hidden rows being pushed through the stack, with their rotary positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillState {
    pub hidden: Tensor,
    pub positions: Vec<usize>,
    pub glimpse_row: Option<usize>,
}

impl Decoder {
    pub fn new(cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let d = cfg.hidden;
        let f = cfg.ffn;
        let embed = gaussian(&mut rng, cfg.vocab, d, 1.0);
        let sd = 1.0 / math::sqrt(d as f64);
        let sf = 1.0 / math::sqrt(f as f64);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: gaussian(&mut rng, d, d, sd),
                wk: gaussian(&mut rng, d, d, sd),
                wv: gaussian(&mut rng, d, d, sd),
                wo: gaussian(&mut rng, d, d, sd),
                mlp_norm: vec![1.0; d],
                w_gate: gaussian(&mut rng, d, f, sd),
                w_up: gaussian(&mut rng, d, f, sd),
                w_down: gaussian(&mut rng, f, d, sf),
            })
            .collect();
        let lm_head = gaussian(&mut rng, d, cfg.vocab, sd);
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            layers,
            final_norm: vec![1.0; d],
            lm_head,
        })
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.layers, self.cfg.heads, self.cfg.head_dim())
    }

    pub fn token_embedding(&self, id: TokenId) -> Result<&[f64]> {
        if id as usize >= self.cfg.vocab {
            bail!(Index, "token {} outside vocabulary of {}", id, self.cfg.vocab);
        }
        Ok(self.embed.row(id as usize))
    }

    /// Input rows for `[visual | text | glimpse?]`; the glimpse slot receives glimpse row 0.
    pub fn input_embeddings(&self, seq: &TokenSequence, glimpse: Option<&GlimpseEmbeddings>) -> Result<Tensor> {
        let d = self.cfg.hidden;
        if seq.visual_embeds.row_width() != d {
            bail!(Shape, "visual embeds width {} vs hidden {}", seq.visual_embeds.row_width(), d);
        }
        let mut data = seq.visual_embeds.data().to_vec();
        for &t in &seq.text_ids {
            data.extend_from_slice(self.token_embedding(t)?);
        }
        if seq.glimpse_present {
            let Some(g) = glimpse else {
                bail!(State, "sequence has a glimpse slot but no glimpse embeddings were given");
            };
            if g.layers() != self.cfg.layers || g.matrix.row_width() != d {
                bail!(Shape, "glimpse matrix {:?} vs [{}, {}]", g.matrix.shape(), self.cfg.layers, d);
            }
            data.extend_from_slice(g.row(0));
        }
        Tensor::from_vec(&[seq.total_len(), d], data)
    }

    /// Initial prefill state with positions `0..len`.
    pub fn start(&self, seq: &TokenSequence, glimpse: Option<&GlimpseEmbeddings>) -> Result<PrefillState> {
        let hidden = self.input_embeddings(seq, glimpse)?;
        Ok(PrefillState {
            positions: (0..hidden.rows()).collect(),
            hidden,
            glimpse_row: seq.glimpse_position(),
        })
    }

    /// Runs layers `from..=to` (1-based). With a glimpse row present, returns the
    /// glimpse query's attention probabilities `[H, cache_len]` at layer `to`.
    pub fn prefill_layers(
        &self,
        state: &mut PrefillState,
        glimpse: Option<&GlimpseEmbeddings>,
        from: usize,
        to: usize,
        cache: &mut KvCache,
        flops: &FlopCounter,
    ) -> Result<Option<Tensor>> {
        if from == 0 || from > to || to > self.cfg.layers {
            bail!(Config, "invalid layer range {}..={} for {} layers", from, to, self.cfg.layers);
        }
        if state.hidden.rows() != state.positions.len() {
            bail!(State, "{} hidden rows but {} positions", state.hidden.rows(), state.positions.len());
        }
        let mut captured = None;
        for layer in from - 1..to {
            if let Some(g_row) = state.glimpse_row {
                if layer >= 1 {
                    let Some(g) = glimpse else {
                        bail!(State, "glimpse row present but no glimpse embeddings given");
                    };
                    for (h, &e) in state.hidden.row_mut(g_row).iter_mut().zip(g.row(layer)) {
                        *h += e;
                    }
                }
            }
            let capture = if layer + 1 == to { state.glimpse_row } else { None };
            captured = self.forward_layer(layer, &mut state.hidden, &state.positions, cache.layer_mut(layer), flops, capture)?;
        }
        Ok(captured)
    }

    /// One layer over `x` (new rows), appending their keys/values to `cache`.
    pub(crate) fn forward_layer(
        &self,
        layer: usize,
        x: &mut Tensor,
        positions: &[usize],
        cache: &mut LayerCache,
        flops: &FlopCounter,
        capture_row: Option<usize>,
    ) -> Result<Option<Tensor>> {
        let w = &self.layers[layer];
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim());
        let n = x.rows();
        let eps = self.cfg.norm_eps;

        let h = rms_norm_rows(x, &w.attn_norm, eps);
        let mut q = matmul_counted(&h, &w.wq, flops)?;
        let mut k = matmul_counted(&h, &w.wk, flops)?;
        let v = matmul_counted(&h, &w.wv, flops)?;
        for (i, &p) in positions.iter().enumerate() {
            for head in 0..heads {
                rotate_head(&mut q.row_mut(i)[head * hd..(head + 1) * hd], p as f64, self.cfg.rope_theta, false);
                rotate_head(&mut k.row_mut(i)[head * hd..(head + 1) * hd], p as f64, self.cfg.rope_theta, false);
            }
        }
        if let Some(c) = capture_row {
            if c >= n {
                bail!(Index, "capture row {} of {}", c, n);
            }
        }
        let offset = cache.len();
        cache.append(&k, &v, positions)?;
        let total = cache.len();
        let scale = 1.0 / math::sqrt(hd as f64);

        let mut attn = Tensor::zeros(&[n, self.cfg.hidden]);
        let mut captured = capture_row.map(|_| Tensor::zeros(&[heads, total]));
        for head in 0..heads {
            let qh = column_block(&q, head * hd, hd);
            let kt = cache.head_keys(head, hd).transpose()?;
            let mut probs = matmul_counted(&qh, &kt, flops)?;
            for i in 0..n {
                let row = probs.row_mut(i);
                let visible = offset + i + 1;
                for s in row[..visible].iter_mut() {
                    *s *= scale;
                }
                softmax_in_place(&mut row[..visible]);
                for s in row[visible..].iter_mut() {
                    *s = 0.0;
                }
            }
            if let (Some(c), Some(cap)) = (capture_row, captured.as_mut()) {
                cap.row_mut(head).copy_from_slice(probs.row(c));
            }
            let out = matmul_counted(&probs, &cache.head_values(head, hd), flops)?;
            for i in 0..n {
                attn.row_mut(i)[head * hd..(head + 1) * hd].copy_from_slice(out.row(i));
            }
        }
        let o = matmul_counted(&attn, &w.wo, flops)?;
        x.add_assign(&o)?;

        let h2 = rms_norm_rows(x, &w.mlp_norm, eps);
        let mut gate = matmul_counted(&h2, &w.w_gate, flops)?;
        let up = matmul_counted(&h2, &w.w_up, flops)?;
        for (g, u) in gate.data_mut().iter_mut().zip(up.data()) {
            *g = math::silu(*g) * u;
        }
        let m = matmul_counted(&gate, &w.w_down, flops)?;
        x.add_assign(&m)?;
        Ok(captured)
    }

    /// Final norm and vocabulary projection of one hidden row.
    pub fn logits(&self, hidden_row: &[f64]) -> Vec<f64> {
        let mut normed = vec![0.0; hidden_row.len()];
        rms_norm_into(hidden_row, &self.final_norm, self.cfg.norm_eps, &mut normed);
        let x = Tensor::from_vec(&[1, normed.len()], normed).expect("row");
        matmul(&x, &self.lm_head).expect("head shape").into_data()
    }

    /// Prefills the whole sequence and returns last-row logits.
    pub fn prefill(
        &self,
        seq: &TokenSequence,
        glimpse: Option<&GlimpseEmbeddings>,
        cache: &mut KvCache,
        flops: &FlopCounter,
    ) -> Result<(PrefillState, Vec<f64>)> {
        let mut state = self.start(seq, glimpse)?;
        self.prefill_layers(&mut state, glimpse, 1, self.cfg.layers, cache, flops)?;
        let last = state.hidden.rows() - 1;
        let logits = self.logits(state.hidden.row(last));
        Ok((state, logits))
    }

    /// Feeds one token at the cache's next position; every layer grows by one row.
    pub fn decode_step(&self, cache: &mut KvCache, token: TokenId, flops: &FlopCounter) -> Result<Vec<f64>> {
        if cache.uniform_len().unwrap_or(0) == 0 {
            bail!(State, "decode needs a non-empty, consistent cache (lens {:?})", cache.lens());
        }
        let pos = cache.next_position();
        let mut x = Tensor::from_vec(&[1, self.cfg.hidden], self.token_embedding(token)?.to_vec())?;
        for layer in 0..self.cfg.layers {
            self.forward_layer(layer, &mut x, &[pos], cache.layer_mut(layer), flops, None)?;
        }
        Ok(self.logits(x.row(0)))
    }
}

/// Copies columns `start..start+width` of a matrix.
pub(crate) fn column_block(x: &Tensor, start: usize, width: usize) -> Tensor {
    let n = x.rows();
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        out.extend_from_slice(&x.row(i)[start..start + width]);
    }
    Tensor::from_vec(&[n, width], out).expect("column block")
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
