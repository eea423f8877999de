//! One-shot glimpse pruning pipeline.
//!
//! Prefill runs with the glimpse slot through layer `K`, the glimpse attention
//! feeds the VIP, and the dropped visual rows plus the glimpse row are removed
//! from the layer-`K` hidden state and from the cache of layers `1..=K`.
//! Layers `K+1..=L` then run on the shorter sequence. Survivors keep their
//! original rotary positions, and decoding continues at the position right after
//! the last text token.

mod oracle;

pub use oracle::{dense_forward, reference_oracle, DenseRow, RowKind};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    append_glimpse, argmax, extract_glimpse_attention, Backbone, GlimpseEmbeddings, Image, KvCache, PrefillState,
    TokenSequence,
};
use crate::error::{bail, Result};
use crate::numerics::{FlopCounter, Rng, Tensor};
use crate::vip::{select_tokens, vip_forward, ImportanceMap, SelectionResult, VipConfig, VipParams};
use crate::vocab::{TokenId, EOS};

/// Everything that is trained: glimpse rows and the predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlimpseParams {
    pub glimpse: GlimpseEmbeddings,
    pub vip: VipParams,
}

impl GlimpseParams {
    /// Glimpse row 0 drawn like a token embedding, later rows zero, VIP at its
    /// default init.
    pub fn init(backbone: &Backbone, vip_cfg: &VipConfig) -> Result<Self> {
        let cfg = backbone.config();
        let mut glimpse = GlimpseEmbeddings::zeros(cfg.layers, cfg.hidden);
        let mut rng = Rng::new(vip_cfg.seed ^ 0x676c_696d);
        for v in glimpse.matrix.row_mut(0) {
            *v = rng.normal();
        }
        let vip = VipParams::init(vip_cfg, cfg.heads, backbone.visual.config().channels)?;
        Ok(Self { glimpse, vip })
    }

    /// Named trainable groups: `glimpse` first, then the VIP groups.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![(String::from("glimpse"), &self.glimpse.matrix)];
        out.extend(self.vip.named());
        out
    }

    /// Mutable groups in the order of [`Self::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.glimpse.matrix];
        out.extend(self.vip.tensors_mut());
        out
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStats {
    pub num_visual: usize,
    pub num_visual_kept: usize,
    pub num_text: usize,
    pub retention_rate: f64,
    pub prune_layer: usize,
    /// Decoder-layer matmul FLOPs of the whole prefill.
    pub prefill_flops_counted: u64,
    pub vip_flops_counted: u64,
    pub cache_len_before: usize,
    pub cache_len_after: usize,
}

/// Result of a pruned prefill.
#[derive(Debug, Clone)]
pub struct PrefillOutcome {
    pub cache: KvCache,
    pub last_logits: Vec<f64>,
    pub importance: ImportanceMap,
    pub selection: SelectionResult,
    pub stats: PruneStats,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub answer_ids: Vec<TokenId>,
    /// Logits that produced each answer token.
    pub step_logits: Vec<Vec<f64>>,
    pub stats: PruneStats,
    /// Decoder FLOPs of each decode step.
    pub decode_flops: Vec<u64>,
    pub cache: KvCache,
    pub importance: ImportanceMap,
    pub selection: SelectionResult,
}

/// Removes dropped visual rows and the glimpse row from the hidden state and from
/// cache layers `1..=K`. Returns the retained sequence indices.
pub fn prune_state(
    state: &mut PrefillState,
    cache: &mut KvCache,
    keep: &SelectionResult,
    seq: &TokenSequence,
    prune_layer: usize,
) -> Result<Vec<usize>> {
    let nv = seq.num_visual();
    if keep.num_visual != nv || keep.keep.iter().any(|&i| i >= nv) {
        bail!(Index, "keep set {:?} invalid for {} visual tokens", keep.keep, nv);
    }
    if keep.keep.is_empty() || keep.keep.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Index, "keep indices must be non-empty and strictly increasing");
    }
    let full = seq.total_len();
    if state.hidden.rows() != full {
        bail!(State, "hidden has {} rows, sequence {}", state.hidden.rows(), full);
    }
    for layer in 0..prune_layer {
        if cache.len(layer) != full {
            bail!(State, "cache layer {} holds {} rows, expected {}", layer + 1, cache.len(layer), full);
        }
    }
    let rows: Vec<usize> = keep.keep.iter().copied().chain(nv..nv + seq.num_text()).collect();
    cache.prune_indices(prune_layer, &rows)?;
    state.hidden = state.hidden.gather_rows(&rows)?;
    state.positions = rows.iter().map(|&r| state.positions[r]).collect();
    state.glimpse_row = None;
    Ok(rows)
}

/// Backbone plus trained parameters.
#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub backbone: &'a Backbone,
    pub params: &'a GlimpseParams,
    pub vip_cfg: &'a VipConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(backbone: &'a Backbone, params: &'a GlimpseParams, vip_cfg: &'a VipConfig) -> Self {
        Self {
            backbone,
            params,
            vip_cfg,
        }
    }

    /// Prefill with glimpse, predict importance, prune once at `K`, finish prefill.
    pub fn glimpse_prune_prefill(&self, image: &Image, question: &[TokenId]) -> Result<PrefillOutcome> {
        self.prefill_with(image, question, None)
    }

    /// Same as [`Self::glimpse_prune_prefill`] but with an externally chosen keep set.
    pub fn prefill_with_keep(&self, image: &Image, question: &[TokenId], keep: &SelectionResult) -> Result<PrefillOutcome> {
        self.prefill_with(image, question, Some(keep))
    }

    fn prefill_with(&self, image: &Image, question: &[TokenId], forced: Option<&SelectionResult>) -> Result<PrefillOutcome> {
        let dec = &self.backbone.decoder;
        let k = dec.cfg.prune_layer;
        let layers = dec.cfg.layers;
        let (seq, feats) = self.backbone.sequence(image, question)?;
        let seq = append_glimpse(&seq, &self.params.glimpse)?;
        let glimpse = Some(&self.params.glimpse);

        let layer_flops = FlopCounter::new();
        let vip_flops = FlopCounter::new();
        let mut cache = dec.new_cache();
        let mut state = dec.start(&seq, glimpse)?;
        let probs = dec
            .prefill_layers(&mut state, glimpse, 1, k, &mut cache, &layer_flops)?
            .expect("glimpse row captured");
        let attn = extract_glimpse_attention(&probs, &seq)?;
        let coords: Vec<_> = (0..seq.num_visual()).map(|i| seq.coords(i)).collect();
        let importance = vip_forward(&attn, &feats, &coords, &self.params.vip, self.vip_cfg, &vip_flops)?;
        let selection = match forced {
            Some(s) => s.clone(),
            None => select_tokens(&importance, self.vip_cfg),
        };
        let cache_len_before = cache.len(0);
        prune_state(&mut state, &mut cache, &selection, &seq, k)?;
        if k < layers {
            dec.prefill_layers(&mut state, None, k + 1, layers, &mut cache, &layer_flops)?;
        }
        let last_logits = dec.logits(state.hidden.row(state.hidden.rows() - 1));
        let cache_len_after = cache.uniform_len().expect("all layers pruned to one length");
        let stats = PruneStats {
            num_visual: seq.num_visual(),
            num_visual_kept: selection.keep.len(),
            num_text: seq.num_text(),
            retention_rate: selection.retention_rate(),
            prune_layer: k,
            prefill_flops_counted: layer_flops.get(),
            vip_flops_counted: vip_flops.get(),
            cache_len_before,
            cache_len_after,
        };
        Ok(PrefillOutcome {
            cache,
            last_logits,
            importance,
            selection,
            stats,
        })
    }

    /// Greedy decoding from the pruned cache. Every emitted token is fed back, and
    /// generation stops after `max_new` tokens or once `<eos>` is emitted.
    pub fn generate(&self, image: &Image, question: &[TokenId], max_new: usize) -> Result<Generation> {
        let out = self.glimpse_prune_prefill(image, question)?;
        self.decode_from(out, max_new)
    }

    pub fn decode_from(&self, out: PrefillOutcome, max_new: usize) -> Result<Generation> {
        let PrefillOutcome {
            mut cache,
            last_logits,
            importance,
            selection,
            stats,
        } = out;
        let (answer_ids, step_logits, decode_flops) = greedy_decode(self.backbone, &mut cache, last_logits, max_new)?;
        Ok(Generation {
            answer_ids,
            step_logits,
            stats,
            decode_flops,
            cache,
            importance,
            selection,
        })
    }
}

fn greedy_decode(
    backbone: &Backbone,
    cache: &mut KvCache,
    mut logits: Vec<f64>,
    max_new: usize,
) -> Result<(Vec<TokenId>, Vec<Vec<f64>>, Vec<u64>)> {
    if max_new == 0 {
        bail!(Config, "max_new must be at least 1");
    }
    let mut ids = Vec::new();
    let mut all_logits = Vec::new();
    let mut flops = Vec::new();
    for _ in 0..max_new {
        let tok = argmax(&logits) as TokenId;
        ids.push(tok);
        let counter = FlopCounter::new();
        let next = backbone.decoder.decode_step(cache, tok, &counter)?;
        all_logits.push(core::mem::replace(&mut logits, next));
        flops.push(counter.get());
        if tok == EOS {
            break;
        }
    }
    Ok((ids, all_logits, flops))
}

/// Unpruned run without a glimpse token.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub cache: KvCache,
    pub last_logits: Vec<f64>,
    pub prefill_flops: u64,
}

pub fn baseline_prefill(backbone: &Backbone, image: &Image, question: &[TokenId]) -> Result<BaselineRun> {
    let (seq, _) = backbone.sequence(image, question)?;
    let mut cache = backbone.decoder.new_cache();
    let flops = FlopCounter::new();
    let (_, last_logits) = backbone.decoder.prefill(&seq, None, &mut cache, &flops)?;
    Ok(BaselineRun {
        cache,
        last_logits,
        prefill_flops: flops.get(),
    })
}

/// Greedy baseline generation: `(answer ids, per-step logits, per-step decode FLOPs)`.
pub fn baseline_generate(
    backbone: &Backbone,
    image: &Image,
    question: &[TokenId],
    max_new: usize,
) -> Result<(Vec<TokenId>, Vec<Vec<f64>>, Vec<u64>)> {
    let run = baseline_prefill(backbone, image, question)?;
    let mut cache = run.cache;
    greedy_decode(backbone, &mut cache, run.last_logits, max_new)
}
