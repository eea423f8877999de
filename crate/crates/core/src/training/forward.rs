//! Training forward passes.
//!
//! Training never prunes. The plain path runs the cached decoder with the
//! glimpse slot and teacher-forces the answer after it. The taped path shares
//! the prefix keys and values (they cannot see the glimpse) and records only the
//! glimpse and answer rows plus the predictor, which is all the trainable
//! parameters can reach.

use alloc::string::String;
use alloc::vec::Vec;

use super::data::GroundedSample;
use super::loss::{bce_loss, dice_loss, lang_loss, LossBreakdown, LossWeights, DICE_EPS};
use super::tape::{Rope, Tape, Var};
use crate::backbone::{append_glimpse, extract_glimpse_attention, Backbone, TokenSequence, VisualFeatures};
use crate::error::{bail, Result};
use crate::numerics::{math, FlopCounter, Tensor};
use crate::prune::GlimpseParams;
use crate::vip::{attention_input_scale, level_for_block, vip_forward, ImportanceMap, VipConfig};

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub loss: LossBreakdown,
    pub importance: ImportanceMap,
    /// One row per answer token: the glimpse row, then each teacher-forced token.
    pub answer_logits: Vec<Vec<f64>>,
}

fn check_sample(sample: &GroundedSample, seq: &TokenSequence) -> Result<()> {
    if sample.mask.len() != seq.num_visual() {
        bail!(Shape, "mask has {} entries for {} visual tokens", sample.mask.len(), seq.num_visual());
    }
    if sample.answer_ids.is_empty() {
        bail!(Config, "sample has an empty answer");
    }
    Ok(())
}

fn visual_coords(seq: &TokenSequence) -> Vec<(usize, usize)> {
    (0..seq.num_visual()).map(|i| seq.coords(i)).collect()
}

/// Loss of one sample through the inference code path, without pruning.
pub fn total_loss(
    backbone: &Backbone,
    params: &GlimpseParams,
    vip_cfg: &VipConfig,
    sample: &GroundedSample,
    weights: &LossWeights,
) -> Result<ForwardOutput> {
    let dec = &backbone.decoder;
    let (k, layers) = (dec.cfg.prune_layer, dec.cfg.layers);
    let (seq, feats) = backbone.sequence(&sample.image, &sample.question_ids)?;
    check_sample(sample, &seq)?;
    let seq = append_glimpse(&seq, &params.glimpse)?;
    let glimpse = Some(&params.glimpse);
    let flops = FlopCounter::new();

    let mut cache = dec.new_cache();
    let mut state = dec.start(&seq, glimpse)?;
    let probs = dec.prefill_layers(&mut state, glimpse, 1, k, &mut cache, &flops)?.expect("glimpse row");
    if k < layers {
        dec.prefill_layers(&mut state, glimpse, k + 1, layers, &mut cache, &flops)?;
    }
    let mut answer_logits = Vec::with_capacity(sample.answer_ids.len());
    answer_logits.push(dec.logits(state.hidden.row(state.hidden.rows() - 1)));
    for &t in &sample.answer_ids[..sample.answer_ids.len() - 1] {
        answer_logits.push(dec.decode_step(&mut cache, t, &flops)?);
    }

    let attn = extract_glimpse_attention(&probs, &seq)?;
    let importance = vip_forward(&attn, &feats, &visual_coords(&seq), &params.vip, vip_cfg, &flops)?;
    let loss = LossBreakdown::new(
        lang_loss(&answer_logits, &sample.answer_ids)?,
        dice_loss(&importance, &sample.mask, DICE_EPS)?,
        bce_loss(&importance, &sample.mask)?,
        weights,
    );
    Ok(ForwardOutput {
        loss,
        importance,
        answer_logits,
    })
}

/// Exact gradients of [`total_loss`] for every trainable group, laid out like `params`.
pub fn grad(
    backbone: &Backbone,
    params: &GlimpseParams,
    vip_cfg: &VipConfig,
    sample: &GroundedSample,
    weights: &LossWeights,
) -> Result<(ForwardOutput, GlimpseParams)> {
    let dec = &backbone.decoder;
    let cfg = &dec.cfg;
    let (hd, heads) = (cfg.head_dim(), cfg.heads);
    let k_layer = cfg.prune_layer;
    let (seq, feats) = backbone.sequence(&sample.image, &sample.question_ids)?;
    check_sample(sample, &seq)?;
    if params.glimpse.layers() != cfg.layers || params.glimpse.matrix.row_width() != cfg.hidden {
        bail!(Shape, "glimpse matrix {:?} vs [{}, {}]", params.glimpse.matrix.shape(), cfg.layers, cfg.hidden);
    }
    let nv = seq.num_visual();
    let prefix = seq.total_len();

    // Prefix rows never attend the glimpse, so their cache is a constant.
    let mut cache = dec.new_cache();
    dec.prefill(&seq, None, &mut cache, &FlopCounter::new())?;

    let mut tape = Tape::new();
    let g = tape.param(params.glimpse.matrix.clone());
    let vip_vars: Vec<Var> = params.vip.named().into_iter().map(|(_, t)| tape.param(t.clone())).collect();

    let answer = &sample.answer_ids;
    let n = answer.len();
    let g0 = tape.rows(g, 0, 1);
    let mut x = if n > 1 {
        let mut fed = Vec::with_capacity((n - 1) * cfg.hidden);
        for &t in &answer[..n - 1] {
            fed.extend_from_slice(dec.token_embedding(t)?);
        }
        let fed = tape.constant(Tensor::from_vec(&[n - 1, cfg.hidden], fed)?);
        tape.concat_rows(&[g0, fed])
    } else {
        g0
    };
    let positions: Vec<usize> = (prefix..prefix + n).collect();
    let scale = 1.0 / math::sqrt(hd as f64);
    let mut glimpse_rows = Vec::new();

    for (l, w) in dec.layers.iter().enumerate() {
        if l >= 1 {
            let gl = tape.rows(g, l, 1);
            x = tape.add_at_row(x, 0, gl);
        }
        let h = tape.rms_norm_const(x, &w.attn_norm, cfg.norm_eps);
        let rope = Rope::Linear {
            positions: positions.clone(),
            head_dim: hd,
            theta: cfg.rope_theta,
        };
        let q = tape.matmul_const(h, &w.wq);
        let q = tape.rotate(q, rope.clone());
        let kk = tape.matmul_const(h, &w.wk);
        let kk = tape.rotate(kk, rope);
        let v = tape.matmul_const(h, &w.wv);
        let layer_cache = cache.layer(l);
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.cols(q, head * hd, hd);
            let k_new = tape.cols(kk, head * hd, hd);
            let v_new = tape.cols(v, head * hd, hd);
            let k_old = tape.constant(layer_cache.head_keys(head, hd));
            let v_old = tape.constant(layer_cache.head_values(head, hd));
            let k_all = tape.concat_rows(&[k_old, k_new]);
            let v_all = tape.concat_rows(&[v_old, v_new]);
            let kt = tape.transpose(k_all);
            let s = tape.matmul(qh, kt);
            let s = tape.scale(s, scale);
            let p = tape.softmax(s, Some(prefix));
            if l + 1 == k_layer {
                let row = tape.rows(p, 0, 1);
                glimpse_rows.push(tape.cols(row, 0, nv));
            }
            outs.push(tape.matmul(p, v_all));
        }
        let attn = tape.concat_cols(&outs);
        let o = tape.matmul_const(attn, &w.wo);
        x = tape.add(x, o);
        let h2 = tape.rms_norm_const(x, &w.mlp_norm, cfg.norm_eps);
        let gate = tape.matmul_const(h2, &w.w_gate);
        let gate = tape.silu(gate);
        let up = tape.matmul_const(h2, &w.w_up);
        let act = tape.mul(gate, up);
        let m = tape.matmul_const(act, &w.w_down);
        x = tape.add(x, m);
    }
    let hf = tape.rms_norm_const(x, &dec.final_norm, cfg.norm_eps);
    let logits = tape.matmul_const(hf, &dec.lm_head);
    let targets: Vec<usize> = answer.iter().map(|&t| t as usize).collect();
    let lang = tape.cross_entropy(logits, &targets);

    let a_t = tape.concat_rows(&glimpse_rows);
    let a = tape.transpose(a_t);
    let coords = visual_coords(&seq);
    let z = vip_on_tape(&mut tape, a, &feats, &coords, &vip_vars, vip_cfg)?;
    let dice = tape.dice_logits(z, &sample.mask, DICE_EPS);
    let bce = tape.bce_logits(z, &sample.mask);
    let total = tape.weighted_sum(&[(lang, weights.w_lang), (dice, weights.w_dice), (bce, weights.w_bce)]);

    let grads = tape.backward(total);
    let mut out = params.zeros_like();
    let vars: Vec<Var> = core::iter::once(g).chain(vip_vars).collect();
    for (slot, var) in out.tensors_mut().into_iter().zip(vars) {
        if let Some(gv) = &grads[var.index()] {
            slot.data_mut().copy_from_slice(gv.data());
        }
    }

    let logit_t = tape.value(logits);
    let answer_logits = (0..n).map(|i| logit_t.row(i).to_vec()).collect();
    let importance = ImportanceMap::from_logits(tape.value(z).data().to_vec());
    let loss = LossBreakdown::new(
        tape.value(lang).data()[0],
        tape.value(dice).data()[0],
        tape.value(bce).data()[0],
        weights,
    );
    Ok((
        ForwardOutput {
            loss,
            importance,
            answer_logits,
        },
        out,
    ))
}

/// The predictor recorded on a tape; `vars` follow [`crate::vip::VipParams::named`].
/// Returns `[Nv, 1]` logits.
fn vip_on_tape(
    tape: &mut Tape<'_>,
    attn: Var,
    feats: &VisualFeatures,
    coords: &[(usize, usize)],
    vars: &[Var],
    cfg: &VipConfig,
) -> Result<Var> {
    let nv = coords.len();
    if feats.levels() != cfg.blocks || vars.len() != 5 + 7 * cfg.blocks {
        bail!(Config, "VIP has {} blocks but {} feature levels", cfg.blocks, feats.levels());
    }
    let (heads, eh, fh) = (cfg.heads, cfg.head_hidden(), cfg.head_cond());
    let scale = 1.0 / math::sqrt((eh + fh) as f64);

    let a = tape.scale(attn, attention_input_scale(nv));
    let x0 = tape.matmul(a, vars[0]);
    let mut x = tape.add_row(x0, vars[1]);
    for b in 0..cfg.blocks {
        let p = &vars[2 + 7 * b..9 + 7 * b];
        let level = tape.constant(feats.level(level_for_block(b, cfg.blocks)));
        let cond = tape.matmul(level, p[0]);
        let cond = tape.add_row(cond, p[1]);
        let h = tape.rms_norm(x, p[2], cfg.norm_eps);
        let rope = Rope::Grid {
            coords: coords.to_vec(),
            head_dim: eh,
            theta: cfg.rope_theta,
        };
        let q = tape.matmul(h, p[3]);
        let q = tape.rotate(q, rope.clone());
        let k = tape.matmul(h, p[4]);
        let k = tape.rotate(k, rope);
        let v = tape.matmul(h, p[5]);
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qe = tape.cols(q, head * eh, eh);
            let qc = tape.cols(cond, head * fh, fh);
            let qh = tape.concat_cols(&[qe, qc]);
            let ke = tape.cols(k, head * eh, eh);
            let kh = tape.concat_cols(&[ke, qc]);
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt);
            let s = tape.scale(s, scale);
            let pr = tape.softmax(s, None);
            let vh = tape.cols(v, head * eh, eh);
            outs.push(tape.matmul(pr, vh));
        }
        let mixed = tape.concat_cols(&outs);
        let o = tape.matmul(mixed, p[6]);
        x = tape.add(x, o);
    }
    let base = 2 + 7 * cfg.blocks;
    let h = tape.rms_norm(x, vars[base], cfg.norm_eps);
    let z = tape.matmul(h, vars[base + 1]);
    Ok(tape.add_row(z, vars[base + 2]))
}

/// Per-group relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖, 1e-8)` between [`grad`]
/// and central differences of [`total_loss`] with step `h`.
pub fn finite_difference_check(
    backbone: &Backbone,
    params: &GlimpseParams,
    vip_cfg: &VipConfig,
    sample: &GroundedSample,
    weights: &LossWeights,
    h: f64,
) -> Result<Vec<(String, f64)>> {
    let (_, analytic) = grad(backbone, params, vip_cfg, sample, weights)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut probe = params.clone();
    let mut report = Vec::with_capacity(names.len());
    for (gi, name) in names.into_iter().enumerate() {
        let len = analytic.named()[gi].1.len();
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut f2 = 0.0;
        for j in 0..len {
            let orig = probe.tensors_mut()[gi].data()[j];
            probe.tensors_mut()[gi].data_mut()[j] = orig + h;
            let up = total_loss(backbone, &probe, vip_cfg, sample, weights)?.loss.total;
            probe.tensors_mut()[gi].data_mut()[j] = orig - h;
            let down = total_loss(backbone, &probe, vip_cfg, sample, weights)?.loss.total;
            probe.tensors_mut()[gi].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic.named()[gi].1.data()[j];
            diff2 += (an - fd) * (an - fd);
            a2 += an * an;
            f2 += fd * fd;
        }
        let denom = math::sqrt(a2).max(math::sqrt(f2)).max(1e-8);
        report.push((name, math::sqrt(diff2) / denom));
    }
    Ok(report)
}
