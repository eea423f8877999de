//! Cache-free dense reference.
//!
//! Every layer materializes the full `[rows, rows]` score matrix per head and
//! masks it with an explicit visibility rule, so it shares no code path with the
//! incremental cache used by the pipeline.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::{append_glimpse, Decoder, GlimpseEmbeddings, Image, Backbone};
use crate::error::{bail, Result};
use crate::numerics::{math, matmul, rms_norm_rows, softmax_rows, rotate_head, Tensor};
use crate::vip::SelectionResult;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    /// Visual or text prompt row; `dropped` rows vanish after the prune layer.
    Prompt { dropped: bool },
    Glimpse,
    /// Token fed after the prompt (teacher-forced or generated).
    Continuation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseRow {
    pub input: Vec<f64>,
    pub position: usize,
    pub kind: RowKind,
}

fn active(kind: RowKind, layer: usize, prune_after: Option<usize>) -> bool {
    match (prune_after, kind) {
        (Some(k), RowKind::Prompt { dropped: true }) | (Some(k), RowKind::Glimpse) => layer < k,
        _ => true,
    }
}

/// Row `i` attends row `j` iff `j` is active, `j <= i`, and, for continuation rows
/// under pruning, `j` is neither dropped nor the glimpse.
fn visible(rows: &[DenseRow], i: usize, j: usize, layer: usize, prune_after: Option<usize>) -> bool {
    if j > i || !active(rows[j].kind, layer, prune_after) {
        return false;
    }
    match (rows[i].kind, prune_after) {
        (RowKind::Continuation, Some(_)) => !matches!(rows[j].kind, RowKind::Glimpse | RowKind::Prompt { dropped: true }),
        _ => true,
    }
}

/// Final hidden state of every row (rows inactive at the last layer keep their
/// last computed value). `prune_after` is the 1-based prune layer `K`.
pub fn dense_forward(
    dec: &Decoder,
    rows: &[DenseRow],
    glimpse: Option<&GlimpseEmbeddings>,
    prune_after: Option<usize>,
) -> Result<Tensor> {
    let cfg = &dec.cfg;
    let (d, heads, hd) = (cfg.hidden, cfg.heads, cfg.head_dim());
    let n = rows.len();
    let mut x = Tensor::zeros(&[n, d]);
    for (i, r) in rows.iter().enumerate() {
        if r.input.len() != d {
            bail!(Shape, "row {} has width {}", i, r.input.len());
        }
        x.row_mut(i).copy_from_slice(&r.input);
    }
    let glimpse_idx = rows.iter().position(|r| r.kind == RowKind::Glimpse);
    let scale = 1.0 / math::sqrt(hd as f64);

    for (l, w) in dec.layers.iter().enumerate() {
        if let (Some(gi), Some(g)) = (glimpse_idx, glimpse) {
            if l >= 1 && active(RowKind::Glimpse, l, prune_after) {
                for (v, e) in x.row_mut(gi).iter_mut().zip(g.row(l)) {
                    *v += e;
                }
            }
        }
        let h = rms_norm_rows(&x, &w.attn_norm, cfg.norm_eps);
        let mut q = matmul(&h, &w.wq)?;
        let mut k = matmul(&h, &w.wk)?;
        let v = matmul(&h, &w.wv)?;
        for (i, r) in rows.iter().enumerate() {
            for head in 0..heads {
                let s = head * hd..(head + 1) * hd;
                rotate_head(&mut q.row_mut(i)[s.clone()], r.position as f64, cfg.rope_theta, false);
                rotate_head(&mut k.row_mut(i)[s], r.position as f64, cfg.rope_theta, false);
            }
        }
        let mut attn = Tensor::zeros(&[n, d]);
        for head in 0..heads {
            let qh = block(&q, head, hd);
            let kh = block(&k, head, hd);
            let vh = block(&v, head, hd);
            let mut scores = matmul(&qh, &kh.transpose()?)?;
            for i in 0..n {
                for j in 0..n {
                    let s = if visible(rows, i, j, l, prune_after) {
                        scores.get(i, j) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                    scores.set(i, j, s);
                }
            }
            let probs = softmax_rows(&scores)?;
            let out = matmul(&probs, &vh)?;
            for i in 0..n {
                attn.row_mut(i)[head * hd..(head + 1) * hd].copy_from_slice(out.row(i));
            }
        }
        let mut next = x.clone();
        next.add_assign(&matmul(&attn, &w.wo)?)?;
        let h2 = rms_norm_rows(&next, &w.mlp_norm, cfg.norm_eps);
        let gate = matmul(&h2, &w.w_gate)?;
        let up = matmul(&h2, &w.w_up)?;
        let mut act = gate.clone();
        for (a, (g, u)) in act.data_mut().iter_mut().zip(gate.data().iter().zip(up.data())) {
            *a = g / (1.0 + math::exp(-g)) * u;
        }
        next.add_assign(&matmul(&act, &w.w_down)?)?;
        for (i, r) in rows.iter().enumerate() {
            if active(r.kind, l, prune_after) {
                x.row_mut(i).copy_from_slice(next.row(i));
            }
        }
    }
    Ok(x)
}

fn block(x: &Tensor, head: usize, hd: usize) -> Tensor {
    let mut out = Vec::with_capacity(x.rows() * hd);
    for i in 0..x.rows() {
        out.extend_from_slice(&x.row(i)[head * hd..(head + 1) * hd]);
    }
    Tensor::from_vec(&[x.rows(), hd], out).expect("head block")
}

/// Dense pruned forward with an externally supplied keep set.
///
/// Returns logits at the last text row and after each `continuation` token.
pub fn reference_oracle(
    backbone: &Backbone,
    glimpse: &GlimpseEmbeddings,
    image: &Image,
    question: &[TokenId],
    keep: &SelectionResult,
    continuation: &[TokenId],
) -> Result<Vec<Vec<f64>>> {
    let dec = &backbone.decoder;
    let (seq, _) = backbone.sequence(image, question)?;
    let seq = append_glimpse(&seq, glimpse)?;
    let nv = seq.num_visual();
    if keep.num_visual != nv || keep.keep.iter().any(|&i| i >= nv) {
        bail!(Index, "keep set invalid for {} visual tokens", nv);
    }
    let mut dropped = vec![true; nv];
    for &i in &keep.keep {
        dropped[i] = false;
    }
    let mut rows = Vec::new();
    for (i, &dropped) in dropped.iter().enumerate() {
        rows.push(DenseRow {
            input: seq.visual_embeds.row(i).to_vec(),
            position: i,
            kind: RowKind::Prompt { dropped },
        });
    }
    for (j, &t) in question.iter().enumerate() {
        rows.push(DenseRow {
            input: dec.token_embedding(t)?.to_vec(),
            position: nv + j,
            kind: RowKind::Prompt { dropped: false },
        });
    }
    rows.push(DenseRow {
        input: glimpse.row(0).to_vec(),
        position: nv + question.len(),
        kind: RowKind::Glimpse,
    });
    for (j, &t) in continuation.iter().enumerate() {
        rows.push(DenseRow {
            input: dec.token_embedding(t)?.to_vec(),
            position: nv + question.len() + j,
            kind: RowKind::Continuation,
        });
    }
    let hidden = dense_forward(dec, &rows, Some(glimpse), Some(dec.cfg.prune_layer))?;
    let last_text = nv + question.len() - 1;
    let first_cont = nv + question.len() + 1;
    let mut out = vec![dec.logits(hidden.row(last_text))];
    for j in 0..continuation.len() {
        out.push(dec.logits(hidden.row(first_cont + j)));
    }
    Ok(out)
}
