use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{Rng, Tensor};
use crate::vocab::TokenId;

/// Prompt layout `[visual | text | glimpse?]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    /// `[Nv, D]` visual embeddings in row-major grid order.
    pub visual_embeds: Tensor,
    pub grid_w: usize,
    pub text_ids: Vec<TokenId>,
    pub glimpse_present: bool,
}

impl TokenSequence {
    pub fn new(visual_embeds: Tensor, grid_w: usize, text_ids: Vec<TokenId>) -> Self {
        Self {
            visual_embeds,
            grid_w,
            text_ids,
            glimpse_present: false,
        }
    }

    pub fn num_visual(&self) -> usize {
        self.visual_embeds.rows()
    }

    pub fn num_text(&self) -> usize {
        self.text_ids.len()
    }

    pub fn total_len(&self) -> usize {
        self.num_visual() + self.num_text() + usize::from(self.glimpse_present)
    }

    pub fn glimpse_position(&self) -> Option<usize> {
        self.glimpse_present.then(|| self.num_visual() + self.num_text())
    }

    /// Grid `(row, col)` of visual token `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.grid_w, i % self.grid_w)
    }
}

/// `[L, D]` learnable glimpse rows. Row 0 is the appended input embedding;
/// row `l >= 1` is added to the glimpse hidden state entering layer `l` (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlimpseEmbeddings {
    pub matrix: Tensor,
}

impl GlimpseEmbeddings {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        Self {
            matrix: Tensor::zeros(&[layers, hidden]),
        }
    }

    /// Small random init so the glimpse query starts non-degenerate.
    pub fn random(layers: usize, hidden: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..layers * hidden).map(|_| scale * rng.normal()).collect();
        Self {
            matrix: Tensor::from_vec(&[layers, hidden], data).expect("glimpse shape"),
        }
    }

    pub fn layers(&self) -> usize {
        self.matrix.rows()
    }

    pub fn row(&self, l: usize) -> &[f64] {
        self.matrix.row(l)
    }
}

/// Marks the glimpse slot at the end of the sequence.
pub fn append_glimpse(seq: &TokenSequence, glimpse: &GlimpseEmbeddings) -> Result<TokenSequence> {
    if seq.glimpse_present {
        bail!(State, "glimpse token already appended");
    }
    if glimpse.matrix.row_width() != seq.visual_embeds.row_width() {
        bail!(Shape, "glimpse width {} vs hidden {}", glimpse.matrix.row_width(), seq.visual_embeds.row_width());
    }
    let mut out = seq.clone();
    out.glimpse_present = true;
    Ok(out)
}

/// `[Nv, H]` attention mass from the glimpse query to each visual token.
#[derive(Debug, Clone, PartialEq)]
pub struct GlimpseAttention(pub Tensor);

impl GlimpseAttention {
    pub fn num_visual(&self) -> usize {
        self.0.rows()
    }

    pub fn heads(&self) -> usize {
        self.0.row_width()
    }
}

/// Slices the visual columns of the glimpse row's softmax (`[H, seq]`), without renormalizing.
pub fn extract_glimpse_attention(probs: &Tensor, seq: &TokenSequence) -> Result<GlimpseAttention> {
    if !seq.glimpse_present {
        bail!(State, "no glimpse token in sequence");
    }
    let nv = seq.num_visual();
    if probs.shape().len() != 2 || probs.row_width() < nv {
        bail!(Shape, "attention probs {:?} too narrow for {} visual tokens", probs.shape(), nv);
    }
    let heads = probs.rows();
    let mut a = Tensor::zeros(&[nv, heads]);
    for h in 0..heads {
        for i in 0..nv {
            a.set(i, h, probs.get(h, i));
        }
    }
    Ok(GlimpseAttention(a))
}
