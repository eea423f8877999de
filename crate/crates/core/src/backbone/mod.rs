//! Toy vision-language decoder: visual stub, causal decoder with KV cache,
//! glimpse-token injection and glimpse-attention extraction.

mod cache;
mod config;
mod decoder;
mod sequence;
mod visual;

#[cfg(test)]
mod tests;

pub use cache::{KvCache, LayerCache};
pub use config::{default_prune_layer, DecoderConfig, VisualStubConfig};
pub(crate) use decoder::column_block;
pub use decoder::{argmax, Decoder, LayerWeights, PrefillState};
pub use sequence::{append_glimpse, extract_glimpse_attention, GlimpseAttention, GlimpseEmbeddings, TokenSequence};
pub use visual::{encode_visual, Image, VisualFeatures, VisualStub};

use alloc::vec::Vec;

use crate::error::Result;
use crate::vocab::TokenId;

/// Frozen backbone: decoder plus visual stub sharing the hidden width.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub decoder: Decoder,
    pub visual: VisualStub,
}

impl Backbone {
    pub fn new(decoder: &DecoderConfig, visual: &VisualStubConfig) -> Result<Self> {
        Ok(Self {
            decoder: Decoder::new(decoder)?,
            visual: VisualStub::new(visual, decoder.hidden)?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.decoder.cfg
    }

    /// Encodes the image and lays out `[visual | text]`.
    pub fn sequence(&self, image: &Image, text: &[TokenId]) -> Result<(TokenSequence, VisualFeatures)> {
        let (embeds, feats) = self.visual.encode(image)?;
        Ok((TokenSequence::new(embeds, self.visual.config().grid_w, Vec::from(text)), feats))
    }
}
