//! Fixtures shared by unit tests.

use alloc::vec::Vec;

use crate::backbone::{Backbone, DecoderConfig, GlimpseEmbeddings, Image, VisualStubConfig};
use crate::numerics::Rng;
use crate::prune::GlimpseParams;
use crate::vip::{VipConfig, VipParams};
use crate::vocab::{TokenId, BOS, MIN_VOCAB};

pub fn backbone(layers: usize, hidden: usize, heads: usize, grid: (usize, usize), seed: u64) -> Backbone {
    let dec = DecoderConfig::new(layers, hidden, heads, 2 * hidden, MIN_VOCAB + 3, seed);
    let vis = VisualStubConfig {
        grid_h: grid.0,
        grid_w: grid.1,
        channels: 8,
        levels: 2,
        seed: seed ^ 77,
    };
    Backbone::new(&dec, &vis).unwrap()
}

pub fn image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = Rng::new(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.below(256) as u8).collect()).unwrap()
}

pub fn question(seed: u64, len: usize, vocab: usize) -> Vec<TokenId> {
    let mut rng = Rng::new(seed);
    let mut q = alloc::vec![BOS];
    while q.len() < len {
        q.push(rng.below(vocab) as TokenId);
    }
    q
}

pub fn vip_config(seed: u64) -> VipConfig {
    VipConfig::new(8, 8, 2, 2, seed)
}

/// Random glimpse rows and a VIP with a random (non-zero) head.
pub fn params(bb: &Backbone, cfg: &VipConfig, seed: u64) -> GlimpseParams {
    let mut rng = Rng::new(seed);
    let d = bb.config();
    let glimpse = GlimpseEmbeddings::random(d.layers, d.hidden, 1.0, &mut rng);
    let mut vip = VipParams::init(cfg, d.heads, bb.visual.config().channels).unwrap();
    for w in vip.head_w.data_mut() {
        *w = rng.uniform(-2.0, 2.0);
    }
    GlimpseParams { glimpse, vip }
}
