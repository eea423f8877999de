//! Deterministic stand-in for a vision encoder.
//!
//! Each patch is one RGB pixel. Level `m` of the hierarchical features is the
//! pixel grid after `m` rounds of 3x3 box averaging, lifted to `C` channels by
//! a fixed seeded projection and `tanh`. The decoder-side embedding is a seeded
//! linear map of all pooled levels, so it stays linear in pixel intensity.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::VisualStubConfig;
use crate::error::{bail, Result};
use crate::numerics::{math, Rng, Tensor};

/// Row-major RGB image with one pixel per patch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            bail!(Shape, "{}x{} image needs {} bytes, got {}", height, width, height * width * 3, pixels.len());
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self { height, width, pixels }
    }

    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Hierarchical visual features `[M, Nv, C]`; level 0 is the shallowest.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures(pub Tensor);

impl VisualFeatures {
    pub fn levels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[2]
    }

    /// One level as an `[Nv, C]` matrix.
    pub fn level(&self, m: usize) -> Tensor {
        let (n, c) = (self.num_tokens(), self.channels());
        let start = m * n * c;
        Tensor::from_vec(&[n, c], self.0.data()[start..start + n * c].to_vec()).expect("level slice")
    }
}

/// Fixed projections of the stub, derived from the config seed and decoder width.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualStub {
    cfg: VisualStubConfig,
    hidden: usize,
    level_proj: Vec<Tensor>,
    level_bias: Vec<Vec<f64>>,
    embed_proj: Tensor,
}

impl VisualStub {
    pub fn new(cfg: &VisualStubConfig, hidden: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed ^ 0x5649_5355_414c);
        let mut level_proj = Vec::with_capacity(cfg.levels);
        let mut level_bias = Vec::with_capacity(cfg.levels);
        for _ in 0..cfg.levels {
            let w: Vec<f64> = (0..3 * cfg.channels).map(|_| 2.0 * rng.normal()).collect();
            level_proj.push(Tensor::from_vec(&[3, cfg.channels], w)?);
            level_bias.push((0..cfg.channels).map(|_| 0.5 * rng.normal()).collect());
        }
        let fan_in = 3 * cfg.levels;
        let scale = 2.0 / math::sqrt(fan_in as f64);
        let w: Vec<f64> = (0..fan_in * hidden).map(|_| scale * rng.normal()).collect();
        let embed_proj = Tensor::from_vec(&[fan_in, hidden], w)?;
        Ok(Self {
            cfg: cfg.clone(),
            hidden,
            level_proj,
            level_bias,
            embed_proj,
        })
    }

    pub fn config(&self) -> &VisualStubConfig {
        &self.cfg
    }

    /// Returns decoder-side embeddings `[Nv, D]` and the feature pyramid.
    pub fn encode(&self, image: &Image) -> Result<(Tensor, VisualFeatures)> {
        let (h, w) = (self.cfg.grid_h, self.cfg.grid_w);
        if image.height != h || image.width != w {
            bail!(Shape, "image {}x{} does not match grid {}x{}", image.height, image.width, h, w);
        }
        let n = h * w;
        let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(self.cfg.levels);
        let mut cur: Vec<f64> = image.pixels.iter().map(|&p| p as f64 / 255.0 - 0.5).collect();
        for _ in 0..self.cfg.levels {
            pooled.push(cur.clone());
            cur = box_blur(&cur, h, w);
        }

        let c = self.cfg.channels;
        let mut feats = vec![0.0; self.cfg.levels * n * c];
        for (m, level) in pooled.iter().enumerate() {
            let proj = &self.level_proj[m];
            for i in 0..n {
                let px = &level[i * 3..i * 3 + 3];
                let out = &mut feats[(m * n + i) * c..(m * n + i + 1) * c];
                for (j, o) in out.iter_mut().enumerate() {
                    let mut acc = self.level_bias[m][j];
                    for (k, &v) in px.iter().enumerate() {
                        acc += v * proj.get(k, j);
                    }
                    *o = math::tanh(acc);
                }
            }
        }

        let fan_in = 3 * self.cfg.levels;
        let mut stacked = vec![0.0; n * fan_in];
        for i in 0..n {
            for (m, level) in pooled.iter().enumerate() {
                stacked[i * fan_in + m * 3..i * fan_in + m * 3 + 3].copy_from_slice(&level[i * 3..i * 3 + 3]);
            }
        }
        let stacked = Tensor::from_vec(&[n, fan_in], stacked)?;
        let embeds = crate::numerics::matmul(&stacked, &self.embed_proj)?;
        debug_assert_eq!(embeds.shape(), &[n, self.hidden]);
        Ok((embeds, VisualFeatures(Tensor::from_vec(&[self.cfg.levels, n, c], feats)?)))
    }
}

/// Free-function form: builds the stub and encodes one image.
pub fn encode_visual(image: &Image, cfg: &VisualStubConfig, hidden: usize) -> Result<(Tensor, VisualFeatures)> {
    VisualStub::new(cfg, hidden)?.encode(image)
}

/// 3x3 mean over in-bounds neighbours, per RGB channel.
fn box_blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = [0.0; 3];
            let mut count = 0.0;
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let i = (rr * w + cc) * 3;
                    for ch in 0..3 {
                        acc[ch] += src[i + ch];
                    }
                    count += 1.0;
                }
            }
            let i = (r * w + c) * 3;
            for ch in 0..3 {
                out[i + ch] = acc[ch] / count;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(h: usize, w: usize) -> VisualStubConfig {
        VisualStubConfig {
            grid_h: h,
            grid_w: w,
            channels: 6,
            levels: 3,
            seed: 9,
        }
    }

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = Rng::new(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.below(256) as u8).collect()).unwrap()
    }

    #[test]
    fn shapes() {
        let (e, v) = encode_visual(&random_image(1, 4, 4), &cfg(4, 4), 16).unwrap();
        assert_eq!(e.shape(), &[16, 16]);
        assert_eq!(v.0.shape(), &[3, 16, 6]);
    }

    #[test]
    fn deterministic() {
        let img = random_image(2, 4, 4);
        let a = encode_visual(&img, &cfg(4, 4), 8).unwrap();
        let b = encode_visual(&img, &cfg(4, 4), 8).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn levels_differ_on_textured_image() {
        let (_, v) = encode_visual(&random_image(3, 4, 4), &cfg(4, 4), 8).unwrap();
        // Distinct projections per level, so compare pooling effect on a shared projection too.
        assert!(v.level(0).max_abs_diff(&v.level(1)) > 0.0);
        let mut same = cfg(4, 4);
        same.levels = 2;
        let stub = VisualStub::new(&same, 8).unwrap();
        let mut flat = stub.clone();
        flat.level_proj[1] = flat.level_proj[0].clone();
        flat.level_bias[1] = flat.level_bias[0].clone();
        let (_, v) = flat.encode(&random_image(3, 4, 4)).unwrap();
        assert!(v.level(0).max_abs_diff(&v.level(1)) > 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            encode_visual(&random_image(1, 3, 4), &cfg(4, 4), 8),
            Err(crate::Error::Shape(_))
        ));
    }
}
