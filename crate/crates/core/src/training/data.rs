//! Synthetic grounded QA: rectangles of distinct colors and kinds on a dark
//! noise background, one question about one of them, and the target's box.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::error::{bail, Result};
use crate::numerics::Rng;
use crate::vocab::{TokenId, BOS, COLOR, EOS, FIRST_COLOR, FIRST_SHAPE, IS, NUM_COLORS, NUM_SHAPES, ONE, QUESTION_MARK, SHAPE, THE, WHAT};

/// Inclusive patch-grid box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl PatchBox {
    /// Whether the center of patch `(r, c)` lies inside the box.
    pub fn contains(&self, r: usize, c: usize) -> bool {
        // Centers sit at half-integers, so inclusive integer bounds decide it.
        (self.r0..=self.r1).contains(&r) && (self.c0..=self.c1).contains(&c)
    }

    pub fn area(&self) -> usize {
        (self.r1 - self.r0 + 1) * (self.c1 - self.c0 + 1)
    }

    fn overlaps(&self, o: &PatchBox) -> bool {
        self.r0 <= o.r1 && o.r0 <= self.r1 && self.c0 <= o.c1 && o.c0 <= self.c1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedSample {
    pub image: Image,
    pub question_ids: Vec<TokenId>,
    pub answer_ids: Vec<TokenId>,
    pub boxes: Vec<PatchBox>,
    /// `1.0` for foreground patches, `0.0` elsewhere, in row-major grid order.
    pub mask: Vec<f64>,
}

impl GroundedSample {
    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.5).count()
    }
}

/// Display colors, indexed like the color tokens.
pub const PALETTE: [[u8; 3]; NUM_COLORS] = [
    [220, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [230, 220, 40],
    [40, 220, 220],
    [220, 50, 210],
    [240, 240, 240],
    [245, 140, 30],
];

const BACKGROUND_MAX: usize = 48;
const SHAPE_JITTER: i32 = 16;

/// `(height, width)` for shape kind `0` square, `1` wide, `2` tall, grown until
/// the shape covers at least 2% of the grid.
fn shape_dims(kind: usize, grid_h: usize, grid_w: usize, rng: &mut Rng) -> (usize, usize) {
    let m = grid_h.min(grid_w);
    let side = rng.range_inclusive(m.div_ceil(4).max(1), (3 * m / 8).max(1).max(m.div_ceil(4)));
    let thin = rng.range_inclusive(m.div_ceil(8).max(1), (m / 4).max(1).max(m.div_ceil(8)));
    let long = (2 * thin + rng.below(2)).min(m).max(thin + 1);
    let (mut h, mut w) = match kind {
        0 => (side, side),
        1 => (thin, long),
        _ => (long, thin),
    };
    while 50 * h * w < grid_h * grid_w {
        match kind {
            0 if h < m => (h, w) = (h + 1, w + 1),
            1 if w < grid_w => w += 1,
            2 if h < grid_h => h += 1,
            _ => break,
        }
    }
    (h, w)
}

fn place(h: usize, w: usize, grid_h: usize, grid_w: usize, taken: &[PatchBox], rng: &mut Rng) -> Option<PatchBox> {
    if h > grid_h || w > grid_w {
        return None;
    }
    for _ in 0..32 {
        let r0 = rng.below(grid_h - h + 1);
        let c0 = rng.below(grid_w - w + 1);
        let b = PatchBox {
            r0,
            c0,
            r1: r0 + h - 1,
            c1: c0 + w - 1,
        };
        if taken.iter().all(|t| !t.overlaps(&b)) {
            return Some(b);
        }
    }
    None
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.below(i + 1));
    }
    v
}

/// Draws one sample; the result depends only on the generator state.
pub fn generate_sample(rng: &mut Rng, grid_h: usize, grid_w: usize) -> Result<GroundedSample> {
    if grid_h < 2 || grid_w < 2 {
        bail!(Config, "grid {}x{} is smaller than 2x2", grid_h, grid_w);
    }
    let mut pixels = vec![0u8; grid_h * grid_w * 3];
    for p in pixels.iter_mut() {
        *p = rng.below(BACKGROUND_MAX) as u8;
    }
    let mut image = Image::new(grid_h, grid_w, pixels)?;

    let wanted = rng.range_inclusive(1, 3);
    let kinds = shuffled(NUM_SHAPES, rng);
    let colors = shuffled(NUM_COLORS, rng);
    let mut placed: Vec<(usize, usize, PatchBox)> = Vec::new();
    for s in 0..wanted {
        let (h, w) = shape_dims(kinds[s], grid_h, grid_w, rng);
        let taken: Vec<PatchBox> = placed.iter().map(|p| p.2).collect();
        if let Some(b) = place(h, w, grid_h, grid_w, &taken, rng) {
            placed.push((kinds[s], colors[s], b));
        }
    }
    if placed.is_empty() {
        bail!(State, "no shape fits a {}x{} grid", grid_h, grid_w);
    }
    for &(_, color, b) in &placed {
        let base = PALETTE[color];
        for r in b.r0..=b.r1 {
            for c in b.c0..=b.c1 {
                let mut rgb = [0u8; 3];
                for (ch, v) in rgb.iter_mut().enumerate() {
                    let j = rng.below(2 * SHAPE_JITTER as usize + 1) as i32 - SHAPE_JITTER;
                    *v = (base[ch] as i32 + j).clamp(0, 255) as u8;
                }
                image.set_pixel(r, c, rgb);
            }
        }
    }

    let (kind, color, target) = placed[rng.below(placed.len())];
    let shape_tok = FIRST_SHAPE + kind as TokenId;
    let color_tok = FIRST_COLOR + color as TokenId;
    let (question_ids, answer_ids) = if rng.below(2) == 0 {
        (vec![BOS, WHAT, COLOR, IS, THE, shape_tok, QUESTION_MARK], vec![color_tok, EOS])
    } else {
        (vec![BOS, WHAT, SHAPE, IS, THE, color_tok, ONE, QUESTION_MARK], vec![shape_tok, EOS])
    };
    let mut mask = vec![0.0; grid_h * grid_w];
    for r in 0..grid_h {
        for c in 0..grid_w {
            if target.contains(r, c) {
                mask[r * grid_w + c] = 1.0;
            }
        }
    }
    Ok(GroundedSample {
        image,
        question_ids,
        answer_ids,
        boxes: vec![target],
        mask,
    })
}

/// `count` samples from one seeded stream.
pub fn generate_dataset(seed: u64, count: usize, grid_h: usize, grid_w: usize) -> Result<Vec<GroundedSample>> {
    let mut rng = Rng::new(seed);
    (0..count).map(|_| generate_sample(&mut rng, grid_h, grid_w)).collect()
}
