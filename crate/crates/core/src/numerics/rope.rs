//! Rotary position embeddings.
//!
//! A head vector of even width `n` is rotated pairwise: dims `(2i, 2i+1)`
//! turn by `pos · theta^(-2i/n)`. The 2D variant splits each head into a
//! row half and a column half and rotates each half on its own coordinate.

use alloc::vec::Vec;

use super::math;
use super::tensor::Tensor;
use crate::error::{bail, Result};

pub const DEFAULT_THETA: f64 = 10_000.0;

/// Rotates one contiguous head slice by position `pos`. `inverse` rotates by `-pos`.
pub fn rotate_head(v: &mut [f64], pos: f64, theta: f64, inverse: bool) {
    let n = v.len();
    debug_assert!(n.is_multiple_of(2));
    if pos == 0.0 {
        return;
    }
    for i in 0..n / 2 {
        let freq = math::powf(theta, -((2 * i) as f64) / n as f64);
        let (s, c) = math::sin_cos(pos * freq);
        let s = if inverse { -s } else { s };
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Rotates a 2D head: first half by `row`, second half by `col`.
pub fn rotate_head_2d(v: &mut [f64], row: f64, col: f64, theta: f64, inverse: bool) {
    let half = v.len() / 2;
    let (r, c) = v.split_at_mut(half);
    rotate_head(r, row, theta, inverse);
    rotate_head(c, col, theta, inverse);
}

fn heads_of(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [s, h, d] => Ok((s, h, d)),
        _ => bail!(Shape, "rope expects [seq, heads, dim], got {:?}", x.shape()),
    }
}

/// 1D rotary embedding of a `[seq, heads, dim]` tensor.
pub fn rope_1d(x: &Tensor, positions: &[usize], theta: f64) -> Result<Tensor> {
    let (s, h, d) = heads_of(x)?;
    if d % 2 != 0 {
        bail!(Config, "rope_1d needs an even head dim, got {}", d);
    }
    if positions.len() != s {
        bail!(Shape, "{} positions for {} rows", positions.len(), s);
    }
    let mut out = x.clone();
    for (t, &p) in positions.iter().enumerate() {
        let row = out.row_mut(t);
        for head in 0..h {
            rotate_head(&mut row[head * d..(head + 1) * d], p as f64, theta, false);
        }
    }
    Ok(out)
}

/// 2D rotary embedding of a `[tokens, heads, dim]` tensor on grid coordinates.
pub fn rope_2d(x: &Tensor, rows: &[usize], cols: &[usize], theta: f64) -> Result<Tensor> {
    let (s, h, d) = heads_of(x)?;
    if d % 4 != 0 {
        bail!(Config, "rope_2d needs head dim divisible by 4, got {}", d);
    }
    if rows.len() != s || cols.len() != s {
        bail!(Shape, "coordinate lists must have {} entries", s);
    }
    let mut out = x.clone();
    for t in 0..s {
        let row = out.row_mut(t);
        for head in 0..h {
            rotate_head_2d(
                &mut row[head * d..(head + 1) * d],
                rows[t] as f64,
                cols[t] as f64,
                theta,
                false,
            );
        }
    }
    Ok(out)
}

/// Grid coordinates `(row, col)` of the first `n` tokens of a row-major grid.
pub fn grid_coords(grid_w: usize, n: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).map(|i| i / grid_w).collect(), (0..n).map(|i| i % grid_w).collect())
}
