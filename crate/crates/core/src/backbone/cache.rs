use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Keys and values of one decoder layer, one row of `heads · head_dim` per position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    positions: Vec<usize>,
    width: usize,
}

impl LayerCache {
    fn new(width: usize) -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn key_row(&self, i: usize) -> &[f64] {
        &self.keys[i * self.width..(i + 1) * self.width]
    }

    pub fn value_row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Keys of one head as a `[len, head_dim]` matrix.
    pub fn head_keys(&self, head: usize, head_dim: usize) -> Tensor {
        self.head_slice(&self.keys, head, head_dim)
    }

    pub fn head_values(&self, head: usize, head_dim: usize) -> Tensor {
        self.head_slice(&self.values, head, head_dim)
    }

    fn head_slice(&self, src: &[f64], head: usize, head_dim: usize) -> Tensor {
        let mut out = Vec::with_capacity(self.len() * head_dim);
        for i in 0..self.len() {
            let r = &src[i * self.width..(i + 1) * self.width];
            out.extend_from_slice(&r[head * head_dim..(head + 1) * head_dim]);
        }
        Tensor::from_vec(&[self.len(), head_dim], out).expect("consistent head slice")
    }

    pub(crate) fn append(&mut self, keys: &Tensor, values: &Tensor, positions: &[usize]) -> Result<()> {
        if keys.row_width() != self.width || values.shape() != keys.shape() || keys.rows() != positions.len() {
            bail!(Shape, "cache append of {:?}/{:?} into width {}", keys.shape(), values.shape(), self.width);
        }
        self.keys.extend_from_slice(keys.data());
        self.values.extend_from_slice(values.data());
        self.positions.extend_from_slice(positions);
        Ok(())
    }

    fn retain(&mut self, keep: &[usize]) {
        let w = self.width;
        let mut keys = Vec::with_capacity(keep.len() * w);
        let mut values = Vec::with_capacity(keep.len() * w);
        let mut positions = Vec::with_capacity(keep.len());
        for &i in keep {
            keys.extend_from_slice(&self.keys[i * w..(i + 1) * w]);
            values.extend_from_slice(&self.values[i * w..(i + 1) * w]);
            positions.push(self.positions[i]);
        }
        self.keys = keys;
        self.values = values;
        self.positions = positions;
    }
}

/// Per-layer key/value storage. Rotary embeddings are already applied to stored keys,
/// and each row remembers the position it was computed at.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerCache::new(heads * head_dim)).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Length of a layer (0-based index).
    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn lens(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    /// Common length of all layers, if they agree.
    pub fn uniform_len(&self) -> Option<usize> {
        let first = self.layers.first()?.len();
        self.layers.iter().all(|l| l.len() == first).then_some(first)
    }

    pub fn layer(&self, layer: usize) -> &LayerCache {
        &self.layers[layer]
    }

    pub(crate) fn layer_mut(&mut self, layer: usize) -> &mut LayerCache {
        &mut self.layers[layer]
    }

    /// Number of stored key and value scalars across all layers.
    pub fn element_count(&self) -> usize {
        self.layers.iter().map(|l| l.keys.len() + l.values.len()).sum()
    }

    /// Position the next appended token takes: one past the last stored row.
    pub fn next_position(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.positions.last())
            .map_or(0, |p| p + 1)
    }

    /// Keeps only rows `keep` (strictly increasing) in layers `0..upto`.
    pub fn prune_indices(&mut self, upto: usize, keep: &[usize]) -> Result<()> {
        if upto > self.layers.len() {
            bail!(Index, "prune up to layer {} of {}", upto, self.layers.len());
        }
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Index, "keep indices must be strictly increasing");
        }
        for layer in &mut self.layers[..upto] {
            if let Some(&last) = keep.last() {
                if last >= layer.len() {
                    bail!(Index, "keep index {} beyond cache length {}", last, layer.len());
                }
            }
        }
        for layer in &mut self.layers[..upto] {
            layer.retain(keep);
        }
        Ok(())
    }
}
