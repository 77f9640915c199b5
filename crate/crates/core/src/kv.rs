//! Per-layer key/value store for the two-stage inference pipeline.
//!
//! Entries are keyed by absolute sequence position. Positions are strictly
//! increasing but not necessarily contiguous: after visual-token pruning the
//! deep layers carry a cache with holes, and rollback after a rejected draft
//! truncates by position rather than by count.

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Keys/values of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerKv {
    keys: Mat,
    values: Mat,
    positions: Vec<usize>,
}

impl LayerKv {
    pub fn new(dim: usize) -> Self {
        Self { keys: Mat::zeros(0, dim), values: Mat::zeros(0, dim), positions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn keys(&self) -> &Mat {
        &self.keys
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn max_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    pub fn append(&mut self, keys: &Mat, values: &Mat, positions: &[usize]) -> Result<()> {
        if keys.rows() != positions.len() || values.rows() != positions.len() {
            return Err(Error::Internal("kv append: row/position count mismatch".into()));
        }
        if let (Some(&first), Some(last)) = (positions.first(), self.max_position()) {
            if first <= last {
                return Err(Error::Internal(format!(
                    "kv append: position {first} not after cached position {last}"
                )));
            }
        }
        self.keys.append_rows(keys);
        self.values.append_rows(values);
        self.positions.extend_from_slice(positions);
        Ok(())
    }

    /// Remove every entry with position > `last_kept`. Exact: no residue of
    /// rolled-back entries survives.
    pub fn truncate_to_position(&mut self, last_kept: usize) {
        let keep = self.positions.partition_point(|&p| p <= last_kept);
        self.positions.truncate(keep);
        self.keys.truncate_rows(keep);
        self.values.truncate_rows(keep);
    }
}

/// KV store covering a contiguous band of model layers.
#[derive(Debug, Clone)]
pub struct KvCache {
    first_layer: usize,
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(first_layer: usize, num_layers: usize, dim: usize) -> Self {
        Self { first_layer, layers: (0..num_layers).map(|_| LayerKv::new(dim)).collect() }
    }

    pub fn first_layer(&self) -> usize {
        self.first_layer
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Access by absolute model layer index.
    pub fn layer(&self, model_layer: usize) -> &LayerKv {
        &self.layers[model_layer - self.first_layer]
    }

    pub fn layer_mut(&mut self, model_layer: usize) -> &mut LayerKv {
        &mut self.layers[model_layer - self.first_layer]
    }

    pub fn covers(&self, model_layer: usize) -> bool {
        (self.first_layer..self.first_layer + self.layers.len()).contains(&model_layer)
    }

    /// Largest cached position of the first layer in the band (all layers of
    /// a band advance together during decoding, but pruned bands disagree
    /// with the full band about interior positions).
    pub fn max_position(&self) -> Option<usize> {
        self.layers.first().and_then(LayerKv::max_position)
    }

    pub fn truncate_to_position(&mut self, last_kept: usize) {
        for layer in &mut self.layers {
            layer.truncate_to_position(last_kept);
        }
    }
}
