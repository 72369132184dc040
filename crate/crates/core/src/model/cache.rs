use crate::error::{Error, Result};

/// Per-layer rotary-encoded keys and values, `[cached_len × kv_heads × head_dim]`.
#[derive(Debug, Clone)]
pub struct KVCache {
    kv_width: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KVCache {
    pub fn new(num_layers: usize, kv_width: usize) -> Self {
        Self {
            kv_width,
            keys: vec![Vec::new(); num_layers],
            values: vec![Vec::new(); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn kv_width(&self) -> usize {
        self.kv_width
    }

    /// Tokens cached at `layer`.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.keys[layer].len() / self.kv_width
    }

    /// Tokens seen so far; errors if layers disagree.
    pub fn cached_len(&self) -> Result<usize> {
        let first = if self.keys.is_empty() {
            0
        } else {
            self.layer_len(0)
        };
        for layer in 0..self.num_layers() {
            let (k, v) = (self.keys[layer].len(), self.values[layer].len());
            if k != v || k != first * self.kv_width {
                return Err(Error::Cache(format!(
                    "layer {layer} holds {} keys / {} values, expected {first}",
                    k / self.kv_width,
                    v / self.kv_width
                )));
            }
        }
        Ok(first)
    }

    pub fn keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    pub(crate) fn append(&mut self, layer: usize, keys: &[f32], values: &[f32]) {
        self.keys[layer].extend_from_slice(keys);
        self.values[layer].extend_from_slice(values);
    }

    pub fn clear(&mut self) {
        self.keys.iter_mut().for_each(Vec::clear);
        self.values.iter_mut().for_each(Vec::clear);
    }
}
