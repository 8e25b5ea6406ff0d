use super::ModelConfig;

/// Rotated keys and values one layer has stored, with original positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    width: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
    positions: Vec<usize>,
}

impl LayerCache {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            keys: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn key(&self, j: usize) -> &[f64] {
        &self.keys[j * self.width..(j + 1) * self.width]
    }

    pub fn value(&self, j: usize) -> &[f64] {
        &self.values[j * self.width..(j + 1) * self.width]
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn last_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    pub(crate) fn push(&mut self, key: &[f64], value: &[f64], position: usize) {
        debug_assert_eq!(key.len(), self.width);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(position);
    }
}

/// Per-layer caches for incremental decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            layers: (0..cfg.n_layers)
                .map(|_| LayerCache::new(cfg.d_model))
                .collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    pub(crate) fn layer_mut(&mut self, l: usize) -> &mut LayerCache {
        &mut self.layers[l]
    }

    /// Entry count per layer.
    pub fn entries(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(LayerCache::len).sum()
    }
}
