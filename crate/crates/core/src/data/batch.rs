use std::sync::Arc;

use super::Dataset;
use crate::error::{Error, Result};
use crate::graph::CrystalGraph;
use crate::text::{LayerTokens, Vocab};

/// One device ready for the model. `node_mask` has one entry per padded
/// atom row; entries past the real atom count are `false`.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub device_id: String,
    pub graph: Option<Arc<CrystalGraph>>,
    pub tokens: LayerTokens,
    pub node_mask: Vec<bool>,
    pub target: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DeviceBatch {
    pub items: Vec<BatchItem>,
    pub max_atoms: usize,
}

impl DeviceBatch {
    /// Pad every item's atom rows to the batch maximum.
    pub fn new(mut items: Vec<BatchItem>) -> Self {
        let max_atoms = items
            .iter()
            .map(|it| it.graph.as_ref().map_or(1, |g| g.num_atoms()))
            .max()
            .unwrap_or(0);
        for it in &mut items {
            let n = it.graph.as_ref().map_or(1, |g| g.num_atoms());
            it.node_mask = (0..max_atoms).map(|k| k < n).collect();
        }
        Self { items, max_atoms }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.items.iter().filter_map(|it| it.target).collect()
    }

    /// Build one batch from device ids in the given order.
    pub fn build(ids: &[String], data: &Dataset, vocab: &Vocab, max_tokens: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        Ok(Self::new(data.items(ids, vocab, max_tokens)?))
    }

    /// Consecutive batches of at most `batch_size` prepared items.
    pub fn chunks(items: &[BatchItem], batch_size: usize) -> Vec<DeviceBatch> {
        items
            .chunks(batch_size.max(1))
            .map(|c| Self::new(c.to_vec()))
            .collect()
    }
}
