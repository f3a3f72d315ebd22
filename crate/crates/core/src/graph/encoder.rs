use rand::Rng;

use super::{elements, CrystalGraph};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
}

/// Atom embedding lookup followed by residual gated convolutions.
///
/// Row 0 of the embedding table is never a real element and doubles as the
/// padding row for batched execution.
#[derive(Debug, Clone)]
pub struct GraphEncoder {
    pub embedding: ParamId,
    pub layers: Vec<ConvLayer>,
    pub d_node: usize,
    pub d_edge: usize,
}

impl GraphEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_node: usize,
        d_edge: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add_normal(
            format!("{prefix}atom_embedding"),
            &[elements::MAX_Z + 1, d_node],
            0.5,
            rng,
        );
        let width = 2 * d_node + d_edge;
        let layers = (0..num_layers)
            .map(|l| ConvLayer {
                w_f: store.add_glorot(format!("{prefix}conv{l}.w_f"), width, d_node, rng),
                b_f: store.add(format!("{prefix}conv{l}.b_f"), Tensor::zeros(&[d_node])),
                w_s: store.add_glorot(format!("{prefix}conv{l}.w_s"), width, d_node, rng),
                b_s: store.add(format!("{prefix}conv{l}.b_s"), Tensor::filled(&[d_node], -3.0)),
            })
            .collect();
        Self {
            embedding,
            layers,
            d_node,
            d_edge,
        }
    }

    /// Per-atom features `rows x d_node`; rows beyond the graph's atoms are
    /// padding (embedding row 0, no edges).
    pub fn forward(&self, tape: &mut Tape, g: &CrystalGraph, rows: usize) -> Result<Var> {
        if g.d_edge != self.d_edge {
            return Err(Error::Dimension {
                op: "encode_graph",
                lhs: vec![g.d_edge],
                rhs: vec![self.d_edge],
            });
        }
        if rows < g.num_atoms() {
            return Err(Error::contract("padded row count below atom count"));
        }
        let mut idx: Vec<usize> = g.atomic_numbers.iter().map(|&z| z as usize).collect();
        idx.resize(rows, 0);
        let table = tape.param(self.embedding);
        let mut h = tape.gather_rows(table, &idx)?;
        if self.layers.is_empty() {
            return Ok(h);
        }
        let e = if g.num_edges() == 0 {
            tape.constant(&[1, self.d_edge], vec![0.0; self.d_edge])
        } else {
            tape.constant(&[g.num_edges(), self.d_edge], g.edge_features.clone())
        };
        for layer in &self.layers {
            let (w_f, b_f) = (tape.param(layer.w_f), tape.param(layer.b_f));
            let (w_s, b_s) = (tape.param(layer.w_s), tape.param(layer.b_s));
            h = tape.cg_conv(h, e, &g.src, &g.dst, w_f, b_f, w_s, b_s)?;
        }
        Ok(h)
    }
}
