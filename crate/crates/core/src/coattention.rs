//! Stacked self- and cross-attention fusion of the graph and text branches.
//!
//! Each layer runs self-attention per branch, then both cross-attentions
//! read the same post-self-attention tensors. Residual blocks are post-norm:
//! `norm(x + dropout(sublayer(x)))`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Per-head projections stored as `d x d` matrices whose column blocks are
/// the individual heads, plus the output projection.
#[derive(Debug, Clone)]
pub struct MultiHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
}

impl MultiHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must be divisible by heads");
        let mut w = |n: &str| store.add_glorot(format!("{prefix}{n}"), d_model, d_model, rng);
        Self {
            w_q: w("w_q"),
            w_k: w("w_k"),
            w_v: w("w_v"),
            w_o: w("w_o"),
            heads,
        }
    }

    /// `concat_i att(q W_i^Q, kv W_i^K, kv W_i^V) W^O`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        q_in: Var,
        kv_in: Var,
        key_mask: Option<&[bool]>,
        dropout: f64,
    ) -> Result<Var> {
        let (wq, wk, wv, wo) = (
            tape.param(self.w_q),
            tape.param(self.w_k),
            tape.param(self.w_v),
            tape.param(self.w_o),
        );
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;
        let heads = tape.attention(q, k, v, self.heads, key_mask, dropout)?;
        tape.matmul(heads, wo)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}gain"), Tensor::filled(&[d], 1.0)),
            bias: store.add(format!("{prefix}bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Attention sublayer with its residual norm.
#[derive(Debug, Clone)]
pub struct Block {
    pub attn: MultiHead,
    pub norm: Norm,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: MultiHead::new(store, &format!("{prefix}attn."), d, heads, rng),
            norm: Norm::new(store, &format!("{prefix}norm."), d),
        }
    }

    /// `norm(x + dropout(multi_head(x, kv, kv)))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        kv: Var,
        key_mask: Option<&[bool]>,
        dropout: f64,
    ) -> Result<Var> {
        let a = self.attn.forward(tape, x, kv, key_mask, dropout)?;
        let a = tape.dropout(a, dropout);
        let r = tape.add(x, a)?;
        self.norm.forward(tape, r)
    }
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub graph_self: Block,
    pub text_self: Block,
    pub graph_cross: Block,
    pub text_cross: Block,
}

impl FusionLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            graph_self: Block::new(store, &format!("{prefix}graph_self."), d, heads, rng),
            text_self: Block::new(store, &format!("{prefix}text_self."), d, heads, rng),
            graph_cross: Block::new(store, &format!("{prefix}graph_cross."), d, heads, rng),
            text_cross: Block::new(store, &format!("{prefix}text_cross."), d, heads, rng),
        }
    }

    /// One fusion layer. `node_mask` marks real (unpadded) graph rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        h_graph: Var,
        h_text: Var,
        node_mask: Option<&[bool]>,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let g1 = self.graph_self.forward(tape, h_graph, h_graph, node_mask, dropout)?;
        let t1 = self.text_self.forward(tape, h_text, h_text, None, dropout)?;
        let g2 = self.graph_cross.forward(tape, g1, t1, None, dropout)?;
        let t2 = self.text_cross.forward(tape, t1, g1, node_mask, dropout)?;
        Ok((g2, t2))
    }
}

/// Input projections, a learned embedding per text row (layer role), and
/// `L` fusion layers.
#[derive(Debug, Clone)]
pub struct FusionStack {
    pub w_graph: ParamId,
    pub w_text: ParamId,
    pub role_embedding: ParamId,
    pub layers: Vec<FusionLayer>,
    pub d_model: usize,
}

impl FusionStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_node: usize,
        d_text: usize,
        d_model: usize,
        heads: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let w_graph = store.add_glorot(format!("{prefix}w_graph"), d_node, d_model, rng);
        let w_text = store.add_glorot(format!("{prefix}w_text"), d_text, d_model, rng);
        let role_embedding =
            store.add_normal(format!("{prefix}role_embedding"), &[4, d_model], 0.1, rng);
        let layers = (0..num_layers)
            .map(|l| FusionLayer::new(store, &format!("{prefix}layer{l}."), d_model, heads, rng))
            .collect();
        Self {
            w_graph,
            w_text,
            role_embedding,
            layers,
            d_model,
        }
    }

    /// Project both branches into the shared width.
    pub fn project(&self, tape: &mut Tape, graph_raw: Var, text_raw: Var) -> Result<(Var, Var)> {
        let (wg, wt, role) = (
            tape.param(self.w_graph),
            tape.param(self.w_text),
            tape.param(self.role_embedding),
        );
        let g = tape.matmul(graph_raw, wg)?;
        let t = tape.matmul(text_raw, wt)?;
        if tape.shape(t)[0] != 4 {
            return Err(Error::Dimension {
                op: "fusion_stack",
                lhs: tape.shape(t).to_vec(),
                rhs: vec![4, self.d_model],
            });
        }
        let t = tape.add(t, role)?;
        Ok((g, t))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        graph_raw: Var,
        text_raw: Var,
        node_mask: Option<&[bool]>,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let (mut g, mut t) = self.project(tape, graph_raw, text_raw)?;
        for layer in &self.layers {
            (g, t) = layer.forward(tape, g, t, node_mask, dropout)?;
        }
        Ok((g, t))
    }
}
