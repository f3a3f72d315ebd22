//! Device-layer strings: tokenizer, vocabulary, and a compact trainable
//! encoder that returns one embedding per layer.

mod vocab;

pub use vocab::{split_tokens, Vocab, CLS, PAD, UNK};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coattention::{MultiHead, Norm};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Substrate,
    Etl,
    Htl,
    BackContact,
}

impl Role {
    /// Canonical stacking order.
    pub const ALL: [Role; 4] = [Role::Substrate, Role::Etl, Role::Htl, Role::BackContact];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Substrate => "substrate",
            Role::Etl => "etl",
            Role::Htl => "htl",
            Role::BackContact => "back_contact",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown layer role `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerText {
    pub role: Role,
    pub text: String,
}

impl LayerText {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
        }
    }
}

/// Put the four layers in canonical order, rejecting missing or repeated roles.
pub fn canonical_layers(layers: &[LayerText]) -> Result<[&LayerText; 4]> {
    let mut slots: [Option<&LayerText>; 4] = [None; 4];
    for l in layers {
        let slot = &mut slots[l.role.index()];
        if slot.is_some() {
            return Err(Error::contract(format!("duplicate layer role {}", l.role)));
        }
        *slot = Some(l);
    }
    let mut out = Vec::with_capacity(4);
    for (role, s) in Role::ALL.iter().zip(slots) {
        out.push(s.ok_or_else(|| Error::contract(format!("missing layer role {role}")))?);
    }
    Ok(out.try_into().expect("four roles"))
}

/// Token ids of the four layers in canonical order, each starting with
/// `[CLS]` and padded to the same width.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTokens {
    pub ids: [Vec<u32>; 4],
}

impl LayerTokens {
    pub fn new(vocab: &Vocab, layers: &[LayerText], max_tokens: usize) -> Result<Self> {
        let ordered = canonical_layers(layers)?;
        Ok(Self {
            ids: ordered.map(|l| vocab.encode(&l.text, max_tokens)),
        })
    }

    /// Number of leading non-padding ids of layer `k`.
    pub fn len(&self, k: usize) -> usize {
        self.ids[k].iter().take_while(|&&t| t != PAD).count()
    }
}

/// Token and position embeddings with one post-norm attention block whose
/// `[CLS]` output is the layer embedding.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub block: Option<(MultiHead, Norm)>,
    pub d_text: usize,
    pub max_tokens: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        d_text: usize,
        heads: usize,
        max_tokens: usize,
        attention: bool,
        rng: &mut R,
    ) -> Self {
        let token_embedding =
            store.add_normal(format!("{prefix}token_embedding"), &[vocab_size, d_text], 0.5, rng);
        let position_embedding = store.add_normal(
            format!("{prefix}position_embedding"),
            &[max_tokens, d_text],
            0.1,
            rng,
        );
        let block = attention.then(|| {
            (
                MultiHead::new(store, &format!("{prefix}attn."), d_text, heads, rng),
                Norm::new(store, &format!("{prefix}norm."), d_text),
            )
        });
        Self {
            token_embedding,
            position_embedding,
            block,
            d_text,
            max_tokens,
        }
    }

    /// `4 x d_text` layer embeddings. Only the unpadded prefix of each
    /// layer is read, so padding never reaches the output.
    pub fn forward(&self, tape: &mut Tape, tokens: &LayerTokens, dropout: f64) -> Result<Var> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(4);
        for k in 0..4 {
            let n = tokens.len(k).max(1);
            if tokens.ids[k][0] != CLS {
                return Err(Error::contract("layer tokens must start with [CLS]"));
            }
            spans.push((ids.len(), n));
            ids.extend(tokens.ids[k][..n].iter().map(|&t| t as usize));
            positions.extend(0..n);
        }
        if positions.iter().any(|&p| p >= self.max_tokens) {
            return Err(Error::contract("layer longer than max_tokens"));
        }
        let table = tape.param(self.token_embedding);
        let pos_table = tape.param(self.position_embedding);
        let tok = tape.gather_rows(table, &ids)?;
        let pos = tape.gather_rows(pos_table, &positions)?;
        let x = tape.add(tok, pos)?;
        let cls_rows: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let Some((attn, norm)) = &self.block else {
            return Ok(cls);
        };
        let (wq, wk, wv, wo) = (
            tape.param(attn.w_q),
            tape.param(attn.w_k),
            tape.param(attn.w_v),
            tape.param(attn.w_o),
        );
        let q = tape.matmul(cls, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut heads = Vec::with_capacity(4);
        for (layer, &(start, n)) in spans.iter().enumerate() {
            let ql = tape.slice_rows(q, layer, layer + 1)?;
            let kl = tape.slice_rows(k, start, start + n)?;
            let vl = tape.slice_rows(v, start, start + n)?;
            heads.push(tape.attention(ql, kl, vl, attn.heads, None, dropout)?);
        }
        let cat = tape.concat_rows(&heads)?;
        let out = tape.matmul(cat, wo)?;
        let out = tape.dropout(out, dropout);
        let r = tape.add(cls, out)?;
        norm.forward(tape, r)
    }
}
