//! Encoders, fusion, pooling and the probabilistic head, plus the two
//! ablation baselines and the training losses.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coattention::FusionStack;
use crate::data::{BatchItem, DeviceBatch};
use crate::error::{Error, Result};
use crate::graph::{GraphConfig, GraphEncoder};
use crate::par::ExecPolicy;
use crate::tensor::rng::mix;
use crate::tensor::{ParamGrads, ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::TextEncoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Graph and text branches fused by stacked co-attention.
    CoAttention,
    /// Pooled graph vector concatenated with pooled text vector, no fusion.
    ConcatMlp,
    /// Pooled text embeddings only.
    TextMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    GaussianNll,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub head: HeadKind,
    pub d_node: usize,
    pub d_text: usize,
    pub d_model: usize,
    pub heads: usize,
    pub fusion_layers: usize,
    pub conv_layers: usize,
    pub mlp_dims: Vec<usize>,
    pub dropout: f64,
    pub sigma2_min: f64,
    pub max_tokens: usize,
    pub text_attention: bool,
    pub freeze_graph_encoder: bool,
    pub freeze_text_encoder: bool,
    pub graph: GraphConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CoAttention,
            head: HeadKind::GaussianNll,
            d_node: 64,
            d_text: 64,
            d_model: 64,
            heads: 4,
            fusion_layers: 3,
            conv_layers: 3,
            mlp_dims: vec![128, 64, 2],
            dropout: 0.2,
            sigma2_min: 1e-6,
            max_tokens: 32,
            text_attention: true,
            freeze_graph_encoder: false,
            freeze_text_encoder: false,
            graph: GraphConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let want = match self.head {
            HeadKind::GaussianNll => 2,
            HeadKind::Mse => 1,
        };
        if self.mlp_dims.last() != Some(&want) {
            return Err(Error::config(
                "model.mlp_dims",
                format!("must end in {want} for the {:?} head", self.head),
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 || self.d_text % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                "d_model and d_text must be divisible by heads",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if !(self.sigma2_min > 0.0) {
            return Err(Error::config("model.sigma2_min", "must be positive"));
        }
        if self.variant == Variant::CoAttention && self.fusion_layers == 0 {
            return Err(Error::config("model.fusion_layers", "co-attention needs at least 1 layer"));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("model.max_tokens", "must be positive"));
        }
        Ok(())
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma2_min.sqrt()
    }
}

/// Predicted normal distribution for one device (PCE percent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mu: f64,
    pub sigma: f64,
}

/// Affine map from head outputs to target units, fitted on training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub shift: f64,
    pub scale: f64,
}

impl Default for TargetScale {
    fn default() -> Self {
        Self {
            shift: 0.0,
            scale: 1.0,
        }
    }
}

impl TargetScale {
    pub fn fit(targets: &[f64]) -> Self {
        let n = targets.len().max(1) as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        Self {
            shift: mean,
            scale: if var > 0.0 { var.sqrt() } else { 1.0 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub target: TargetScale,
    pub graph_encoder: Option<GraphEncoder>,
    pub text_encoder: TextEncoder,
    pub fusion: Option<FusionStack>,
    pub mlp: Vec<(ParamId, ParamId)>,
}

impl Model {
    /// Build the model and its freshly initialized parameters.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let uses_graph = c.variant != Variant::TextMlp;
        let graph_encoder = uses_graph.then(|| {
            GraphEncoder::new(
                &mut store,
                "graph.",
                c.d_node,
                c.graph.num_centers,
                c.conv_layers,
                &mut rng,
            )
        });
        let text_encoder = TextEncoder::new(
            &mut store,
            "text.",
            vocab_size,
            c.d_text,
            c.heads,
            c.max_tokens,
            c.text_attention,
            &mut rng,
        );
        let (fusion, mut width) = match c.variant {
            Variant::TextMlp => (None, c.d_text),
            Variant::ConcatMlp | Variant::CoAttention => {
                let layers = if c.variant == Variant::ConcatMlp {
                    0
                } else {
                    c.fusion_layers
                };
                let stack = FusionStack::new(
                    &mut store, "fusion.", c.d_node, c.d_text, c.d_model, c.heads, layers, &mut rng,
                );
                (Some(stack), 2 * c.d_model)
            }
        };
        let mut mlp = Vec::with_capacity(c.mlp_dims.len());
        for (i, &out) in c.mlp_dims.iter().enumerate() {
            let w = store.add_glorot(format!("head.fc{i}.w"), width, out, &mut rng);
            let b = store.add(format!("head.fc{i}.b"), Tensor::zeros(&[out]));
            mlp.push((w, b));
            width = out;
        }
        store.freeze_prefix("graph.", c.freeze_graph_encoder);
        store.freeze_prefix("text.", c.freeze_text_encoder);
        Ok((
            Self {
                config,
                target: TargetScale::default(),
                graph_encoder,
                text_encoder,
                fusion,
                mlp,
            },
            store,
        ))
    }

    /// Pooled device vector fed to the head: `[v_graph ; v_text]`, or the
    /// mean text embedding for the text-only baseline.
    pub fn pooled(&self, tape: &mut Tape, item: &BatchItem, dropout: f64) -> Result<Var> {
        let text = self.text_encoder.forward(tape, &item.tokens, dropout)?;
        let v = match (&self.fusion, &self.graph_encoder) {
            (Some(fusion), Some(genc)) => {
                let graph = item
                    .graph
                    .as_deref()
                    .ok_or_else(|| Error::contract(format!("device {} has no crystal graph", item.device_id)))?;
                let rows = item.node_mask.len();
                let h = genc.forward(tape, graph, rows)?;
                let mask = Some(item.node_mask.as_slice());
                let (g, t) = fusion.forward(tape, h, text, mask, dropout)?;
                let vg = tape.masked_mean(g, 0, &item.node_mask)?;
                let vt = tape.mean_axis(t, 0)?;
                tape.concat_cols(&[vg, vt])?
            }
            _ => tape.mean_axis(text, 0)?,
        };
        let width = tape.value(v).len();
        tape.reshape(v, &[1, width])
    }

    /// `(mu, sigma)` as `1 x 1` tape values for one device.
    pub fn forward_item(&self, tape: &mut Tape, item: &BatchItem) -> Result<(Var, Var)> {
        let dropout = if tape.is_training() {
            self.config.dropout
        } else {
            0.0
        };
        let mut x = self.pooled(tape, item, dropout)?;
        let last = self.mlp.len() - 1;
        for (i, &(w, b)) in self.mlp.iter().enumerate() {
            let (wv, bv) = (tape.param(w), tape.param(b));
            x = tape.matmul(x, wv)?;
            x = tape.add(x, bv)?;
            if i < last {
                x = tape.relu(x);
                x = tape.dropout(x, dropout);
            }
        }
        let TargetScale { shift, scale } = self.target;
        let mu_raw = tape.slice_cols(x, 0, 1)?;
        let mu = tape.scale(mu_raw, scale);
        let mu = tape.add_scalar(mu, shift);
        let floor = self.config.sigma_floor();
        let sigma = match self.config.head {
            HeadKind::GaussianNll => {
                let s_raw = tape.slice_cols(x, 1, 2)?;
                let sp = tape.softplus(s_raw);
                let s = tape.scale(sp, scale);
                tape.add_scalar(s, floor)
            }
            HeadKind::Mse => tape.constant(&[1, 1], vec![floor]),
        };
        Ok((mu, sigma))
    }

    /// Eval-mode predictions, one tape per device.
    pub fn predict(
        &self,
        store: &ParamStore,
        batch: &DeviceBatch,
        policy: ExecPolicy,
    ) -> Result<Vec<Prediction>> {
        policy
            .map(&batch.items, |_, item| {
                let mut tape = Tape::with_params(store);
                let (mu, sigma) = self.forward_item(&mut tape, item)?;
                Ok(Prediction {
                    mu: tape.scalar(mu),
                    sigma: tape.scalar(sigma),
                })
            })
            .into_iter()
            .collect()
    }

    /// Per-device loss term whose sum over the batch is the batch loss.
    fn item_loss(&self, tape: &mut Tape, item: &BatchItem, batch_size: usize) -> Result<Var> {
        let y = item
            .target
            .ok_or_else(|| Error::contract(format!("device {} has no target", item.device_id)))?;
        let (mu, sigma) = self.forward_item(tape, item)?;
        if !(tape.scalar(mu).is_finite() && tape.scalar(sigma).is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite prediction for device {}",
                item.device_id
            )));
        }
        let l = match self.config.head {
            HeadKind::GaussianNll => nll_loss(tape, &[mu], &[sigma], &[y])?,
            HeadKind::Mse => mse_loss(tape, &[mu], &[y])?,
        };
        Ok(tape.scale(l, 1.0 / batch_size as f64))
    }

    /// Batch loss value, evaluated without dropout.
    pub fn eval_loss(&self, store: &ParamStore, batch: &DeviceBatch, policy: ExecPolicy) -> Result<f64> {
        let b = batch.items.len();
        let terms = policy.map(&batch.items, |_, item| {
            let mut tape = Tape::with_params(store);
            let l = self.item_loss(&mut tape, item, b)?;
            Ok::<_, Error>(tape.scalar(l))
        });
        terms.into_iter().try_fold(0.0, |acc, t| Ok(acc + t?))
    }

    /// Train-mode batch loss and per-device parameter gradients, in device
    /// order. Dropout masks depend on `(seed, step, device position)` only.
    pub fn batch_gradients(
        &self,
        store: &ParamStore,
        batch: &DeviceBatch,
        seed: u64,
        step: u64,
        policy: ExecPolicy,
    ) -> Result<(f64, Vec<ParamGrads>)> {
        let b = batch.items.len();
        if b == 0 {
            return Err(Error::contract("empty batch"));
        }
        let results = policy.map(&batch.items, |i, item| {
            let mut tape = Tape::with_params(store);
            tape.set_training(true, mix(&[seed, step, i as u64]));
            let l = self.item_loss(&mut tape, item, b)?;
            let value = tape.scalar(l);
            Ok::<_, Error>((value, tape.backward_params(l)?))
        });
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(b);
        for r in results {
            let (v, g) = r?;
            total += v;
            grads.push(g);
        }
        Ok((total, grads))
    }

    /// Learning-rate multiplier per parameter name.
    pub fn is_text_param(name: &str) -> bool {
        name.starts_with("text.")
    }
}

fn check_lengths(n_pred: usize, n_target: usize) -> Result<()> {
    if n_pred == 0 || n_pred != n_target {
        return Err(Error::contract(format!(
            "{n_pred} predictions for {n_target} targets"
        )));
    }
    Ok(())
}

/// `(1 / 2B) * sum_i (log sigma_i^2 + (y_i - mu_i)^2 / sigma_i^2)`.
pub fn nll_loss(tape: &mut Tape, mus: &[Var], sigmas: &[Var], targets: &[f64]) -> Result<Var> {
    check_lengths(mus.len(), targets.len())?;
    check_lengths(sigmas.len(), targets.len())?;
    let mut total: Option<Var> = None;
    for ((&mu, &sigma), &y) in mus.iter().zip(sigmas).zip(targets) {
        if tape.value(sigma).iter().any(|&s| !(s > 0.0)) {
            return Err(Error::contract("sigma must be positive"));
        }
        let var = tape.square(sigma);
        let log_var = tape.log(var)?;
        let resid = tape.add_scalar(mu, -y);
        let sq = tape.square(resid);
        let ratio = tape.div(sq, var)?;
        let term = tape.add(log_var, ratio)?;
        let term = tape.sum(term);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = total.expect("at least one term");
    Ok(tape.scale(total, 0.5 / targets.len() as f64))
}

/// Mean squared error of the means.
pub fn mse_loss(tape: &mut Tape, mus: &[Var], targets: &[f64]) -> Result<Var> {
    check_lengths(mus.len(), targets.len())?;
    let mut total: Option<Var> = None;
    for (&mu, &y) in mus.iter().zip(targets) {
        let resid = tape.add_scalar(mu, -y);
        let sq = tape.square(resid);
        let sq = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, sq)?,
            None => sq,
        });
    }
    let total = total.expect("at least one term");
    Ok(tape.scale(total, 1.0 / targets.len() as f64))
}

/// Per-sample Gaussian NLL term `0.5 * (log sigma^2 + (y - mu)^2 / sigma^2)`.
pub fn nll_value(p: &Prediction, y: f64) -> f64 {
    let var = p.sigma * p.sigma;
    0.5 * (var.ln() + (y - p.mu).powi(2) / var)
}

#[cfg(test)]
mod tests;
