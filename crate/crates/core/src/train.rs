//! Training loop: AdamW, warmup + cosine schedule, per-epoch validation,
//! early stopping on validation loss, best-checkpoint tracking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{BatchItem, Dataset, DatasetSplit, DeviceBatch};
use crate::error::{Error, Result};
use crate::metrics::{mae, r2};
use crate::model::{nll_value, HeadKind, Model, Prediction, TargetScale};
use crate::par::ExecPolicy;
use crate::tensor::optim::{warmup_cosine_lr, AdamW};
use crate::tensor::rng::mix;
use crate::tensor::{ParamGrads, ParamStore};
use crate::text::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub val_r2: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn best(&self) -> Option<&EpochLog> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }
}

pub struct Trained {
    pub model: Model,
    /// Parameters from the best validation epoch.
    pub store: ParamStore,
    pub vocab: Vocab,
    pub log: TrainingLog,
}

pub fn exec_policy(cfg: &RunConfig) -> ExecPolicy {
    if cfg.train.parallel {
        ExecPolicy::auto()
    } else {
        ExecPolicy::Sequential
    }
}

/// Mean validation loss matching the training objective.
pub fn mean_loss(head: HeadKind, preds: &[Prediction], targets: &[f64]) -> f64 {
    let n = targets.len().max(1) as f64;
    match head {
        HeadKind::GaussianNll => preds.iter().zip(targets).map(|(p, &y)| nll_value(p, y)).sum::<f64>() / n,
        HeadKind::Mse => preds.iter().zip(targets).map(|(p, &y)| (y - p.mu).powi(2)).sum::<f64>() / n,
    }
}

/// Eval-mode predictions for prepared items, `batch_size` at a time.
pub fn predict_items(
    model: &Model,
    store: &ParamStore,
    items: &[BatchItem],
    batch_size: usize,
    policy: ExecPolicy,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(items.len());
    for b in DeviceBatch::chunks(items, batch_size) {
        out.extend(model.predict(store, &b, policy)?);
    }
    Ok(out)
}

fn non_finite(log: &[EpochLog], epoch: usize, batch: usize, what: &str) -> Error {
    let mut msg = format!("{what} is not finite at epoch {epoch}, batch {batch}");
    for e in log.iter().rev().take(5).rev() {
        msg.push_str(&format!(
            "\n  epoch {}: train_loss {} val_loss {} lr {}",
            e.epoch, e.train_loss, e.val_loss, e.lr
        ));
    }
    Error::Numeric(msg)
}

pub fn train(cfg: &RunConfig, data: &Dataset, split: &DatasetSplit) -> Result<Trained> {
    cfg.validate()?;
    let t = &cfg.train;
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::contract("train and val partitions must be nonempty"));
    }
    let policy = exec_policy(cfg);
    let vocab = Vocab::build(data.layer_corpus(&split.train), cfg.data.min_token_count);
    let (mut model, mut store) = Model::new(cfg.model.clone(), vocab.len(), t.seed)?;
    let max_tokens = cfg.model.max_tokens;
    let train_items = data.items(&split.train, &vocab, max_tokens)?;
    let val_items = data.items(&split.val, &vocab, max_tokens)?;
    let val_y: Vec<f64> = val_items.iter().filter_map(|it| it.target).collect();
    if t.target_scaling {
        let ys: Vec<f64> = train_items.iter().filter_map(|it| it.target).collect();
        model.target = TargetScale::fit(&ys);
    }

    let mut opt = AdamW::new(&store, (t.beta1, t.beta2), t.eps, t.weight_decay);
    let n_train = train_items.len();
    let per_epoch = n_train.div_ceil(t.batch_size);
    let (warmup, total) = (t.warmup_epochs as f64, t.total_epochs as f64);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stopped_early = false;
    let mut step = 0u64;

    for epoch in 0..t.total_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[t.seed, epoch as u64, 0x5eed]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(t.batch_size).enumerate() {
            let batch = DeviceBatch::new(chunk.iter().map(|&i| train_items[i].clone()).collect());
            let lr = warmup_cosine_lr(t.lr_main, epoch as f64 + bi as f64 / per_epoch as f64, warmup, total);
            let (loss, grads) = match model.batch_gradients(&store, &batch, t.seed, step, policy) {
                Err(Error::Numeric(m)) => return Err(non_finite(&epochs, epoch + 1, bi, &m)),
                r => r?,
            };
            if !loss.is_finite() {
                return Err(non_finite(&epochs, epoch + 1, bi, "training loss"));
            }
            let g = ParamGrads::sum(&grads);
            if g.iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
                return Err(non_finite(&epochs, epoch + 1, bi, "gradient"));
            }
            store.zero_grad();
            store.accumulate(&g);
            opt.step(&mut store, |name| {
                if Model::is_text_param(name) {
                    lr * t.lr_text_multiplier
                } else {
                    lr
                }
            });
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }

        let preds = predict_items(&model, &store, &val_items, t.batch_size, policy)?;
        let mu: Vec<f64> = preds.iter().map(|p| p.mu).collect();
        let val_loss = mean_loss(cfg.model.head, &preds, &val_y);
        if !val_loss.is_finite() {
            return Err(non_finite(&epochs, epoch + 1, per_epoch, "validation loss"));
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / n_train as f64,
            val_loss,
            val_mae: mae(&val_y, &mu)?,
            val_r2: r2(&val_y, &mu).unwrap_or(f64::NAN),
            lr: warmup_cosine_lr(t.lr_main, epoch as f64, warmup, total),
        };
        log::info!(
            "epoch {:>3} train {:.4} val {:.4} mae {:.4} r2 {:.4}",
            entry.epoch,
            entry.train_loss,
            entry.val_loss,
            entry.val_mae,
            entry.val_r2
        );
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch + 1, store.clone()));
        }
        epochs.push(entry);

        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        let done = epoch + 1;
        if done >= t.warmup_epochs + t.early_stopping_patience
            && done - best_epoch >= t.early_stopping_patience
            && done < t.total_epochs
        {
            stopped_early = true;
            break;
        }
    }

    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    Ok(Trained {
        model,
        store: best_store,
        vocab,
        log: TrainingLog {
            epochs,
            best_epoch,
            stopped_early,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_split, SplitPolicy, SyntheticSpec};
    use crate::graph::GraphConfig;
    use crate::model::{ModelConfig, Variant};

    fn tiny() -> (RunConfig, Dataset, DatasetSplit) {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            variant: Variant::CoAttention,
            d_node: 8,
            d_text: 8,
            d_model: 8,
            heads: 2,
            fusion_layers: 1,
            conv_layers: 1,
            mlp_dims: vec![16, 2],
            dropout: 0.1,
            max_tokens: 12,
            graph: GraphConfig {
                num_centers: 10,
                ..GraphConfig::default()
            },
            ..ModelConfig::default()
        };
        cfg.train.lr_main = 3e-3;
        cfg.train.lr_text_multiplier = 1.0;
        cfg.train.warmup_epochs = 1;
        cfg.train.total_epochs = 6;
        cfg.train.early_stopping_patience = 2;
        let syn = generate_synthetic(&SyntheticSpec {
            num_devices: 60,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let split = make_split(&syn.records, SplitPolicy::Random, 0).unwrap();
        let data = Dataset::new(syn.records, &syn.structures, &cfg.model.graph).unwrap();
        (cfg, data, split)
    }

    #[test]
    fn training_is_deterministic_across_policies() {
        let (mut cfg, data, split) = tiny();
        let a = train(&cfg, &data, &split).unwrap();
        let b = train(&cfg, &data, &split).unwrap();
        assert_eq!(a.log, b.log);
        cfg.train.parallel = false;
        let c = train(&cfg, &data, &split).unwrap();
        assert_eq!(a.log, c.log);
        let best = a.log.best().unwrap();
        assert!(a.log.epochs.iter().all(|e| e.val_loss >= best.val_loss));
        assert!(a.log.epochs[0].train_loss > a.log.epochs.last().unwrap().train_loss);
    }

    #[test]
    fn early_stopping_waits_for_warmup_and_patience() {
        let (mut cfg, data, split) = tiny();
        // a zero learning rate never improves after epoch 1
        cfg.train.lr_main = 1e-300;
        cfg.train.warmup_epochs = 3;
        cfg.train.total_epochs = 20;
        cfg.train.early_stopping_patience = 4;
        let out = train(&cfg, &data, &split).unwrap();
        assert!(out.log.stopped_early);
        assert_eq!(out.log.best_epoch, 1);
        assert_eq!(out.log.epochs.len(), 7);
    }

    #[test]
    fn non_finite_loss_aborts_with_numeric_error() {
        let (mut cfg, data, split) = tiny();
        cfg.train.lr_main = 1e200;
        cfg.train.warmup_epochs = 0;
        match train(&cfg, &data, &split) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected numeric error, got {:?}", other.map(|t| t.log)),
        }
    }
}
