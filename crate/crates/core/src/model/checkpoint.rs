use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, TargetScale};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{read_archive, write_archive};
use crate::tensor::ParamStore;
use crate::text::Vocab;

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    model: ModelConfig,
    target: TargetScale,
    vocab: Vec<String>,
}

/// Everything needed to run a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub store: ParamStore,
    pub vocab: Vocab,
}

pub fn save_checkpoint(path: &Path, model: &Model, store: &ParamStore, vocab: &Vocab) -> Result<()> {
    let meta = Metadata {
        model: model.config.clone(),
        target: model.target,
        vocab: vocab.tokens().to_vec(),
    };
    let w = BufWriter::new(File::create(path)?);
    write_archive(w, store, &serde_json::to_string(&meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let (saved, meta) = read_archive(BufReader::new(file))?;
    let meta: Metadata = serde_json::from_str(&meta)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let vocab = Vocab::from_token_list(meta.vocab)?;
    let (mut model, mut store) = Model::new(meta.model, vocab.len(), 0)?;
    if saved.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            saved.len(),
            store.len()
        )));
    }
    store.load_values(&saved)?;
    model.target = meta.target;
    Ok(Checkpoint { model, store, vocab })
}

impl ModelConfig {
    /// First field that differs from `other`, as `(key, self, other)`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<(String, String, String)> {
        let a = serde_json::to_value(self).ok()?;
        let b = serde_json::to_value(other).ok()?;
        let (a, b) = (a.as_object()?, b.as_object()?);
        for (k, va) in a {
            let vb = &b[k];
            if va == vb {
                continue;
            }
            if let (Some(oa), Some(ob)) = (va.as_object(), vb.as_object()) {
                for (k2, x) in oa {
                    if Some(x) != ob.get(k2) {
                        let y = ob.get(k2).map_or("null".into(), |v| v.to_string());
                        return Some((format!("{k}.{k2}"), x.to_string(), y));
                    }
                }
            }
            return Some((k.clone(), va.to_string(), vb.to_string()));
        }
        None
    }
}
