//! Run configuration: a flat TOML document of dotted keys
//! (`train.lr_main = 1e-4`, `model.graph.cutoff = 6.0`, ...). Unknown keys
//! and ill-typed values are rejected with the offending key named.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitPolicy, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub lr_text_multiplier: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub early_stopping_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Standardize targets with train-split mean and deviation.
    pub target_scaling: bool,
    /// Run per-device passes on the thread pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_main: 1e-4,
            lr_text_multiplier: 1e-2,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 10,
            total_epochs: 200,
            early_stopping_patience: 30,
            batch_size: 16,
            seed: 42,
            target_scaling: true,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub devices: PathBuf,
    pub structures: PathBuf,
    pub split_policy: SplitPolicy,
    /// Seed for the split; the training seed does not move it.
    pub split_seed: u64,
    pub min_token_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            devices: "data/devices.jsonl".into(),
            structures: "data/structures.jsonl".into(),
            split_policy: SplitPolicy::Random,
            split_seed: 0,
            min_token_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "runs/default".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    /// Present only when the document has a `synthetic` section.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

type Flat = BTreeMap<String, toml::Value>;

fn flatten(prefix: &str, table: &toml::Table, out: &mut Flat) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn insert(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            let sub = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(t) = sub {
                insert(t, rest, value);
            }
        }
        None => {
            table.insert(key.to_string(), value);
        }
    }
}

fn same_kind(a: &toml::Value, b: &toml::Value) -> bool {
    use toml::Value::*;
    matches!(
        (a, b),
        (String(_), String(_))
            | (Integer(_), Integer(_))
            | (Float(_), Float(_) | Integer(_))
            | (Boolean(_), Boolean(_))
            | (Array(_), Array(_))
    )
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        let mut given = Flat::new();
        flatten("", &doc, &mut given);

        let with_synthetic = given.keys().any(|k| k.starts_with("synthetic."));
        let mut defaults = RunConfig::default();
        if with_synthetic {
            defaults.synthetic = Some(SyntheticSpec::default());
        }
        let base = toml::Table::try_from(&defaults)
            .map_err(|e| Error::config("<defaults>", e.to_string()))?;
        let mut known = Flat::new();
        flatten("", &base, &mut known);

        let mut merged = base;
        for (key, value) in given {
            let Some(default) = known.get(&key) else {
                return Err(Error::config(key, "unknown key"));
            };
            if !same_kind(default, &value) {
                return Err(Error::config(
                    key,
                    format!("expected a {}, got a {}", default.type_str(), value.type_str()),
                ));
            }
            let value = match (default, value) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            insert(&mut merged, &key, value.clone());
            // per-key check so a bad enum value or negative count names its key
            let probe: std::result::Result<RunConfig, _> = merged.clone().try_into();
            if let Err(e) = probe {
                return Err(Error::config(key, e.message().to_string()));
            }
        }
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.warmup_epochs >= t.total_epochs {
            return Err(Error::config(
                "train.warmup_epochs",
                "must be smaller than train.total_epochs",
            ));
        }
        if t.early_stopping_patience == 0 {
            return Err(Error::config("train.early_stopping_patience", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(t.lr_main > 0.0) {
            return Err(Error::config("train.lr_main", "must be positive"));
        }
        if !(t.lr_text_multiplier >= 0.0) {
            return Err(Error::config("train.lr_text_multiplier", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output.dir.join("model.ckpt")
    }

    pub fn log_path(&self) -> PathBuf {
        self.output.dir.join("training_log.json")
    }

    pub fn split_path(&self) -> PathBuf {
        self.output.dir.join("split.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, Variant};

    #[test]
    fn defaults_follow_the_reference_table() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.d_model, 64);
        assert_eq!(c.model.mlp_dims, vec![128, 64, 2]);
        assert_eq!(c.model.fusion_layers, 3);
        assert_eq!(c.model.heads, 4);
        assert_eq!(c.model.dropout, 0.2);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.lr_main, 1e-4);
        assert!((c.train.lr_main * c.train.lr_text_multiplier - 1e-6).abs() < 1e-18);
        assert_eq!(c.train.warmup_epochs, 10);
        assert_eq!(c.train.weight_decay, 1e-5);
        assert_eq!(c.train.total_epochs, 200);
        assert_eq!(c.train.early_stopping_patience, 30);
        assert!(c.synthetic.is_none());
    }

    #[test]
    fn dotted_and_sectioned_keys() {
        let c = RunConfig::from_toml_str(
            "model.d_model = 32\nmodel.graph.cutoff = 6\nmodel.variant = \"concat_mlp\"\n\
             [train]\nlr_main = 0.001\n[synthetic]\nnum_devices = 50\n",
        )
        .unwrap();
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.graph.cutoff, 6.0);
        assert_eq!(c.model.variant, Variant::ConcatMlp);
        assert_eq!(c.model.head, HeadKind::GaussianNll);
        assert_eq!(c.train.lr_main, 1e-3);
        assert_eq!(c.synthetic.unwrap().num_devices, 50);
        let back = RunConfig::from_toml_str(&RunConfig::default().to_toml_string()).unwrap();
        assert_eq!(back, RunConfig::default());
    }

    fn bad_key(text: &str) -> String {
        match RunConfig::from_toml_str(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(bad_key("model.d_modle = 3"), "model.d_modle");
        assert_eq!(bad_key("train.lr_main = \"fast\""), "train.lr_main");
        assert_eq!(bad_key("model.variant = \"big\""), "model.variant");
        assert_eq!(bad_key("train.batch_size = -1"), "train.batch_size");
        assert_eq!(bad_key("synthetic.noise = 1.0"), "synthetic.noise");
        assert_eq!(bad_key("train.warmup_epochs = 200"), "train.warmup_epochs");
        assert_eq!(bad_key("train.early_stopping_patience = 0"), "train.early_stopping_patience");
        assert_eq!(bad_key("this is not toml"), "<document>");
    }
}
