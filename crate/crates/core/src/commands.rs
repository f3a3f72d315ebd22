//! The five subcommands as library calls; the binary only parses flags and
//! maps errors to exit codes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, load_dataset, make_split, resolve, read_structures, write_devices,
    write_structures, Dataset, DatasetSplit, DeviceRecord, Partition,
};
use crate::error::{Error, Result};
use crate::metrics::{calibration_table, picp, write_calibration_csv, CalibrationBin, MetricsReport, Z95};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Prediction};
use crate::text::LayerText;
use crate::train::{exec_policy, predict_items, train, TrainingLog};

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

/// Ground-truth table lands next to the devices file.
pub fn ground_truth_path(cfg: &RunConfig) -> PathBuf {
    cfg.data.devices.with_file_name("ground_truth.csv")
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let spec = cfg
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::config("synthetic", "generate needs a [synthetic] section"))?;
    let data = generate_synthetic(spec)?;
    for p in [&cfg.data.devices, &cfg.data.structures] {
        create_parent(p)?;
    }
    write_devices(&cfg.data.devices, &data.records)?;
    write_structures(&cfg.data.structures, &data.structures)?;
    data.write_ground_truth(&ground_truth_path(cfg))?;
    log::info!(
        "wrote {} devices and {} structures",
        data.records.len(),
        data.structures.len()
    );
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let loaded = load_dataset(&cfg.data.devices, &cfg.data.structures)?;
    Dataset::new(loaded.records, &loaded.structures, &cfg.model.graph)
}

/// The saved split when it matches the data and config, a fresh one otherwise.
fn split_for(cfg: &RunConfig, data: &Dataset) -> Result<DatasetSplit> {
    let path = cfg.split_path();
    if path.exists() {
        let s = DatasetSplit::load(&path)?;
        if s.policy == cfg.data.split_policy && s.seed == cfg.data.split_seed {
            s.check_covers(data.records.iter().map(|r| r.device_id.as_str()))?;
            return Ok(s);
        }
        log::warn!("{} was made with another policy or seed; re-splitting", path.display());
    }
    make_split(&data.records, cfg.data.split_policy, cfg.data.split_seed)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainingLog> {
    let data = dataset(cfg)?;
    let split = split_for(cfg, &data)?;
    fs::create_dir_all(&cfg.output.dir)?;
    split.save(&cfg.split_path())?;
    let out = train(cfg, &data, &split)?;
    save_checkpoint(&cfg.checkpoint_path(), &out.model, &out.store, &out.vocab)?;
    let f = BufWriter::new(File::create(cfg.log_path())?);
    serde_json::to_writer_pretty(f, &out.log)?;
    log::info!(
        "best epoch {} of {}{}",
        out.log.best_epoch,
        out.log.epochs.len(),
        if out.log.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(out.log)
}

/// Checkpoint whose model section agrees with the config.
pub fn load_matching(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if let Some((key, ours, theirs)) = cfg.model.first_difference(&ckpt.model.config) {
        return Err(Error::config(
            format!("model.{key}"),
            format!("config has {ours} but checkpoint {} has {theirs}", path.display()),
        ));
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub device_id: String,
    pub y_true: f64,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub split: Partition,
    pub metrics: MetricsReport,
    pub rows: Vec<PredictionRow>,
}

/// Default predictions path for a part: `<output.dir>/predictions_<part>.csv`.
pub fn predictions_path(cfg: &RunConfig, part: Partition) -> PathBuf {
    cfg.output.dir.join(format!("predictions_{part}.csv"))
}

pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, part: Partition) -> Result<EvalOutput> {
    let ckpt = load_matching(cfg, checkpoint)?;
    let data = dataset(cfg)?;
    let split = split_for(cfg, &data)?;
    let ids = split.part(part);
    if ids.is_empty() {
        return Err(Error::contract(format!("the {part} partition is empty")));
    }
    let items = data.items(ids, &ckpt.vocab, cfg.model.max_tokens)?;
    let preds = predict_items(&ckpt.model, &ckpt.store, &items, cfg.train.batch_size, exec_policy(cfg))?;
    let rows: Vec<PredictionRow> = items
        .iter()
        .zip(&preds)
        .map(|(it, p)| PredictionRow {
            device_id: it.device_id.clone(),
            y_true: it.target.unwrap_or(f64::NAN),
            mu: p.mu,
            sigma: p.sigma,
        })
        .collect();
    let y: Vec<f64> = rows.iter().map(|r| r.y_true).collect();
    let (mu, sigma) = columns(&preds);
    let metrics = MetricsReport::compute(&y, &mu, &sigma)?;
    Ok(EvalOutput {
        split: part,
        metrics,
        rows,
    })
}

fn columns(preds: &[Prediction]) -> (Vec<f64>, Vec<f64>) {
    preds.iter().map(|p| (p.mu, p.sigma)).unzip()
}

/// Writes the predictions CSV to `out` and the metrics JSON beside it.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, part: Partition, out: &Path) -> Result<EvalOutput> {
    let res = evaluate(cfg, checkpoint, part)?;
    create_parent(out)?;
    let mut w = csv::Writer::from_path(out)?;
    for r in &res.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let f = BufWriter::new(File::create(out.with_extension("json"))?);
    serde_json::to_writer_pretty(f, &res)?;
    log::info!(
        "{part}: n {} mae {:.4} r2 {:.4} spearman {:.4} picp95 {:.4}",
        res.metrics.n,
        res.metrics.mae,
        res.metrics.r2,
        res.metrics.spearman_rho,
        res.metrics.picp_95
    );
    Ok(res)
}

/// A device line for prediction; the measured PCE may be absent.
#[derive(Debug, Deserialize)]
struct QueryRecord {
    device_id: String,
    perovskite_formula: String,
    structure_ref: String,
    layers: Vec<LayerText>,
    #[serde(default)]
    pce: Option<f64>,
}

fn read_queries(path: &Path) -> Result<Vec<DeviceRecord>> {
    let f = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let r = DeviceRecord {
            device_id: q.device_id,
            perovskite_formula: q.perovskite_formula,
            structure_ref: q.structure_ref,
            layers: q.layers,
            pce: q.pce.unwrap_or(0.0),
        };
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOutput {
    pub device_id: String,
    pub mu: f64,
    pub sigma: f64,
}

/// Predictions for every device in `devices` whose structure resolves.
/// Unresolved records are listed and skipped; if none resolve it fails.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    devices: &Path,
    out: &Path,
) -> Result<(Vec<PredictOutput>, Vec<String>)> {
    let ckpt = load_matching(cfg, checkpoint)?;
    let structures = read_structures(&cfg.data.structures)?;
    let (records, dropped) = resolve(read_queries(devices)?, &structures);
    for id in &dropped {
        log::error!("device {id}: unresolved structure_ref");
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no device in {} resolved its structure ({} unresolved: {})",
            devices.display(),
            dropped.len(),
            dropped.join(", ")
        )));
    }
    let ids: Vec<String> = records.iter().map(|r| r.device_id.clone()).collect();
    let data = Dataset::new(records, &structures, &cfg.model.graph)?;
    let items = data.items(&ids, &ckpt.vocab, cfg.model.max_tokens)?;
    let preds = predict_items(&ckpt.model, &ckpt.store, &items, cfg.train.batch_size, exec_policy(cfg))?;
    let rows: Vec<PredictOutput> = ids
        .into_iter()
        .zip(&preds)
        .map(|(device_id, p)| PredictOutput {
            device_id,
            mu: p.mu,
            sigma: p.sigma,
        })
        .collect();
    create_parent(out)?;
    let mut w = csv::Writer::from_path(out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok((rows, dropped))
}

/// `y_true`, `mu`, `sigma` columns of a predictions CSV, by header name.
pub fn read_prediction_columns(path: &Path) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let mut idx = [0usize; 3];
    for (slot, name) in idx.iter_mut().zip(["y_true", "mu", "sigma"]) {
        *slot = headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
            Error::Data(format!("{} has no `{name}` column", path.display()))
        })?;
    }
    let mut cols = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let get = |k: usize| -> Result<f64> {
            let field = rec.get(idx[k]).unwrap_or("");
            field.trim().parse().map_err(|_| Error::Parse {
                line: row + 2,
                msg: format!("`{field}` is not a number"),
            })
        };
        cols.0.push(get(0)?);
        cols.1.push(get(1)?);
        cols.2.push(get(2)?);
    }
    Ok(cols)
}

pub fn cmd_calibrate(input: &Path, bins: usize, out: &Path) -> Result<(Vec<CalibrationBin>, f64)> {
    let (y, mu, sigma) = read_prediction_columns(input)?;
    let table = calibration_table(&y, &mu, &sigma, bins)?;
    let coverage = picp(&y, &mu, &sigma, Z95)?;
    create_parent(out)?;
    let mut w = BufWriter::new(File::create(out)?);
    write_calibration_csv(&mut w, &table, Some(coverage))?;
    w.flush()?;
    Ok((table, coverage))
}
