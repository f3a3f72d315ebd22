//! Device records, structure stores, splits, batching and the synthetic
//! dataset generator.

mod batch;
mod split;
mod synthetic;

pub use batch::{BatchItem, DeviceBatch};
pub use split::{make_split, DatasetSplit, Partition, SplitPolicy};
pub use synthetic::{describe, generate_synthetic, GroundTruth, SyntheticData, SyntheticSpec};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, CrystalGraph, CrystalStructure, GraphConfig};
use crate::text::{canonical_layers, LayerText, LayerTokens, Role, Vocab};

/// One solar cell: absorber structure, four context layers, measured PCE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: String,
    pub perovskite_formula: String,
    pub structure_ref: String,
    pub layers: Vec<LayerText>,
    pub pce: f64,
}

impl DeviceRecord {
    pub fn layer(&self, role: Role) -> &str {
        self.layers
            .iter()
            .find(|l| l.role == role)
            .map_or("", |l| l.text.as_str())
    }

    /// Material configuration: formula plus the four layer strings.
    pub fn config_key(&self) -> [String; 5] {
        [
            self.perovskite_formula.clone(),
            self.layer(Role::Substrate).to_string(),
            self.layer(Role::Etl).to_string(),
            self.layer(Role::Htl).to_string(),
            self.layer(Role::BackContact).to_string(),
        ]
    }

    pub(crate) fn validate(&self) -> Result<()> {
        canonical_layers(&self.layers)
            .map_err(|e| Error::Data(format!("device {}: {e}", self.device_id)))?;
        if !(0.0..=100.0).contains(&self.pce) {
            return Err(Error::Data(format!(
                "device {}: pce {} outside [0, 100]",
                self.device_id, self.pce
            )));
        }
        Ok(())
    }
}

pub type StructureStore = BTreeMap<String, CrystalStructure>;

/// Records whose structures resolved, plus the ids that were dropped.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub records: Vec<DeviceRecord>,
    pub structures: StructureStore,
    pub dropped: Vec<String>,
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    Ok(BufReader::new(f).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

pub fn read_structures(path: &Path) -> Result<StructureStore> {
    let mut store = StructureStore::new();
    for (line, text) in lines(path)? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line, msg };
        let mut v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
        let key = v
            .as_object_mut()
            .and_then(|o| o.remove("structure_ref"))
            .and_then(|k| k.as_str().map(str::to_string))
            .ok_or_else(|| parse_err("missing structure_ref".into()))?;
        let s: CrystalStructure =
            serde_json::from_value(v).map_err(|e| parse_err(e.to_string()))?;
        if store.insert(key.clone(), s).is_some() {
            return Err(Error::Data(format!("duplicate structure_ref {key}")));
        }
    }
    Ok(store)
}

pub fn write_structures(path: &Path, store: &StructureStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (key, s) in store {
        let mut v = serde_json::to_value(s)?;
        v.as_object_mut()
            .expect("structure is an object")
            .insert("structure_ref".into(), key.clone().into());
        writeln!(w, "{}", serde_json::to_string(&v)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Read device records, rejecting malformed lines and duplicate ids.
pub fn read_devices(path: &Path) -> Result<Vec<DeviceRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in lines(path)? {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let r: DeviceRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line,
            msg: format!("record {}: {e}", out.len()),
        })?;
        r.validate()?;
        if !seen.insert(r.device_id.clone()) {
            return Err(Error::Data(format!("duplicate device_id {}", r.device_id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_devices(path: &Path, records: &[DeviceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Load records and structures; records with an unresolved structure_ref
/// are dropped and reported.
pub fn load_dataset(devices: &Path, structures: &Path) -> Result<LoadedDataset> {
    let structures = read_structures(structures)?;
    let (records, dropped) = resolve(read_devices(devices)?, &structures);
    if records.is_empty() {
        return Err(Error::Data("no device record resolved its structure".into()));
    }
    Ok(LoadedDataset {
        records,
        structures,
        dropped,
    })
}

/// Split records into those whose structure resolves and the ids of the rest.
pub fn resolve(records: Vec<DeviceRecord>, structures: &StructureStore) -> (Vec<DeviceRecord>, Vec<String>) {
    let (kept, lost): (Vec<_>, Vec<_>) = records
        .into_iter()
        .partition(|r| structures.contains_key(&r.structure_ref));
    let dropped: Vec<String> = lost.into_iter().map(|r| r.device_id).collect();
    if !dropped.is_empty() {
        log::warn!(
            "dropped {} record(s) with unresolved structure_ref: {}",
            dropped.len(),
            dropped.join(", ")
        );
    }
    (kept, dropped)
}

/// Records with their crystal graphs built once per structure.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DeviceRecord>,
    pub graphs: HashMap<String, Arc<CrystalGraph>>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(records: Vec<DeviceRecord>, structures: &StructureStore, cfg: &GraphConfig) -> Result<Self> {
        let mut graphs = HashMap::new();
        for r in &records {
            if graphs.contains_key(&r.structure_ref) {
                continue;
            }
            let s = structures.get(&r.structure_ref).ok_or_else(|| {
                Error::Data(format!("unresolved structure_ref {}", r.structure_ref))
            })?;
            let g = build_graph(s, cfg).map_err(|e| {
                Error::Data(format!("structure {}: {e}", r.structure_ref))
            })?;
            graphs.insert(r.structure_ref.clone(), Arc::new(g));
        }
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.device_id.clone(), i))
            .collect();
        Ok(Self {
            records,
            graphs,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, device_id: &str) -> Option<&DeviceRecord> {
        self.index.get(device_id).map(|&i| &self.records[i])
    }

    pub fn pce(&self, device_id: &str) -> Option<f64> {
        self.get(device_id).map(|r| r.pce)
    }

    /// Unpadded batch item for one device.
    pub fn item(&self, device_id: &str, vocab: &Vocab, max_tokens: usize) -> Result<BatchItem> {
        let r = self
            .get(device_id)
            .ok_or_else(|| Error::Data(format!("unknown device_id {device_id}")))?;
        let graph = self.graphs.get(&r.structure_ref).cloned();
        let n = graph.as_ref().map_or(1, |g| g.num_atoms());
        Ok(BatchItem {
            device_id: r.device_id.clone(),
            graph,
            tokens: LayerTokens::new(vocab, &r.layers, max_tokens)?,
            node_mask: vec![true; n],
            target: Some(r.pce),
        })
    }

    /// Prepared items for a list of ids, in the given order.
    pub fn items(&self, ids: &[String], vocab: &Vocab, max_tokens: usize) -> Result<Vec<BatchItem>> {
        ids.iter().map(|id| self.item(id, vocab, max_tokens)).collect()
    }

    /// Every layer string, for building a vocabulary.
    pub fn layer_corpus<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a str> + 'a {
        ids.iter()
            .filter_map(|id| self.get(id))
            .flat_map(|r| r.layers.iter().map(|l| l.text.as_str()))
    }
}
