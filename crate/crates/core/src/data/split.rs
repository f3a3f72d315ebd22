use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DeviceRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPolicy {
    #[serde(rename = "random_80_10_10")]
    Random,
    #[serde(rename = "group_by_materials")]
    Group,
}

impl FromStr for SplitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "random_80_10_10" => Ok(SplitPolicy::Random),
            "group" | "group_by_materials" => Ok(SplitPolicy::Group),
            _ => Err(Error::config(
                "data.split_policy",
                format!("unknown policy `{s}` (random | group)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            _ => Err(Error::config("split", format!("unknown split part `{s}`"))),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub policy: SplitPolicy,
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn part(&self, p: Partition) -> &[String] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Check the split is disjoint and covers exactly `ids`.
    pub fn check_covers<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("device {id} appears in two partitions")));
            }
        }
        let all: HashSet<&str> = ids.into_iter().collect();
        if all != seen {
            return Err(Error::Data("split does not match the dataset's device ids".into()));
        }
        Ok(())
    }
}

pub fn make_split(records: &[DeviceRecord], policy: SplitPolicy, seed: u64) -> Result<DatasetSplit> {
    let n = records.len();
    if n < 10 {
        return Err(Error::contract(format!("need at least 10 records to split, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<String>; 3] = Default::default();
    match policy {
        SplitPolicy::Random => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let tenth = n / 10;
            for (k, &i) in order.iter().enumerate() {
                let p = if k < tenth {
                    1
                } else if k < 2 * tenth {
                    2
                } else {
                    0
                };
                parts[p].push(records[i].device_id.clone());
            }
        }
        SplitPolicy::Group => {
            let mut groups: BTreeMap<[String; 5], Vec<usize>> = BTreeMap::new();
            for (i, r) in records.iter().enumerate() {
                groups.entry(r.config_key()).or_default().push(i);
            }
            if groups.len() < 3 {
                return Err(Error::contract(format!(
                    "group split needs at least 3 material configurations, got {}",
                    groups.len()
                )));
            }
            let mut keys: Vec<&[String; 5]> = groups.keys().collect();
            keys.shuffle(&mut rng);
            let target = [0.8 * n as f64, 0.1 * n as f64, 0.1 * n as f64];
            let mut counts = [0usize; 3];
            for (k, key) in keys.iter().enumerate() {
                let p = match k {
                    // one group in each partition first, smallest targets first
                    0 => 2,
                    1 => 1,
                    2 => 0,
                    _ => (0..3)
                        .max_by(|&a, &b| {
                            let da = target[a] - counts[a] as f64;
                            let db = target[b] - counts[b] as f64;
                            da.total_cmp(&db).then(b.cmp(&a))
                        })
                        .expect("three partitions"),
                };
                for &i in &groups[*key] {
                    parts[p].push(records[i].device_id.clone());
                }
                counts[p] += groups[*key].len();
            }
        }
    }
    let [train, val, test] = parts;
    Ok(DatasetSplit {
        policy,
        seed,
        train,
        val,
        test,
    })
}
