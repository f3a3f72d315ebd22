//! Synthetic devices with known ground truth.
//!
//! Absorbers are cubic ABX3 and rock-salt ordered A2B'B''X6 cells (plus
//! strained, jittered copies); each layer material carries a latent quality
//! and, for transport layers, a band level. The clean efficiency is
//!
//! `PCE* = base + f(Eg) + w_q * sum(q) + interaction_scale * I`
//!
//! where the gap `Eg` is a linear function of the standardized mean
//! nearest-neighbour distance and mean atomic number, `f` is a peaked
//! bell around 1.45 eV and `I` penalizes band misalignment between the
//! absorber and its ETL/HTL, plus fixed couplings between specific absorber
//! elements and layers and between pairs of layers. Noise is normal with a device-dependent
//! standard deviation driven by an instability score.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DeviceRecord, StructureStore};
use crate::error::{Error, Result};
use crate::graph::elements::atomic_number;
use crate::graph::{build_graph, composition_formula, CrystalStructure, GraphConfig, Mat3};
use crate::text::{LayerText, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_devices: usize,
    /// Distinct material configurations devices are drawn from.
    pub num_configs: usize,
    /// Strained/jittered copies per formula, in addition to the ideal cell.
    pub variants: usize,
    pub base: f64,
    pub structure_weight: f64,
    pub quality_weight: f64,
    pub interaction_scale: f64,
    pub noise_scale: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_devices: 2000,
            num_configs: 600,
            variants: 3,
            base: 14.0,
            structure_weight: 10.0,
            quality_weight: 2.0,
            interaction_scale: 1.0,
            noise_scale: 1.0,
            sigma_min: 0.5,
            sigma_max: 3.0,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_devices == 0 {
            return Err(Error::config("synthetic.num_devices", "must be positive"));
        }
        if self.num_configs == 0 {
            return Err(Error::config("synthetic.num_configs", "must be positive"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max >= self.sigma_min) {
            return Err(Error::config(
                "synthetic.sigma_min",
                "need 0 < sigma_min <= sigma_max",
            ));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::config("synthetic.noise_scale", "must be non-negative"));
        }
        Ok(())
    }
}

/// Noise-free target and noise level for one device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pce_true: f64,
    pub sigma_true: f64,
    pub pce_observed: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub records: Vec<DeviceRecord>,
    pub structures: StructureStore,
    /// Parallel to `records`.
    pub truth: Vec<GroundTruth>,
}

impl SyntheticData {
    pub fn write_ground_truth(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        w.write_record(["device_id", "pce_true", "sigma_true", "pce_observed"])?;
        for (r, t) in self.records.iter().zip(&self.truth) {
            w.write_record([
                r.device_id.clone(),
                format!("{}", t.pce_true),
                format!("{}", t.sigma_true),
                format!("{}", t.pce_observed),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Material {
    name: &'static str,
    quality: f64,
    /// ETL conduction level or HTL valence level (eV); unused otherwise.
    level: f64,
    instability: f64,
}

const fn mat(name: &'static str, quality: f64, level: f64, instability: f64) -> Material {
    Material {
        name,
        quality,
        level,
        instability,
    }
}

const SUBSTRATES: &[Material] = &[
    mat("SLG | FTO", 0.4, 0.0, 0.0),
    mat("SLG | ITO", 0.1, 0.0, 0.0),
    mat("PET | ITO", -0.8, 0.0, 0.1),
    mat("PEN | ITO", -0.4, 0.0, 0.05),
];

const ETLS: &[Material] = &[
    mat("TiO2-c | TiO2-mp", 0.8, -4.0, 0.0),
    mat("TiO2-c", 0.2, -4.05, 0.0),
    mat("SnO2-np", 0.6, -4.3, 0.0),
    mat("ZnO-np", -0.5, -4.2, 0.15),
    mat("C60 | BCP", 0.0, -4.5, 0.05),
    mat("PCBM-60", -0.3, -4.3, 0.05),
];

const HTLS: &[Material] = &[
    mat("Spiro-MeOTAD", 0.9, -5.2, 0.05),
    mat("PTAA", 0.6, -5.25, 0.0),
    mat("PEDOT:PSS", -0.6, -5.0, 0.25),
    mat("NiO-c", 0.2, -5.4, 0.0),
    mat("CuSCN", 0.0, -5.35, 0.0),
    mat("P3HT", -0.3, -5.0, 0.05),
    mat("CuI", -0.5, -5.3, 0.1),
];

const CONTACTS: &[Material] = &[
    mat("Au", 0.7, 0.0, 0.0),
    mat("Ag", 0.3, 0.0, 0.15),
    mat("Al", -0.7, 0.0, 0.25),
    mat("Cu", -0.1, 0.0, 0.05),
    mat("Carbon", -0.3, 0.0, 0.0),
];

/// Ionic radii (Angstrom) for the absorber palette, plus site instability.
const IONS: &[(&str, f64, f64)] = &[
    ("Cs", 1.88, 0.0),
    ("Rb", 1.72, 0.0),
    ("K", 1.64, 0.05),
    ("Pb", 1.19, 0.0),
    ("Sn", 1.10, 0.35),
    ("Ge", 0.73, 0.5),
    ("Ag", 1.15, 0.0),
    ("Na", 1.02, 0.0),
    ("Cu", 0.77, 0.15),
    ("Bi", 1.03, 0.0),
    ("In", 0.80, 0.05),
    ("Sb", 0.76, 0.05),
    ("I", 2.20, 0.05),
    ("Br", 1.96, 0.0),
    ("Cl", 1.81, 0.0),
];

fn ion(sym: &str) -> (u32, f64, f64) {
    let &(_, r, inst) = IONS
        .iter()
        .find(|(s, _, _)| *s == sym)
        .expect("symbol in palette");
    (atomic_number(sym).expect("known element"), r, inst)
}

struct Absorber {
    formula: String,
    cell: CrystalStructure,
    instability: f64,
}

fn cubic_perovskite(a_site: &str, b_site: &str, x_site: &str) -> Absorber {
    let (za, _, ia) = ion(a_site);
    let (zb, rb, ib) = ion(b_site);
    let (zx, rx, ix) = ion(x_site);
    let a = 2.0 * (rb + rx);
    let lattice = [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]];
    let frac = vec![
        [0.5, 0.5, 0.5],
        [0.0, 0.0, 0.0],
        [0.5, 0.0, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, 0.0, 0.5],
    ];
    let zs = vec![za, zb, zx, zx, zx];
    let formula = composition_formula(zs.iter().copied());
    let cell = CrystalStructure::new(lattice, frac, zs, formula.clone()).expect("valid cell");
    Absorber {
        formula,
        cell,
        instability: ia + ib + ix,
    }
}

/// Rock-salt ordered double perovskite in its 10-atom primitive cell.
fn double_perovskite(a_site: &str, b1: &str, b3: &str, x_site: &str) -> Absorber {
    let (za, _, ia) = ion(a_site);
    let (z1, r1, i1) = ion(b1);
    let (z3, r3, i3) = ion(b3);
    let (zx, rx, ix) = ion(x_site);
    let a = 2.0 * (r1 + rx) + 2.0 * (r3 + rx);
    let h = a / 2.0;
    let lattice = [[0.0, h, h], [h, 0.0, h], [h, h, 0.0]];
    let x = r1 + rx;
    let q = a / 4.0;
    let mut cart = vec![[0.0, 0.0, 0.0], [h, h, h], [q, q, q], [3.0 * q, 3.0 * q, 3.0 * q]];
    let mut zs = vec![z1, z3, za, za];
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let mut p = [0.0; 3];
            p[axis] = sign * x;
            cart.push(p);
            zs.push(zx);
        }
    }
    let formula = composition_formula(zs.iter().copied());
    let cell = CrystalStructure::from_cartesian(lattice, &cart, zs, formula.clone()).expect("valid cell");
    Absorber {
        formula,
        cell,
        instability: ia + i1 + i3 + ix,
    }
}

fn absorber_palette() -> Vec<Absorber> {
    let mut out = Vec::new();
    for a in ["Cs", "Rb", "K"] {
        for b in ["Pb", "Sn", "Ge"] {
            for x in ["I", "Br", "Cl"] {
                out.push(cubic_perovskite(a, b, x));
            }
        }
    }
    for b1 in ["Ag", "Na", "Cu"] {
        for b3 in ["Bi", "In", "Sb"] {
            for x in ["Br", "Cl"] {
                out.push(double_perovskite("Cs", b1, b3, x));
            }
        }
    }
    out
}

/// Isotropic strain plus Gaussian site jitter.
fn perturbed(s: &CrystalStructure, rng: &mut ChaCha8Rng) -> CrystalStructure {
    let strain = 1.0 + rng.random_range(-0.04..0.04);
    let lattice: Mat3 = s.lattice().map(|row| row.map(|x| x * strain));
    let cart: Vec<[f64; 3]> = (0..s.num_atoms())
        .map(|i| {
            let c = s.cartesian(i);
            c.map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x * strain + 0.05 * z
            })
        })
        .collect();
    CrystalStructure::from_cartesian(lattice, &cart, s.atomic_numbers().to_vec(), s.formula())
        .expect("valid cell")
}

/// Band gap and valence level of an absorber from its geometry.
#[derive(Debug, Clone, Copy)]
struct Electronic {
    gap: f64,
    valence: f64,
}

fn electronic(s: &CrystalStructure) -> Result<Electronic> {
    let g = build_graph(s, &GraphConfig::default())?;
    let u = (g.mean_neighbor_distance() - 3.3) / 0.3;
    let zbar = s.atomic_numbers().iter().map(|&z| z as f64).sum::<f64>() / s.num_atoms() as f64;
    let v = (zbar - 40.0) / 12.0;
    let gap = (2.0 - 0.45 * u - 0.35 * v).clamp(0.8, 3.5);
    let valence = -5.6 + 0.15 * u + 0.1 * v;
    Ok(Electronic { gap, valence })
}

fn bell(gap: f64) -> f64 {
    (-(gap - 1.45).powi(2) / (2.0 * 0.35 * 0.35)).exp()
}

/// Penalty for transport levels away from a small favourable offset.
/// Pairwise couplings: absorber element or layer material on one side,
/// another layer material on the other.
const PAIRS: &[(Side, Side, f64)] = &[
    (Side::Element("I"), Side::Layer(Role::BackContact, "Ag"), -2.0),
    (Side::Element("I"), Side::Layer(Role::BackContact, "Cu"), -1.0),
    (Side::Element("Sn"), Side::Layer(Role::Htl, "PEDOT:PSS"), 2.5),
    (Side::Element("Cl"), Side::Layer(Role::Etl, "ZnO-np"), -1.5),
    (Side::Element("Ge"), Side::Layer(Role::Htl, "NiO-c"), 1.5),
    (Side::Layer(Role::Htl, "Spiro-MeOTAD"), Side::Layer(Role::BackContact, "Ag"), -1.5),
    (Side::Layer(Role::Substrate, "PET | ITO"), Side::Layer(Role::Etl, "TiO2-c | TiO2-mp"), -3.0),
    (Side::Layer(Role::Substrate, "PEN | ITO"), Side::Layer(Role::Etl, "TiO2-c | TiO2-mp"), -2.5),
    (Side::Layer(Role::Substrate, "PET | ITO"), Side::Layer(Role::Etl, "C60 | BCP"), 1.5),
    (Side::Layer(Role::Htl, "PTAA"), Side::Layer(Role::BackContact, "Carbon"), -1.5),
];

#[derive(Clone, Copy)]
enum Side {
    Element(&'static str),
    Layer(Role, &'static str),
}

impl Side {
    fn holds(self, elements: &[u32], mats: &[&Material; 4]) -> bool {
        match self {
            Side::Element(sym) => atomic_number(sym).is_some_and(|z| elements.contains(&z)),
            Side::Layer(role, name) => mats[role.index()].name == name,
        }
    }
}

fn pair_terms(elements: &[u32], mats: &[&Material; 4]) -> f64 {
    PAIRS
        .iter()
        .filter(|(a, b, _)| a.holds(elements, mats) && b.holds(elements, mats))
        .map(|p| p.2)
        .sum()
}

fn misalignment(e: Electronic, etl: &Material, htl: &Material) -> f64 {
    let conduction = e.valence + e.gap;
    let de = etl.level - (conduction - 0.15);
    let dh = htl.level - (e.valence + 0.15);
    -3.0 * (de * de + dh * dh)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let palette = absorber_palette();

    let mut structures = StructureStore::new();
    // per formula: (structure_ref, electronic) for every variant
    let mut cells: Vec<Vec<(String, Electronic)>> = Vec::with_capacity(palette.len());
    for ab in &palette {
        let mut list = Vec::with_capacity(spec.variants + 1);
        for k in 0..=spec.variants {
            let s = if k == 0 {
                ab.cell.clone()
            } else {
                perturbed(&ab.cell, &mut rng)
            };
            let key = format!("{}-v{k}", ab.formula);
            list.push((key.clone(), electronic(&s)?));
            structures.insert(key, s);
        }
        cells.push(list);
    }

    let catalogs = [SUBSTRATES, ETLS, HTLS, CONTACTS];
    let configs: Vec<(usize, [usize; 4])> = (0..spec.num_configs)
        .map(|_| {
            let f = rng.random_range(0..palette.len());
            let layers = catalogs.map(|c| rng.random_range(0..c.len()));
            (f, layers)
        })
        .collect();

    let width = (spec.num_devices.max(1) as f64).log10().floor() as usize + 1;
    let mut records = Vec::with_capacity(spec.num_devices);
    let mut truth = Vec::with_capacity(spec.num_devices);
    for i in 0..spec.num_devices {
        let &(f, li) = configs.choose(&mut rng).expect("nonempty configs");
        let (sref, elec) = cells[f]
            .choose(&mut rng)
            .cloned()
            .expect("at least one variant");
        let mats: [&Material; 4] = [0, 1, 2, 3].map(|k| &catalogs[k][li[k]]);
        let quality: f64 = mats.iter().map(|m| m.quality).sum();
        let clean = spec.base
            + spec.structure_weight * bell(elec.gap)
            + spec.quality_weight * quality
            + spec.interaction_scale
                * (misalignment(elec, mats[1], mats[2])
                    + pair_terms(palette[f].cell.atomic_numbers(), &mats));
        let pce_true = clean.clamp(0.0, 30.0);
        let r = (palette[f].instability + mats.iter().map(|m| m.instability).sum::<f64>()).min(1.0);
        let sigma_true =
            spec.noise_scale * (spec.sigma_min + (spec.sigma_max - spec.sigma_min) * r * r);
        let z: f64 = StandardNormal.sample(&mut rng);
        let pce_observed = (clean + sigma_true * z).clamp(0.0, 30.0);
        let layers = Role::ALL
            .iter()
            .zip(mats)
            .map(|(&role, m)| LayerText::new(role, m.name))
            .collect();
        records.push(DeviceRecord {
            device_id: format!("dev-{i:0width$}"),
            perovskite_formula: palette[f].formula.clone(),
            structure_ref: sref,
            layers,
            pce: pce_observed,
        });
        truth.push(GroundTruth {
            pce_true,
            sigma_true,
            pce_observed,
        });
    }
    Ok(SyntheticData {
        records,
        structures,
        truth,
    })
}

/// Summary counts used by `generate` logging.
pub fn describe(data: &SyntheticData) -> BTreeMap<&'static str, f64> {
    let n = data.records.len().max(1) as f64;
    let mean = data.truth.iter().map(|t| t.pce_true).sum::<f64>() / n;
    let sd = (data.truth.iter().map(|t| (t.pce_true - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sig = data.truth.iter().map(|t| t.sigma_true).sum::<f64>() / n;
    BTreeMap::from([
        ("devices", data.records.len() as f64),
        ("structures", data.structures.len() as f64),
        ("pce_true_mean", mean),
        ("pce_true_sd", sd),
        ("sigma_mean", sig),
    ])
}
