//! Periodic crystal graphs and the residual gated graph-convolution encoder.

pub mod elements;
mod encoder;
mod structure;

pub use encoder::{ConvLayer, GraphEncoder};
pub use structure::{
    composition_formula, det3, inverse3, lattice_from_parameters, norm3, parse_cif,
    parse_structure, vec_mat, CrystalStructure, Mat3,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Graph construction and edge featurization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub cutoff: f64,
    pub max_neighbors: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub num_centers: usize,
    pub width: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            cutoff: 8.0,
            max_neighbors: 12,
            d_min: 0.0,
            d_max: 8.0,
            num_centers: 40,
            width: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub distance: f64,
    pub image: [i32; 3],
}

/// Directed neighbor graph of one crystal, edges grouped by source atom.
#[derive(Debug, Clone)]
pub struct CrystalGraph {
    pub atomic_numbers: Vec<u32>,
    pub edges: Vec<Edge>,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    /// Row-major `E x d_edge`.
    pub edge_features: Vec<f64>,
    pub d_edge: usize,
}

impl CrystalGraph {
    pub fn num_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn mean_neighbor_distance(&self) -> f64 {
        let n = self.num_atoms();
        let mut nearest = vec![f64::INFINITY; n];
        for e in &self.edges {
            nearest[e.src] = nearest[e.src].min(e.distance);
        }
        let found: Vec<f64> = nearest.into_iter().filter(|d| d.is_finite()).collect();
        if found.is_empty() {
            0.0
        } else {
            found.iter().sum::<f64>() / found.len() as f64
        }
    }
}

/// `exp(-(d - mu_k)^2 / width^2)` for `num_centers` evenly spaced centers.
pub fn gaussian_expand(d: f64, d_min: f64, d_max: f64, num_centers: usize, width: f64) -> Vec<f64> {
    let step = if num_centers > 1 {
        (d_max - d_min) / (num_centers - 1) as f64
    } else {
        0.0
    };
    (0..num_centers)
        .map(|k| {
            let mu = d_min + k as f64 * step;
            (-(d - mu) * (d - mu) / (width * width)).exp()
        })
        .collect()
}

/// Number of periodic images to search along each cell vector.
fn image_range(lattice: &Mat3, cutoff: f64) -> [i32; 3] {
    let inv = inverse3(lattice).expect("validated lattice");
    let mut out = [0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        // plane spacing of family k is 1 / |column k of the inverse|
        let recip = norm3([inv[0][k], inv[1][k], inv[2][k]]);
        *o = (cutoff * recip).ceil() as i32 + 1;
    }
    out
}

pub fn build_graph(s: &CrystalStructure, cfg: &GraphConfig) -> Result<CrystalGraph> {
    if !(cfg.cutoff > 0.0) {
        return Err(Error::Geometry(format!("cutoff must be positive, got {}", cfg.cutoff)));
    }
    if !(cfg.d_max > cfg.d_min) || !(cfg.width > 0.0) || cfg.num_centers == 0 {
        return Err(Error::Geometry("invalid Gaussian basis".into()));
    }
    let n = s.num_atoms();
    let lattice = s.lattice();
    let range = image_range(lattice, cfg.cutoff);
    let frac = s.frac_coords();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut cand: Vec<(i64, Edge)> = Vec::new();
        for j in 0..n {
            let df = [
                frac[j][0] - frac[i][0],
                frac[j][1] - frac[i][1],
                frac[j][2] - frac[i][2],
            ];
            for a in -range[0]..=range[0] {
                for b in -range[1]..=range[1] {
                    for c in -range[2]..=range[2] {
                        if i == j && a == 0 && b == 0 && c == 0 {
                            continue;
                        }
                        let f = [df[0] + a as f64, df[1] + b as f64, df[2] + c as f64];
                        let d = norm3(vec_mat(f, lattice));
                        if d < 1e-8 {
                            return Err(Error::Geometry(format!(
                                "sites {i} and {j} coincide (image [{a}, {b}, {c}])"
                            )));
                        }
                        if d <= cfg.cutoff {
                            let key = (d * 1e8).round() as i64;
                            cand.push((
                                key,
                                Edge {
                                    src: i,
                                    dst: j,
                                    distance: d,
                                    image: [a, b, c],
                                },
                            ));
                        }
                    }
                }
            }
        }
        cand.sort_by(|x, y| (x.0, x.1.dst, x.1.image).cmp(&(y.0, y.1.dst, y.1.image)));
        cand.truncate(cfg.max_neighbors);
        edges.extend(cand.into_iter().map(|c| c.1));
    }
    let mut edge_features = Vec::with_capacity(edges.len() * cfg.num_centers);
    for e in &edges {
        edge_features.extend(gaussian_expand(
            e.distance,
            cfg.d_min,
            cfg.d_max,
            cfg.num_centers,
            cfg.width,
        ));
    }
    Ok(CrystalGraph {
        atomic_numbers: s.atomic_numbers().to_vec(),
        src: edges.iter().map(|e| e.src).collect(),
        dst: edges.iter().map(|e| e.dst).collect(),
        edges,
        edge_features,
        d_edge: cfg.num_centers,
    })
}
