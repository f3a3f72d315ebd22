use serde::{Deserialize, Serialize};

use super::elements;
use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn inverse3(m: &Mat3) -> Option<Mat3> {
    let det = det3(m);
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    Some(inv)
}

/// Row vector times matrix.
pub fn vec_mat(v: [f64; 3], m: &Mat3) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = v[0] * m[0][k] + v[1] * m[1][k] + v[2] * m[2][k];
    }
    out
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn wrap(x: f64) -> f64 {
    let w = x - x.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Periodic crystal: lattice rows are the cell vectors in Angstrom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NativeStructure", into = "NativeStructure")]
pub struct CrystalStructure {
    lattice: Mat3,
    frac_coords: Vec<[f64; 3]>,
    atomic_numbers: Vec<u32>,
    formula: String,
}

impl CrystalStructure {
    pub fn new(
        lattice: Mat3,
        frac_coords: Vec<[f64; 3]>,
        atomic_numbers: Vec<u32>,
        formula: impl Into<String>,
    ) -> Result<Self> {
        if inverse3(&lattice).is_none() {
            return Err(Error::Geometry(format!(
                "degenerate lattice (det = {:e})",
                det3(&lattice)
            )));
        }
        if frac_coords.len() != atomic_numbers.len() || frac_coords.is_empty() {
            return Err(Error::Geometry(format!(
                "{} sites but {} atomic numbers",
                frac_coords.len(),
                atomic_numbers.len()
            )));
        }
        if let Some(z) = atomic_numbers
            .iter()
            .find(|&&z| z == 0 || z as usize > elements::MAX_Z)
        {
            return Err(Error::Geometry(format!("atomic number {z} out of range")));
        }
        if frac_coords.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Geometry("non-finite coordinate".into()));
        }
        let frac_coords = frac_coords
            .into_iter()
            .map(|f| [wrap(f[0]), wrap(f[1]), wrap(f[2])])
            .collect();
        Ok(Self {
            lattice,
            frac_coords,
            atomic_numbers,
            formula: formula.into(),
        })
    }

    /// Build from Cartesian positions (Angstrom).
    pub fn from_cartesian(
        lattice: Mat3,
        cart: &[[f64; 3]],
        atomic_numbers: Vec<u32>,
        formula: impl Into<String>,
    ) -> Result<Self> {
        let inv = inverse3(&lattice)
            .ok_or_else(|| Error::Geometry("degenerate lattice".into()))?;
        let frac = cart.iter().map(|&c| vec_mat(c, &inv)).collect();
        Self::new(lattice, frac, atomic_numbers, formula)
    }

    pub fn lattice(&self) -> &Mat3 {
        &self.lattice
    }

    pub fn frac_coords(&self) -> &[[f64; 3]] {
        &self.frac_coords
    }

    pub fn atomic_numbers(&self) -> &[u32] {
        &self.atomic_numbers
    }

    pub fn formula(&self) -> &str {
        &self.formula
    }

    pub fn num_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn cartesian(&self, i: usize) -> [f64; 3] {
        vec_mat(self.frac_coords[i], &self.lattice)
    }

    pub fn volume(&self) -> f64 {
        det3(&self.lattice).abs()
    }

    /// Apply a rotation (or any orthogonal map) `r` to every cell vector.
    pub fn transformed(&self, r: &Mat3) -> Self {
        let mut lattice = [[0.0; 3]; 3];
        for (out, row) in lattice.iter_mut().zip(&self.lattice) {
            for (k, o) in out.iter_mut().enumerate() {
                *o = r[k][0] * row[0] + r[k][1] * row[1] + r[k][2] * row[2];
            }
        }
        Self {
            lattice,
            ..self.clone()
        }
    }

    /// Shift every site by the same Cartesian vector.
    pub fn translated(&self, t: [f64; 3]) -> Self {
        let inv = inverse3(&self.lattice).expect("validated lattice");
        let df = vec_mat(t, &inv);
        let frac = self
            .frac_coords
            .iter()
            .map(|f| [f[0] + df[0], f[1] + df[1], f[2] + df[2]])
            .collect();
        Self::new(
            self.lattice,
            frac,
            self.atomic_numbers.clone(),
            self.formula.clone(),
        )
        .expect("translation keeps a valid structure")
    }

    /// Reorder sites so that new site `k` is old site `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            lattice: self.lattice,
            frac_coords: perm.iter().map(|&i| self.frac_coords[i]).collect(),
            atomic_numbers: perm.iter().map(|&i| self.atomic_numbers[i]).collect(),
            formula: self.formula.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("structure serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NativeStructure {
    lattice: Vec<f64>,
    frac_coords: Vec<[f64; 3]>,
    atomic_numbers: Vec<u32>,
    formula: String,
}

impl TryFrom<NativeStructure> for CrystalStructure {
    type Error = Error;

    fn try_from(n: NativeStructure) -> Result<Self> {
        if n.lattice.len() != 9 {
            return Err(Error::Geometry(format!(
                "lattice needs 9 values, got {}",
                n.lattice.len()
            )));
        }
        let l = &n.lattice;
        let lattice = [[l[0], l[1], l[2]], [l[3], l[4], l[5]], [l[6], l[7], l[8]]];
        CrystalStructure::new(lattice, n.frac_coords, n.atomic_numbers, n.formula)
    }
}

impl From<CrystalStructure> for NativeStructure {
    fn from(s: CrystalStructure) -> Self {
        NativeStructure {
            lattice: s.lattice.iter().flatten().copied().collect(),
            frac_coords: s.frac_coords,
            atomic_numbers: s.atomic_numbers,
            formula: s.formula,
        }
    }
}

/// Parse either a native JSON structure record or a CIF subset.
pub fn parse_structure(source: &str) -> Result<CrystalStructure> {
    if source.trim_start().starts_with('{') {
        serde_json::from_str(source).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    } else {
        parse_cif(source)
    }
}

/// Lattice from cell lengths and angles (degrees), `a` along x and `b` in
/// the xy plane.
pub fn lattice_from_parameters(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Mat3 {
    let cos = |deg: f64| {
        if deg == 90.0 {
            0.0
        } else {
            deg.to_radians().cos()
        }
    };
    let sin = |deg: f64| {
        if deg == 90.0 {
            1.0
        } else {
            deg.to_radians().sin()
        }
    };
    let (ca, cb, cg, sg) = (cos(alpha), cos(beta), cos(gamma), sin(gamma));
    let cx = c * cb;
    let cy = c * (ca - cb * cg) / sg;
    let cz = (c * c - cx * cx - cy * cy).max(0.0).sqrt();
    [[a, 0.0, 0.0], [b * cg, b * sg, 0.0], [cx, cy, cz]]
}

/// Split a CIF line into whitespace-separated values, honoring quotes.
fn cif_tokens(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '#' {
            break;
        } else if c == '\'' || c == '"' {
            chars.next();
            let mut tok = String::new();
            for ch in chars.by_ref() {
                if ch == c {
                    break;
                }
                tok.push(ch);
            }
            out.push(tok);
        } else {
            let mut tok = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() {
                    break;
                }
                tok.push(ch);
                chars.next();
            }
            out.push(tok);
        }
    }
    out
}

/// Numeric CIF value, dropping a trailing standard uncertainty like `(3)`.
fn cif_number(tok: &str, line: usize) -> Result<f64> {
    let core = tok.split('(').next().unwrap_or(tok);
    core.parse::<f64>().map_err(|_| Error::Parse {
        line,
        msg: format!("expected a number, found `{tok}`"),
    })
}

/// Element from a type symbol or site label: `Pb2+` -> `Pb`, `I1` -> `I`.
fn cif_element(tok: &str, line: usize) -> Result<u32> {
    let letters: String = tok.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    let two = letters.get(..2).filter(|s| s.as_bytes()[1].is_ascii_lowercase());
    let found = [Some(letters.as_str()), two, letters.get(..1)]
        .into_iter()
        .flatten()
        .find_map(elements::atomic_number);
    found.ok_or_else(|| Error::Parse {
        line,
        msg: format!("unknown element symbol `{tok}`"),
    })
}

const CELL_KEYS: [&str; 6] = [
    "_cell_length_a",
    "_cell_length_b",
    "_cell_length_c",
    "_cell_angle_alpha",
    "_cell_angle_beta",
    "_cell_angle_gamma",
];

pub fn parse_cif(source: &str) -> Result<CrystalStructure> {
    let lines: Vec<&str> = source.lines().collect();
    let mut cell: [Option<f64>; 6] = [None; 6];
    let mut formula: Option<String> = None;
    let mut sites: Vec<([f64; 3], u32)> = Vec::new();
    let mut atom_loop_line = 0;
    let mut i = 0;
    while i < lines.len() {
        let lineno = i + 1;
        let toks = cif_tokens(lines[i]);
        let Some(head) = toks.first() else {
            i += 1;
            continue;
        };
        let key = head.to_ascii_lowercase();
        if let Some(k) = CELL_KEYS.iter().position(|&c| c == key) {
            let val = toks.get(1).ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("{key} has no value"),
            })?;
            cell[k] = Some(cif_number(val, lineno)?);
            i += 1;
        } else if key == "_chemical_formula_sum" || key == "_chemical_formula_structural" {
            if formula.is_none() {
                formula = toks.get(1).map(|s| s.replace(' ', ""));
            }
            i += 1;
        } else if key == "loop_" {
            i += 1;
            let mut headers = Vec::new();
            while i < lines.len() {
                let t = cif_tokens(lines[i]);
                match t.first() {
                    Some(h) if h.starts_with('_') => {
                        headers.push(h.to_ascii_lowercase());
                        i += 1;
                    }
                    _ => break,
                }
            }
            let col = |name: &str| headers.iter().position(|h| h == name);
            let fx = col("_atom_site_fract_x");
            let is_atoms = fx.is_some();
            let mut values: Vec<(String, usize)> = Vec::new();
            while i < lines.len() {
                let t = cif_tokens(lines[i]);
                match t.first() {
                    None => {
                        i += 1;
                        if !values.is_empty() {
                            break;
                        }
                    }
                    Some(h)
                        if h.starts_with('_')
                            || h.eq_ignore_ascii_case("loop_")
                            || h.starts_with("data_") =>
                    {
                        break
                    }
                    Some(_) => {
                        values.extend(t.into_iter().map(|v| (v, i + 1)));
                        i += 1;
                    }
                }
            }
            if !is_atoms {
                continue;
            }
            atom_loop_line = lineno;
            let (fy, fz) = (col("_atom_site_fract_y"), col("_atom_site_fract_z"));
            let sym = col("_atom_site_type_symbol").or(col("_atom_site_label"));
            let (Some(fx), Some(fy), Some(fz), Some(sym)) = (fx, fy, fz, sym) else {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "atom_site loop lacks fract_x/y/z or a symbol column".into(),
                });
            };
            if values.len() % headers.len() != 0 {
                return Err(Error::Parse {
                    line: values.last().map_or(lineno, |v| v.1),
                    msg: "atom_site loop row has the wrong number of values".into(),
                });
            }
            for row in values.chunks(headers.len()) {
                let line = row[0].1;
                let f = [
                    cif_number(&row[fx].0, line)?,
                    cif_number(&row[fy].0, line)?,
                    cif_number(&row[fz].0, line)?,
                ];
                sites.push((f, cif_element(&row[sym].0, line)?));
            }
        } else {
            i += 1;
        }
    }
    let end = lines.len();
    let mut params = [0.0; 6];
    for (k, v) in cell.iter().enumerate() {
        params[k] = v.ok_or_else(|| Error::Parse {
            line: end,
            msg: format!("missing {}", CELL_KEYS[k]),
        })?;
    }
    if sites.is_empty() {
        return Err(Error::Parse {
            line: end,
            msg: "no atom_site loop with fractional coordinates".into(),
        });
    }
    let lattice = lattice_from_parameters(
        params[0], params[1], params[2], params[3], params[4], params[5],
    );
    if inverse3(&lattice).is_none() || params[..3].iter().any(|&x| x <= 0.0) {
        return Err(Error::Parse {
            line: end,
            msg: "cell parameters give a non-invertible lattice".into(),
        });
    }
    let formula = formula.unwrap_or_else(|| composition_formula(sites.iter().map(|s| s.1)));
    let (frac, zs): (Vec<_>, Vec<_>) = sites.into_iter().unzip();
    CrystalStructure::new(lattice, frac, zs, formula).map_err(|e| Error::Parse {
        line: atom_loop_line,
        msg: e.to_string(),
    })
}

/// Formula string in order of first appearance, e.g. `CsPbI3`.
pub fn composition_formula(zs: impl IntoIterator<Item = u32>) -> String {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for z in zs {
        match counts.iter_mut().find(|c| c.0 == z) {
            Some(c) => c.1 += 1,
            None => counts.push((z, 1)),
        }
    }
    counts
        .into_iter()
        .map(|(z, n)| {
            let s = elements::symbol(z).unwrap_or("?");
            if n == 1 {
                s.to_string()
            } else {
                format!("{s}{n}")
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const CSPBI3_CIF: &str = "data_CsPbI3
_chemical_formula_sum 'Cs Pb I3'
_cell_length_a 6.2894(3)
_cell_length_b 6.2894
_cell_length_c 6.2894
_cell_angle_alpha 90
_cell_angle_beta 90.0
_cell_angle_gamma 90
loop_
_atom_site_label
_atom_site_type_symbol
_atom_site_fract_x
_atom_site_fract_y
_atom_site_fract_z
_atom_site_occupancy
Cs1 Cs+ 0.5 0.5 0.5 1
Pb1 Pb2+ 0.0 0.0 0.0 1
I1 I- 0.5 0.0 0.0 1
I2 I- 0.0 0.5 0.0 1
I3 I- 0.0 0.0 0.5 1
";

    #[test]
    fn cubic_cell_parameters() {
        let l = lattice_from_parameters(5.0, 5.0, 5.0, 90.0, 90.0, 90.0);
        assert_eq!(l, [[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]]);
    }

    #[test]
    fn hexagonal_cell_lengths_and_angles() {
        let l = lattice_from_parameters(3.0, 3.0, 5.0, 90.0, 90.0, 120.0);
        let dot = |u: [f64; 3], v: [f64; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
        assert!((norm3(l[1]) - 3.0).abs() < 1e-12);
        assert!((norm3(l[2]) - 5.0).abs() < 1e-12);
        assert!((dot(l[0], l[1]) / 9.0 + 0.5).abs() < 1e-12);
        assert!(dot(l[0], l[2]).abs() < 1e-12);
    }

    #[test]
    fn parses_cif_subset() {
        let s = parse_structure(CSPBI3_CIF).unwrap();
        assert_eq!(s.num_atoms(), 5);
        assert_eq!(s.atomic_numbers(), &[55, 82, 53, 53, 53]);
        assert_eq!(s.formula(), "CsPbI3");
        assert_eq!(s.lattice()[0][0], 6.2894);
    }

    #[test]
    fn unknown_element_and_missing_cell_are_parse_errors() {
        let bad = CSPBI3_CIF.replace("Cs1 Cs+", "Xx1 Xx");
        let err = parse_structure(&bad).unwrap_err();
        assert!(
            matches!(&err, Error::Parse { line: 16, msg } if msg.contains("Xx")),
            "{err}"
        );
        let no_cell = CSPBI3_CIF.replace("_cell_length_c 6.2894\n", "");
        let err = parse_structure(&no_cell).unwrap_err();
        assert!(err.to_string().contains("_cell_length_c"), "{err}");
        let flat = CSPBI3_CIF.replace("_cell_angle_gamma 90", "_cell_angle_gamma 0");
        assert!(matches!(parse_structure(&flat), Err(Error::Parse { .. })));
    }

    #[test]
    fn native_json_round_trip_and_wrapping() {
        let s = CrystalStructure::new(
            [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]],
            vec![[-0.25, 1.0, 0.5]],
            vec![55],
            "Cs",
        )
        .unwrap();
        assert_eq!(s.frac_coords()[0], [0.75, 0.0, 0.5]);
        let back = parse_structure(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let degenerate = r#"{"lattice":[1,0,0,2,0,0,0,0,1],"frac_coords":[[0,0,0]],"atomic_numbers":[1],"formula":"H"}"#;
        assert!(parse_structure(degenerate).is_err());
    }

    #[test]
    fn element_from_labels() {
        assert_eq!(cif_element("Pb2+", 1).unwrap(), 82);
        assert_eq!(cif_element("I1", 1).unwrap(), 53);
        assert_eq!(cif_element("O", 1).unwrap(), 8);
        assert!(cif_element("Xx", 1).is_err());
    }
}
