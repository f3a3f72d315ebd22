/// Element symbols indexed by atomic number minus one.
pub const SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

pub const MAX_Z: usize = 118;

pub fn atomic_number(symbol: &str) -> Option<u32> {
    SYMBOLS
        .iter()
        .position(|&s| s == symbol)
        .map(|i| i as u32 + 1)
}

pub fn symbol(z: u32) -> Option<&'static str> {
    (1..=MAX_Z as u32)
        .contains(&z)
        .then(|| SYMBOLS[z as usize - 1])
}

/// Split `word` into element symbols if the whole word parses as a
/// sequence of them (e.g. `"TiO"` -> `["Ti", "O"]`).
pub fn split_symbols(word: &str) -> Option<Vec<&str>> {
    fn go<'a>(rest: &'a str, out: &mut Vec<&'a str>) -> bool {
        if rest.is_empty() {
            return true;
        }
        for len in [2, 1] {
            if rest.len() < len || !rest.is_char_boundary(len) {
                continue;
            }
            let head = &rest[..len];
            if atomic_number(head).is_some() {
                out.push(head);
                if go(&rest[len..], out) {
                    return true;
                }
                out.pop();
            }
        }
        false
    }
    let mut out = Vec::new();
    (!word.is_empty() && go(word, &mut out)).then_some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups() {
        assert_eq!(atomic_number("Cs"), Some(55));
        assert_eq!(atomic_number("Pb"), Some(82));
        assert_eq!(atomic_number("I"), Some(53));
        assert_eq!(atomic_number("Og"), Some(118));
        assert_eq!(atomic_number("Xx"), None);
        assert_eq!(symbol(1), Some("H"));
        assert_eq!(symbol(0), None);
        assert_eq!(symbol(119), None);
    }

    #[test]
    fn symbol_splitting_backtracks() {
        assert_eq!(split_symbols("TiO"), Some(vec!["Ti", "O"]));
        assert_eq!(split_symbols("CO"), Some(vec!["C", "O"]));
        // "Sn" then "O" rather than failing on "S" + "nO"
        assert_eq!(split_symbols("SnO"), Some(vec!["Sn", "O"]));
        assert_eq!(split_symbols("Spiro"), None);
        assert_eq!(split_symbols("MeOTAD"), None);
        assert_eq!(split_symbols(""), None);
    }
}
