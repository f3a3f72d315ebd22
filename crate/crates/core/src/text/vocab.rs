use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::graph::elements;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Split a layer string into word pieces.
///
/// Whitespace separates pieces, every punctuation character is its own
/// piece, digit runs are kept together, and a letter run is broken into
/// element symbols when it parses completely as a sequence of them.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = text.trim().chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c.is_ascii_digit() {
            let mut run = String::new();
            while let Some(&d) = chars.peek().filter(|d| d.is_ascii_digit()) {
                run.push(d);
                chars.next();
            }
            out.push(run);
        } else if c.is_alphabetic() {
            let mut run = String::new();
            while let Some(&d) = chars.peek().filter(|d| d.is_alphabetic()) {
                run.push(d);
                chars.next();
            }
            match elements::split_symbols(&run) {
                Some(parts) => out.extend(parts.into_iter().map(str::to_string)),
                None => out.push(run),
            }
        } else {
            out.push(c.to_string());
            chars.next();
        }
    }
    out
}

/// Dense token ids: `[PAD]`, `[UNK]`, `[CLS]`, then corpus tokens by
/// descending count and lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in split_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    fn from_tokens(rest: impl IntoIterator<Item = String>) -> Self {
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(rest)
            .collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[CLS]` followed by the text's token ids, truncated to `max_tokens`
    /// and right-padded with `[PAD]`.
    pub fn encode(&self, text: &str, max_tokens: usize) -> Vec<u32> {
        let mut ids = vec![CLS];
        ids.extend(split_tokens(text).iter().map(|t| self.id(t)));
        ids.truncate(max_tokens.max(1));
        ids.resize(max_tokens.max(1), PAD);
        ids
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Parse {
                line: n + 1,
                msg: format!("expected `token<TAB>id`, found `{line}`"),
            };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(bad)?;
            let id: usize = id.parse().map_err(|_| bad())?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        let dense = entries.iter().enumerate().all(|(i, e)| e.0 == i);
        let specials_ok = entries
            .iter()
            .take(3)
            .map(|e| e.1.as_str())
            .eq(SPECIALS.iter().copied());
        if !dense || !specials_ok {
            return Err(Error::Data(
                "vocabulary ids must be dense and start with [PAD], [UNK], [CLS]".into(),
            ));
        }
        Ok(Self::from_tokens(entries.into_iter().skip(3).map(|e| e.1)))
    }

    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3] != SPECIALS.map(String::from) {
            return Err(Error::Data("vocabulary must start with the special tokens".into()));
        }
        Ok(Self::from_tokens(tokens.into_iter().skip(3)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitting_rules() {
        assert_eq!(split_tokens("TiO2"), ["Ti", "O", "2"]);
        assert_eq!(split_tokens("Spiro-MeOTAD"), ["Spiro", "-", "MeOTAD"]);
        assert_eq!(split_tokens("  mp-TiO2 / Au "), ["mp", "-", "Ti", "O", "2", "/", "Au"]);
        assert_eq!(split_tokens("C60"), ["C", "60"]);
        assert!(split_tokens("   ").is_empty());
    }

    #[test]
    fn encode_examples() {
        let v = Vocab::build(["TiO2", "SnO2"], 1);
        let ids = v.encode("TiO2", 6);
        assert_eq!(&ids[..4], &[CLS, v.id("Ti"), v.id("O"), v.id("2")]);
        assert_eq!(&ids[4..], &[PAD, PAD]);
        assert_eq!(v.encode("", 4), vec![CLS, PAD, PAD, PAD]);
        let unk = v.encode("ZZZ9qq", 4);
        assert_eq!(unk, vec![CLS, UNK, UNK, UNK]);
        assert_eq!(v.encode("TiO2 TiO2", 3).len(), 3);
    }

    #[test]
    fn build_orders_and_filters() {
        let v = Vocab::build(["a a b"], 2);
        assert_ne!(v.id("a"), UNK);
        assert_eq!(v.id("b"), UNK);
        let v = Vocab::build(["b a", "a c c"], 1);
        // a:2, c:2, b:1
        assert_eq!(&v.tokens()[3..], &["a", "c", "b"]);
        assert_eq!(v, Vocab::build(["b a", "a c c"], 1));
    }

    #[test]
    fn tsv_round_trip() {
        let v = Vocab::build(["Spiro-MeOTAD", "PEDOT:PSS", "TiO2"], 1);
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        let back = Vocab::read_tsv(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        for t in v.tokens() {
            assert_eq!(back.id(t), v.id(t));
        }
        assert!(Vocab::read_tsv("[PAD]\t0\nx\t5\n".as_bytes()).is_err());
    }
}
