use std::collections::HashMap;
use std::path::Path;

use crate::error::{Bd3Error, Result};

pub const MASK_SYMBOL: &str = "<mask>";
pub const BOS_SYMBOL: &str = "<bos>";
pub const EOS_SYMBOL: &str = "<eos>";
pub const UNK_SYMBOL: &str = "<unk>";

/// Character vocabulary whose last id is reserved for the mask token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    bos: Option<usize>,
    eos: Option<usize>,
    unk: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Specials {
    pub bos: bool,
    pub eos: bool,
    pub unk: bool,
}

impl Vocabulary {
    /// Builds from an ordered symbol list (without the mask entry).
    pub fn from_symbols<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut index = HashMap::new();
        let mut list = Vec::with_capacity(symbols.len() + 1);
        for s in symbols {
            let s = s.as_ref().to_string();
            if s == MASK_SYMBOL {
                return Err(Bd3Error::Vocabulary("mask symbol is reserved".into()));
            }
            if index.insert(s.clone(), list.len()).is_some() {
                return Err(Bd3Error::Vocabulary(format!("duplicate symbol {s:?}")));
            }
            list.push(s);
        }
        let find = |name: &str| index.get(name).copied();
        let (bos, eos, unk) = (find(BOS_SYMBOL), find(EOS_SYMBOL), find(UNK_SYMBOL));
        list.push(MASK_SYMBOL.to_string());
        Ok(Self {
            symbols: list,
            index,
            bos,
            eos,
            unk,
        })
    }

    /// Sorted distinct characters of `text`, preceded by the requested specials.
    pub fn from_text(text: &str, specials: Specials) -> Result<Self> {
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        let mut symbols: Vec<String> = Vec::new();
        for (on, name) in [(specials.bos, BOS_SYMBOL), (specials.eos, EOS_SYMBOL), (specials.unk, UNK_SYMBOL)] {
            if on {
                symbols.push(name.to_string());
            }
        }
        symbols.extend(chars.into_iter().map(String::from));
        Self::from_symbols(&symbols)
    }

    /// `n` plain symbols `a`, `b`, ... for synthetic sources.
    pub fn synthetic(n: usize) -> Result<Self> {
        let symbols: Vec<String> = (0..n)
            .map(|i| char::from_u32('a' as u32 + i as u32).map_or_else(|| format!("s{i}"), String::from))
            .collect();
        Self::from_symbols(&symbols)
    }

    /// Total ids including the mask.
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask_id(&self) -> usize {
        self.symbols.len() - 1
    }

    pub fn bos_id(&self) -> Option<usize> {
        self.bos
    }

    pub fn eos_id(&self) -> Option<usize> {
        self.eos
    }

    pub fn unk_id(&self) -> Option<usize> {
        self.unk
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn tokenize_chars(&self, text: &str, add_bos: bool, add_eos: bool) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(text.len() + 2);
        if add_bos {
            out.push(self.bos.ok_or_else(|| Bd3Error::Vocabulary("no BOS symbol".into()))?);
        }
        let mut buf = [0u8; 4];
        for c in text.chars() {
            match self.index.get(c.encode_utf8(&mut buf) as &str) {
                Some(&id) => out.push(id),
                None => out.push(self.unk.ok_or_else(|| Bd3Error::Vocabulary(format!("unknown character {c:?}")))?),
            }
        }
        if add_eos {
            out.push(self.eos.ok_or_else(|| Bd3Error::Vocabulary("no EOS symbol".into()))?);
        }
        Ok(out)
    }

    /// Concatenates symbols; BOS/EOS are dropped and the mask renders as `_`.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            if Some(id) == self.bos || Some(id) == self.eos {
                continue;
            }
            if id == self.mask_id() {
                s.push('_');
            } else if let Some(sym) = self.symbols.get(id) {
                s.push_str(sym);
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for s in &self.symbols {
            text.push_str(&escape(s));
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut symbols: Vec<String> = text.lines().map(unescape).collect();
        if symbols.pop().as_deref() != Some(MASK_SYMBOL) {
            return Err(Bd3Error::Vocabulary(format!(
                "{} must end with the {MASK_SYMBOL} entry",
                path.display()
            )));
        }
        Self::from_symbols(&symbols)
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\t', "\\t")
        .replace('\r', "\\r")
}

fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::from_symbols(&["a", "b"]).unwrap();
        assert_eq!(v.tokenize_chars("", false, false).unwrap(), Vec::<usize>::new());
        assert_eq!(v.tokenize_chars("ab", false, false).unwrap(), vec![0, 1]);
        assert_eq!(v.mask_id(), 2);
        assert!(matches!(v.tokenize_chars("abc", false, false), Err(Bd3Error::Vocabulary(_))));
    }

    #[test]
    fn round_trip_text() {
        let text = "the quick brown fox\njumps over\tthe lazy dog \\ ok";
        let v = Vocabulary::from_text(text, Specials::default()).unwrap();
        let ids = v.tokenize_chars(text, false, false).unwrap();
        assert!(ids.iter().all(|&i| i != v.mask_id()));
        assert_eq!(v.detokenize(&ids), text);
    }

    #[test]
    fn unk_and_specials() {
        let v = Vocabulary::from_text(
            "ab",
            Specials {
                bos: true,
                eos: true,
                unk: true,
            },
        )
        .unwrap();
        let ids = v.tokenize_chars("az", true, true).unwrap();
        assert_eq!(ids.first().copied(), v.bos_id());
        assert_eq!(ids.last().copied(), v.eos_id());
        assert_eq!(ids[2], v.unk_id().unwrap());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_text(
            "a\nb\\c",
            Specials {
                eos: true,
                ..Default::default()
            },
        )
        .unwrap();
        v.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with("<mask>\n"));
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
