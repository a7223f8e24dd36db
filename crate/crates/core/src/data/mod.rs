//! Tokens, corpora and synthetic sources.

pub mod markov;
pub mod vocab;

use std::path::Path;

pub use markov::MarkovSource;
pub use vocab::{Specials, Vocabulary};

use crate::error::{Bd3Error, Result};

/// Token ids grouped into equal blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    block_size: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, block_size: usize) -> Result<Self> {
        if block_size == 0 || !ids.len().is_multiple_of(block_size) {
            return Err(Bd3Error::config(format!(
                "block size {block_size} must divide sequence length {}",
                ids.len()
            )));
        }
        Ok(Self { ids, block_size })
    }

    /// Like `new`, additionally rejecting the mask id.
    pub fn clean(ids: Vec<usize>, block_size: usize, vocab_size: usize) -> Result<Self> {
        check_clean(&ids, vocab_size)?;
        Self::new(ids, block_size)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.ids.len() / self.block_size
    }

    pub fn block(&self, b: usize) -> &[usize] {
        &self.ids[b * self.block_size..(b + 1) * self.block_size]
    }
}

/// Rejects ids outside `0..vocab_size - 1`, i.e. out of range or equal to the mask.
pub fn check_clean(ids: &[usize], vocab_size: usize) -> Result<()> {
    let mask = vocab_size - 1;
    match ids.iter().position(|&i| i >= mask) {
        Some(p) if ids[p] == mask => Err(Bd3Error::Data(format!("mask id at position {p} in clean data"))),
        Some(p) => Err(Bd3Error::Vocabulary(format!(
            "id {} at position {p} outside vocabulary of {vocab_size}",
            ids[p]
        ))),
        None => Ok(()),
    }
}

/// Concatenates `docs` and cuts consecutive chunks of exactly `context` tokens;
/// the trailing remainder is dropped.
pub fn wrap_corpus(docs: &[Vec<usize>], context: usize) -> Result<Vec<Vec<usize>>> {
    if context == 0 {
        return Err(Bd3Error::config("context length must be positive"));
    }
    let all: Vec<usize> = docs.iter().flatten().copied().collect();
    Ok(all.chunks_exact(context).map(<[usize]>::to_vec).collect())
}

/// Reads UTF-8 documents from a file or every file of a directory (sorted by
/// name). With `per_line`, each nonempty line is its own document.
pub fn load_documents(path: &Path, per_line: bool) -> Result<Vec<String>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path)? {
            let p = entry?.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut docs = Vec::new();
    for f in files {
        let text = std::fs::read_to_string(&f)?;
        if per_line {
            docs.extend(text.lines().filter(|l| !l.is_empty()).map(String::from));
        } else {
            docs.push(text);
        }
    }
    Ok(docs)
}
