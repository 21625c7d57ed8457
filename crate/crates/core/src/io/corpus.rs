use std::fs;
use std::path::Path;

use super::special;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Fixed-length sequences, each framed `<s> ... </s>` and right-padded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusDataset {
    pub n: usize,
    ids: Vec<usize>,
}

impl CorpusDataset {
    pub fn from_sequences(n: usize, seqs: &[Vec<usize>]) -> Result<Self> {
        let mut ids = Vec::with_capacity(n * seqs.len());
        for s in seqs {
            if s.len() != n {
                return Err(Error::Data(format!("sequence of length {} in a dataset of length {n}", s.len())));
            }
            ids.extend_from_slice(s);
        }
        Ok(Self { n, ids })
    }

    pub fn len(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.ids.len() / self.n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq(&self, i: usize) -> &[usize] {
        &self.ids[i * self.n..(i + 1) * self.n]
    }

    /// Flat ids and padding flags for the listed sequences.
    pub fn batch(&self, which: &[usize]) -> (Vec<usize>, Vec<bool>) {
        let mut ids = Vec::with_capacity(which.len() * self.n);
        for &i in which {
            ids.extend_from_slice(self.seq(i));
        }
        let pad = ids.iter().map(|&i| i == special::PAD).collect();
        (ids, pad)
    }

    pub fn max_id(&self) -> Option<usize> {
        self.ids.iter().copied().max()
    }
}

/// Frames one document and cuts it into sequences of length `n`; each
/// sequence holds up to `n - 2` document tokens.
pub fn encode_document(tokens: &[usize], n: usize) -> Result<Vec<Vec<usize>>> {
    if n < 3 {
        return Err(Error::Config(format!("sequence length {n} leaves no room for tokens")));
    }
    Ok(tokens
        .chunks(n - 2)
        .map(|chunk| {
            let mut s = Vec::with_capacity(n);
            s.push(special::BOS);
            s.extend_from_slice(chunk);
            s.push(special::EOS);
            s.resize(n, special::PAD);
            s
        })
        .collect())
}

/// One document per line; blank lines are skipped.
pub fn encode_corpus<'a>(docs: impl IntoIterator<Item = &'a str>, vocab: &Vocabulary, n: usize) -> Result<CorpusDataset> {
    let mut seqs = Vec::new();
    for doc in docs {
        let toks = vocab.encode(doc);
        if !toks.is_empty() {
            seqs.extend(encode_document(&toks, n)?);
        }
    }
    CorpusDataset::from_sequences(n, &seqs)
}

/// Reads a UTF-8 corpus file.
pub fn read_corpus(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
