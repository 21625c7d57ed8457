use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::special;
use crate::error::{Error, Result};

/// Whitespace-token vocabulary with the reserved ids of [`special`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut tokens: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; special::COUNT];
        for (t, f) in entries {
            tokens.push(t);
            freqs.push(f);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, freqs, index })
    }

    /// Counts whitespace tokens over documents, sorts by descending count
    /// with ties broken lexicographically, drops tokens seen fewer than
    /// `min_count` times and keeps at most `max_size` ids in total.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a str>, min_count: u64, max_size: Option<usize>) -> Result<Self> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for doc in docs {
            for tok in doc.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !special::NAMES.contains(t))
            .map(|(t, c)| (t.to_string(), c))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        if let Some(max) = max_size {
            entries.truncate(max.saturating_sub(special::COUNT));
        }
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(special::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn freq(&self, id: usize) -> u64 {
        self.freqs.get(id).copied().unwrap_or(0)
    }

    pub fn encode(&self, doc: &str) -> Vec<usize> {
        doc.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, skipping padding.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != special::PAD)
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Ordinary-token ids by descending corpus frequency.
    pub fn most_frequent(&self, k: usize) -> Vec<usize> {
        // ids are already sorted by frequency after the reserved block
        (special::COUNT..self.len()).take(k).collect()
    }

    /// One `token<TAB>count` line per ordinary token, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in special::COUNT..self.len() {
            s.push_str(&self.tokens[i]);
            s.push('\t');
            s.push_str(&self.freqs[i].to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, freq) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Data(format!("vocab line {}: expected token<TAB>count", ln + 1)))?;
            let freq = freq
                .parse()
                .map_err(|e| Error::Data(format!("vocab line {}: {e}", ln + 1)))?;
            entries.push((tok.to_string(), freq));
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_and_min_count() {
        let v = Vocabulary::build(["a a b"], 1, None).unwrap();
        assert_eq!(v.len(), special::COUNT + 2);
        assert_eq!((v.id("a"), v.freq(v.id("a"))), (5, 2));
        assert_eq!((v.id("b"), v.freq(v.id("b"))), (6, 1));
        let v = Vocabulary::build(["a a b"], 2, None).unwrap();
        assert_eq!(v.len(), special::COUNT + 1);
        assert_eq!(v.id("b"), special::UNK);
    }

    #[test]
    fn ties_break_lexicographically_and_size_caps() {
        let v = Vocabulary::build(["z y x y z w"], 1, None).unwrap();
        let order: Vec<&str> = (5..v.len()).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(order, ["y", "z", "w", "x"]);
        let v = Vocabulary::build(["z y x y z w"], 1, Some(7)).unwrap();
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn text_round_trip_and_empty_corpus() {
        let v = Vocabulary::build(["the cat sat on the mat", "the end"], 1, None).unwrap();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
        assert!(Vocabulary::build(["", "  "], 1, None).is_err());
    }

    #[test]
    fn encode_decode() {
        let v = Vocabulary::build(["a b c"], 1, None).unwrap();
        assert_eq!(v.decode(&v.encode("c a b")), "c a b");
        assert_eq!(v.encode("a q"), [v.id("a"), special::UNK]);
    }
}
