//! Seeded synthetic corpora: an order-2 Markov grammar for pre-training and
//! a keyword classification task for fine-tuning. Both draw from the same
//! symbol inventory `s000, s001, ...`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{encode_document, CorpusDataset};
use super::special;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

/// Candidate successors per two-symbol context.
pub const SUCCESSORS: usize = 6;
/// Probability of the preferred successor; the rest share the remainder.
pub const PREFERRED_P: f64 = 0.8;
/// The symbol two back enters only through `a % CONTEXT_CLASSES`, which
/// keeps the number of distinct contexts small enough to learn at desk scale.
pub const CONTEXT_CLASSES: usize = 2;
/// Keywords per class in the classification task.
pub const KEYWORDS_PER_CLASS: usize = 5;

pub fn symbol(i: usize) -> String {
    format!("s{i:03}")
}

/// Fixed seeded order-2 Markov chain. The successor set of `(a, b)` is a
/// table row keyed by `(a % CONTEXT_CLASSES, b)`.
#[derive(Debug, Clone)]
pub struct TrigramGrammar {
    pub symbols: usize,
    table: Vec<[u16; SUCCESSORS]>,
}

impl TrigramGrammar {
    pub fn new(symbols: usize, seed: u64) -> Result<Self> {
        if !(SUCCESSORS..=u16::MAX as usize).contains(&symbols) {
            return Err(Error::Config(format!("grammar needs between {SUCCESSORS} and 65535 symbols, got {symbols}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..CONTEXT_CLASSES * symbols)
            .map(|_| {
                let picks = rand::seq::index::sample(&mut rng, symbols, SUCCESSORS);
                let mut row = [0u16; SUCCESSORS];
                for (slot, s) in row.iter_mut().zip(picks.iter()) {
                    *slot = s as u16;
                }
                row
            })
            .collect();
        Ok(Self { symbols, table })
    }

    fn row(&self, a: usize, b: usize) -> &[u16; SUCCESSORS] {
        &self.table[(a % CONTEXT_CLASSES) * self.symbols + b]
    }

    /// Successors of `(a, b)` with their probabilities, preferred first.
    pub fn successors(&self, a: usize, b: usize) -> Vec<(usize, f64)> {
        let rest = (1.0 - PREFERRED_P) / (SUCCESSORS - 1) as f64;
        self.row(a, b)
            .iter()
            .enumerate()
            .map(|(i, &s)| (s as usize, if i == 0 { PREFERRED_P } else { rest }))
            .collect()
    }

    /// Entropy in bits of the next symbol given the two before it.
    pub fn conditional_entropy_bits() -> f64 {
        let rest = (1.0 - PREFERRED_P) / (SUCCESSORS - 1) as f64;
        -(PREFERRED_P * PREFERRED_P.log2() + (SUCCESSORS - 1) as f64 * rest * rest.log2())
    }

    pub fn sample_document<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        let mut doc: Vec<usize> = Vec::with_capacity(len);
        for t in 0..len {
            let next = if t < 2 {
                rng.random_range(0..self.symbols)
            } else {
                let row = self.row(doc[t - 2], doc[t - 1]);
                if rng.random::<f64>() < PREFERRED_P {
                    row[0] as usize
                } else {
                    row[rng.random_range(1..SUCCESSORS)] as usize
                }
            };
            doc.push(next);
        }
        doc
    }
}

/// `docs` lines of grammar text, lengths uniform in `min_len..=max_len`.
pub fn trigram_corpus(docs: usize, symbols: usize, min_len: usize, max_len: usize, seed: u64) -> Result<String> {
    if min_len == 0 || max_len < min_len {
        return Err(Error::Config(format!("bad document length range {min_len}..={max_len}")));
    }
    let g = TrigramGrammar::new(symbols, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut out = String::new();
    for _ in 0..docs {
        let len = rng.random_range(min_len..=max_len);
        let words: Vec<String> = g.sample_document(&mut rng, len).into_iter().map(symbol).collect();
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// Keyword symbols of class 0 and class 1; the remaining symbols are filler.
pub fn keyword_sets() -> (Vec<String>, Vec<String>) {
    let k = KEYWORDS_PER_CLASS;
    ((0..k).map(symbol).collect(), (k..2 * k).map(symbol).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    pub text: String,
}

/// Balanced two-class task: filler symbols plus one to three keywords of
/// the document's class at random positions.
pub fn separable_classification(count: usize, symbols: usize, seed: u64) -> Result<Vec<Example>> {
    if symbols <= 2 * KEYWORDS_PER_CLASS {
        return Err(Error::Config(format!("classification needs more than {} symbols", 2 * KEYWORDS_PER_CLASS)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let filler = 2 * KEYWORDS_PER_CLASS..symbols;
    Ok(labels
        .into_iter()
        .map(|label| {
            let mut toks: Vec<usize> = (0..rng.random_range(10..=30)).map(|_| rng.random_range(filler.clone())).collect();
            for _ in 0..rng.random_range(1..=3) {
                let kw = label * KEYWORDS_PER_CLASS + rng.random_range(0..KEYWORDS_PER_CLASS);
                let at = rng.random_range(0..=toks.len());
                toks.insert(at, kw);
            }
            Example {
                label,
                text: toks.into_iter().map(symbol).collect::<Vec<_>>().join(" "),
            }
        })
        .collect())
}

/// One `label<TAB>text` line per example.
pub fn task_to_tsv(examples: &[Example]) -> String {
    examples.iter().map(|e| format!("{}\t{}\n", e.label, e.text)).collect()
}

pub fn parse_task(text: &str) -> Result<Vec<Example>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (label, body) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("task line {}: expected `label<TAB>text`", i + 1)))?;
            let label = label
                .trim()
                .parse()
                .map_err(|e| Error::Data(format!("task line {}: bad label `{label}`: {e}", i + 1)))?;
            Ok(Example {
                label,
                text: body.to_string(),
            })
        })
        .collect()
}

/// One sequence per example, truncated to fit `n`.
pub fn encode_task(examples: &[Example], vocab: &Vocabulary, n: usize) -> Result<(CorpusDataset, Vec<usize>)> {
    let mut seqs = Vec::with_capacity(examples.len());
    for e in examples {
        let first = encode_document(&vocab.encode(&e.text), n)?.into_iter().next();
        seqs.push(first.unwrap_or_else(|| {
            let mut s = vec![special::BOS, special::EOS];
            s.resize(n, special::PAD);
            s
        }));
    }
    let labels = examples.iter().map(|e| e.label).collect();
    Ok((CorpusDataset::from_sequences(n, &seqs)?, labels))
}

/// Perplexity `exp(H)` of the unigram distribution of ordinary tokens.
pub fn unigram_perplexity(data: &CorpusDataset) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for i in 0..data.len() {
        for &t in data.seq(i) {
            if !special::is_special(t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let total: usize = counts.values().sum();
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}
