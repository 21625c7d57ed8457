//! Token corruption for masked-language-model training, and the encoder
//! view that drops `[MASK]` slots for two-stage models.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::special;

/// What happened to one position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    None,
    Masked,
    Replaced,
    Kept,
}

impl Kind {
    pub fn code(self) -> char {
        match self {
            Kind::None => 'N',
            Kind::Masked => 'M',
            Kind::Replaced => 'R',
            Kind::Kept => 'K',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        Some(match c {
            'N' => Kind::None,
            'M' => Kind::Masked,
            'R' => Kind::Replaced,
            'K' => Kind::Kept,
            _ => return None,
        })
    }

    pub fn is_target(self) -> bool {
        self != Kind::None
    }
}

/// Split of corrupted positions into mask / random / keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strategy {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Strategy {
    pub const DEFAULT: Strategy = Strategy::new(0.8, 0.1, 0.1);
    pub const MASK_ONLY: Strategy = Strategy::new(1.0, 0.0, 0.0);

    pub const fn new(mask: f64, random: f64, keep: f64) -> Self {
        Self { mask, random, keep }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.mask, self.random, self.keep];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "masking strategy {self} must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }
}

impl Default for Strategy {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}", self.mask, self.random, self.keep)
    }
}

/// Accepts `0.8,0.1,0.1`, `0.8-0.1-0.1` or percentages like `80-10-10`.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split([',', '-', '/'])
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad strategy `{s}`: {e}")))?;
        let [a, b, c] = parts[..] else {
            return Err(Error::Config(format!("strategy `{s}` needs three parts")));
        };
        let scale = if a + b + c > 1.5 { 100.0 } else { 1.0 };
        let st = Strategy::new(a / scale, b / scale, c / scale);
        st.validate()?;
        Ok(st)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub rate: f64,
    pub strategy: Strategy,
    /// Fixed per-sequence category counts instead of per-position draws.
    pub deterministic_counts: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            strategy: Strategy::DEFAULT,
            deterministic_counts: true,
        }
    }
}

impl MaskingConfig {
    pub fn new(rate: f64, strategy: Strategy) -> Self {
        Self {
            rate,
            strategy,
            deterministic_counts: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("masking rate {} outside [0, 1]", self.rate)));
        }
        self.strategy.validate()
    }

    /// Category counts for a row with `n_elig` eligible positions. The total
    /// is `round(r * n_elig)`; mask and random counts are rounded and keep
    /// takes the remainder so the three always add up to the total.
    pub fn counts(&self, n_elig: usize) -> Counts {
        let x = self.rate * n_elig as f64;
        let total = x.round() as usize;
        let mask = ((self.strategy.mask * x).round() as usize).min(total);
        let random = ((self.strategy.random * x).round() as usize).min(total - mask);
        Counts {
            mask,
            random,
            keep: total - mask - random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub mask: usize,
    pub random: usize,
    pub keep: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.mask + self.random + self.keep
    }
}

/// Set of corruption kinds used to select loss targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Filter {
    pub masked: bool,
    pub replaced: bool,
    pub kept: bool,
}

impl Filter {
    pub const ALL: Filter = Filter {
        masked: true,
        replaced: true,
        kept: true,
    };
    pub const MASKED: Filter = Filter {
        masked: true,
        replaced: false,
        kept: false,
    };
    pub const REPLACED: Filter = Filter {
        masked: false,
        replaced: true,
        kept: false,
    };
    pub const KEPT: Filter = Filter {
        masked: false,
        replaced: false,
        kept: true,
    };
    /// Positions that stay visible to a two-stage encoder.
    pub const UNMASKED_TARGETS: Filter = Filter {
        masked: false,
        replaced: true,
        kept: true,
    };

    pub fn contains(&self, k: Kind) -> bool {
        match k {
            Kind::None => false,
            Kind::Masked => self.masked,
            Kind::Replaced => self.replaced,
            Kind::Kept => self.kept,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.masked || self.replaced || self.kept)
    }
}

impl FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Filter::ALL),
            "masked" => Ok(Filter::MASKED),
            "replaced" => Ok(Filter::REPLACED),
            "kept" => Ok(Filter::KEPT),
            _ => Err(Error::Config(format!("unknown category `{s}` (masked|replaced|kept|all)"))),
        }
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [(self.masked, "masked"), (self.replaced, "replaced"), (self.kept, "kept")];
        match *self {
            Filter::ALL => f.write_str("all"),
            _ => {
                let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
                f.write_str(&on.join("+"))
            }
        }
    }
}

/// Original and corrupted id grids of shape `[batch, n]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedBatch {
    pub batch: usize,
    pub n: usize,
    pub original: Vec<usize>,
    pub corrupted: Vec<usize>,
    pub kind: Vec<Kind>,
    pub pad: Vec<bool>,
    pub counts: Vec<Counts>,
}

impl CorruptedBatch {
    /// A batch with nothing corrupted.
    pub fn clean(original: &[usize], pad: &[bool], batch: usize, n: usize) -> Result<Self> {
        check_grid(original, pad, batch, n)?;
        Ok(Self {
            batch,
            n,
            original: original.to_vec(),
            corrupted: original.to_vec(),
            kind: vec![Kind::None; batch * n],
            pad: pad.to_vec(),
            counts: vec![Counts::default(); batch],
        })
    }

    pub fn row<'a, T>(&self, grid: &'a [T], b: usize) -> &'a [T] {
        &grid[b * self.n..(b + 1) * self.n]
    }

    pub fn num_targets(&self, filter: Filter) -> usize {
        self.kind.iter().filter(|&&k| filter.contains(k)).count()
    }

    /// Checks the structural invariants; used on parsed dumps and in tests.
    pub fn check(&self, vocab_size: usize) -> Result<()> {
        check_grid(&self.original, &self.pad, self.batch, self.n)?;
        let cells = self.batch * self.n;
        if self.corrupted.len() != cells || self.kind.len() != cells || self.counts.len() != self.batch {
            return Err(Error::Contract("corrupted batch fields disagree in size".into()));
        }
        for i in 0..cells {
            let (o, c, k) = (self.original[i], self.corrupted[i], self.kind[i]);
            let bad = match k {
                Kind::None | Kind::Kept => c != o,
                Kind::Masked => c != special::MASK,
                Kind::Replaced => special::is_special(c) || c >= vocab_size,
            };
            if bad || (k != Kind::None && (self.pad[i] || !eligible(o, self.pad[i]))) {
                return Err(Error::Contract(format!("position {i}: kind {k:?} with ids {o}->{c}")));
            }
        }
        for b in 0..self.batch {
            let kinds = self.row(&self.kind, b);
            let count = |kind| kinds.iter().filter(|&&k| k == kind).count();
            let c = Counts {
                mask: count(Kind::Masked),
                random: count(Kind::Replaced),
                keep: count(Kind::Kept),
            };
            if c != self.counts[b] {
                return Err(Error::Contract(format!("row {b}: recorded counts {:?} but found {c:?}", self.counts[b])));
            }
        }
        Ok(())
    }
}

fn check_grid(ids: &[usize], pad: &[bool], batch: usize, n: usize) -> Result<()> {
    if ids.len() != batch * n || pad.len() != batch * n {
        return Err(Error::Contract(format!(
            "id grid has {} entries and pad grid {}, expected {batch}x{n}",
            ids.len(),
            pad.len()
        )));
    }
    Ok(())
}

fn eligible(id: usize, pad: bool) -> bool {
    !pad && !special::is_special(id)
}

/// Number of positions in a row that may be corrupted.
pub fn eligible_count(ids: &[usize], pad: &[bool]) -> usize {
    ids.iter().zip(pad).filter(|(&i, &p)| eligible(i, p)).count()
}

/// Uniform draw from the ordinary vocabulary, redrawn once on a collision
/// with the original token.
fn random_token<R: Rng>(rng: &mut R, original: usize, vocab_size: usize) -> usize {
    let t = rng.random_range(special::COUNT..vocab_size);
    if t == original {
        rng.random_range(special::COUNT..vocab_size)
    } else {
        t
    }
}

/// Corrupts a `[batch, n]` grid of ids. Fully determined by `seed`.
pub fn corrupt(
    original: &[usize],
    pad: &[bool],
    batch: usize,
    n: usize,
    cfg: &MaskingConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<CorruptedBatch> {
    cfg.validate()?;
    if vocab_size <= special::COUNT && cfg.strategy.random > 0.0 {
        return Err(Error::Config("random replacement needs at least one ordinary token".into()));
    }
    let mut cb = CorruptedBatch::clean(original, pad, batch, n)?;
    if let Some(&bad) = original.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in 0..batch {
        let elig: Vec<usize> = (b * n..(b + 1) * n).filter(|&i| eligible(original[i], pad[i])).collect();
        let mut assign = |i: usize, kind: Kind, rng: &mut ChaCha8Rng| {
            cb.kind[i] = kind;
            cb.corrupted[i] = match kind {
                Kind::Masked => special::MASK,
                Kind::Replaced => random_token(rng, original[i], vocab_size),
                _ => original[i],
            };
        };
        let counts = if cfg.deterministic_counts {
            let c = cfg.counts(elig.len());
            // a uniform subset in uniform order; categories by rank
            let chosen = sample(&mut rng, elig.len(), c.total());
            for (rank, j) in chosen.iter().enumerate() {
                let kind = if rank < c.mask {
                    Kind::Masked
                } else if rank < c.mask + c.random {
                    Kind::Replaced
                } else {
                    Kind::Kept
                };
                assign(elig[j], kind, &mut rng);
            }
            c
        } else {
            let st = cfg.strategy;
            let mut c = Counts::default();
            for &i in &elig {
                if rng.random::<f64>() >= cfg.rate {
                    continue;
                }
                let u: f64 = rng.random();
                let kind = if u < st.mask {
                    c.mask += 1;
                    Kind::Masked
                } else if u < st.mask + st.random {
                    c.random += 1;
                    Kind::Replaced
                } else {
                    c.keep += 1;
                    Kind::Kept
                };
                assign(i, kind, &mut rng);
            }
            c
        };
        cb.counts[b] = counts;
    }
    Ok(cb)
}

/// `true` exactly where the kind belongs to `filter`.
pub fn loss_targets(cb: &CorruptedBatch, filter: Filter) -> Vec<bool> {
    cb.kind.iter().map(|&k| filter.contains(k)).collect()
}

/// The corrupted sequence with `[MASK]` slots removed, plus where the
/// removed slots were. Rows with fewer slots than the widest row are
/// right-filled; `fill` marks those cells.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderView {
    pub batch: usize,
    pub n_en: usize,
    pub ids: Vec<usize>,
    /// Original index of each encoder slot.
    pub positions: Vec<usize>,
    /// Original padding or fill; never attended to.
    pub pad: Vec<bool>,
    pub fill: Vec<bool>,
    pub n_mask: usize,
    pub masked_positions: Vec<usize>,
    pub masked_fill: Vec<bool>,
}

impl EncoderView {
    /// Whether every row had the same number of masked slots.
    pub fn is_rectangular(&self) -> bool {
        !self.fill.iter().any(|&f| f) && !self.masked_fill.iter().any(|&f| f)
    }

    /// Rebuilds the corrupted grid from the view.
    pub fn reassemble(&self, n: usize) -> Vec<usize> {
        let mut out = vec![special::PAD; self.batch * n];
        for b in 0..self.batch {
            for j in 0..self.n_en {
                let c = b * self.n_en + j;
                if !self.fill[c] {
                    out[b * n + self.positions[c]] = self.ids[c];
                }
            }
            for j in 0..self.n_mask {
                let c = b * self.n_mask + j;
                if !self.masked_fill[c] {
                    out[b * n + self.masked_positions[c]] = special::MASK;
                }
            }
        }
        out
    }
}

/// Encoder view for batches whose rows all have the same mask count.
pub fn encoder_view(cb: &CorruptedBatch) -> Result<EncoderView> {
    let v = encoder_view_padded(cb);
    if !v.is_rectangular() {
        let per_row: Vec<usize> = cb.counts.iter().map(|c| c.mask).collect();
        return Err(Error::Contract(format!("rows have different mask counts {per_row:?}")));
    }
    Ok(v)
}

/// Encoder view that tolerates ragged mask counts by filling short rows.
pub fn encoder_view_padded(cb: &CorruptedBatch) -> EncoderView {
    let n = cb.n;
    let masks: Vec<usize> = (0..cb.batch)
        .map(|b| cb.row(&cb.kind, b).iter().filter(|&&k| k == Kind::Masked).count())
        .collect();
    let n_mask = masks.iter().copied().max().unwrap_or(0);
    let n_en = n - masks.iter().copied().min().unwrap_or(0);
    let mut v = EncoderView {
        batch: cb.batch,
        n_en,
        ids: Vec::with_capacity(cb.batch * n_en),
        positions: Vec::with_capacity(cb.batch * n_en),
        pad: Vec::with_capacity(cb.batch * n_en),
        fill: Vec::with_capacity(cb.batch * n_en),
        n_mask,
        masked_positions: Vec::with_capacity(cb.batch * n_mask),
        masked_fill: Vec::with_capacity(cb.batch * n_mask),
    };
    for b in 0..cb.batch {
        let kinds = cb.row(&cb.kind, b);
        for t in 0..n {
            if kinds[t] == Kind::Masked {
                v.masked_positions.push(t);
                v.masked_fill.push(false);
            } else {
                v.ids.push(cb.corrupted[b * n + t]);
                v.positions.push(t);
                v.pad.push(cb.pad[b * n + t]);
                v.fill.push(false);
            }
        }
        for _ in masks[b]..n_mask {
            v.masked_positions.push(0);
            v.masked_fill.push(true);
        }
        for _ in (n - masks[b])..n_en {
            v.ids.push(special::PAD);
            v.positions.push(0);
            v.pad.push(true);
            v.fill.push(true);
        }
    }
    v
}
