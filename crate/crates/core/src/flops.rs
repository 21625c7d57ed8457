//! Closed-form pre-training FLOPs and the instrumented matmul counter.
//!
//! Only matrix products are counted (2 FLOPs per multiply-add); biases,
//! activations, normalization, softmax and dropout are ignored.

use std::fmt::Write;

use crate::corruption::{CorruptedBatch, Filter};
use crate::error::Result;
use crate::models::{forward, Arch, ModelConfig, ModelState};
use crate::nn::Ctx;
use crate::tensor::{Scalar, Tape};

/// Multi-head self-attention over `n` tokens of width `d`.
pub fn phi_msa(n: f64, d: f64) -> f64 {
    8.0 * n * d * d + 4.0 * n * n * d
}

/// Feed-forward with inner size `4d`.
pub fn phi_mlp(n: f64, d: f64) -> f64 {
    16.0 * n * d * d
}

pub fn phi_blk(n: f64, d: f64) -> f64 {
    24.0 * n * d * d + 4.0 * n * n * d
}

/// Prediction head applied to `n * r` positions.
pub fn phi_pred(n: f64, r: f64, d: f64, vocab: f64) -> f64 {
    2.0 * n * r * (d * d + d * vocab)
}

/// Prediction head whose dense layer maps `d_de` back to `d_en`.
pub fn phi_pred_projected(n: f64, r: f64, d_en: f64, d_de: f64, vocab: f64) -> f64 {
    2.0 * n * r * (d_de * d_en + d_en * vocab)
}

/// Cross-attention of `n_de` queries into `n_en` memory rows.
pub fn phi_mca(n_en: f64, n_de: f64, d: f64) -> f64 {
    4.0 * n_en * d * d + 4.0 * n_de * d * d + 4.0 * n_en * n_de * d
}

/// Decoder block with self-attention, cross-attention and feed-forward.
pub fn phi_cblk(n_en: f64, n_de: f64, d: f64) -> f64 {
    4.0 * n_en * d * d + 28.0 * n_de * d * d + 4.0 * n_en * n_de * d + 4.0 * n_de * n_de * d
}

/// Symbols of a FLOPs budget. Vanilla reads `l_en`/`d_en` as its `l`/`d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsConfig {
    pub arch: Arch,
    pub b: u64,
    pub u: u64,
    pub n: f64,
    pub vocab: f64,
    pub r: f64,
    pub l_en: f64,
    pub d_en: f64,
    pub l_de: f64,
    pub d_de: f64,
}

/// Masked share of corrupted tokens assumed by the length model.
const MASK_SHARE: f64 = 0.8;

impl FlopsConfig {
    pub fn vanilla(n: f64, l: f64, d: f64, r: f64, vocab: f64) -> Self {
        Self {
            arch: Arch::Vanilla,
            b: 1,
            u: 1,
            n,
            vocab,
            r,
            l_en: l,
            d_en: d,
            l_de: 0.0,
            d_de: d,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn two_stage(arch: Arch, n: f64, l_en: f64, d_en: f64, l_de: f64, d_de: f64, r: f64, vocab: f64) -> Self {
        Self {
            arch,
            b: 1,
            u: 1,
            n,
            vocab,
            r,
            l_en,
            d_en,
            l_de,
            d_de,
        }
    }

    pub fn from_model(cfg: &ModelConfig, b: u64, u: u64) -> Self {
        Self {
            arch: cfg.arch,
            b,
            u,
            n: cfg.seq_len as f64,
            vocab: cfg.vocab_size as f64,
            r: cfg.masking.rate,
            l_en: cfg.l_en as f64,
            d_en: cfg.d_en as f64,
            l_de: cfg.l_de as f64,
            d_de: cfg.d_de as f64,
        }
    }

    pub fn with_rate(self, r: f64) -> Self {
        Self { r, ..self }
    }

    pub fn with_arch(self, arch: Arch) -> Self {
        Self { arch, ..self }
    }

    pub fn n_en(&self) -> f64 {
        (1.0 - MASK_SHARE * self.r) * self.n
    }

    pub fn n_de(&self) -> f64 {
        MASK_SHARE * self.r * self.n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub cfg: FlopsConfig,
    /// Named terms, each already multiplied by `2 b u`.
    pub terms: Vec<(&'static str, f64)>,
    /// Sum of `terms`.
    pub total: f64,
}

impl FlopsReport {
    fn new(cfg: FlopsConfig, bracket: Vec<(&'static str, f64)>) -> Self {
        let scale = 2.0 * cfg.b as f64 * cfg.u as f64;
        let terms: Vec<(&'static str, f64)> = bracket.into_iter().map(|(k, v)| (k, scale * v)).collect();
        let total = terms.iter().map(|(_, v)| v).sum();
        Self { cfg, terms, total }
    }

    /// Forward FLOPs of one sequence in one update (the bracket before `2 b u`).
    pub fn forward_per_sequence(&self) -> f64 {
        self.total / (2.0 * self.cfg.b as f64 * self.cfg.u as f64)
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(k, _)| *k == name).map(|&(_, v)| v)
    }
}

pub fn total_vanilla(cfg: &FlopsConfig) -> FlopsReport {
    FlopsReport::new(
        *cfg,
        vec![
            ("encoder_blocks", cfg.l_en * phi_blk(cfg.n, cfg.d_en)),
            ("prediction", phi_pred(cfg.n, cfg.r, cfg.d_en, cfg.vocab)),
        ],
    )
}

pub fn total_threeml_self(cfg: &FlopsConfig) -> FlopsReport {
    let n_en = cfg.n_en();
    FlopsReport::new(
        *cfg,
        vec![
            ("projection", 2.0 * n_en * cfg.d_en * cfg.d_de),
            ("encoder_blocks", cfg.l_en * phi_blk(n_en, cfg.d_en)),
            ("decoder_blocks", cfg.l_de * phi_blk(cfg.n, cfg.d_de)),
            ("prediction", phi_pred_projected(cfg.n, cfg.r, cfg.d_en, cfg.d_de, cfg.vocab)),
        ],
    )
}

pub fn total_threeml_cross(cfg: &FlopsConfig) -> FlopsReport {
    let (n_en, n_de) = (cfg.n_en(), cfg.n_de());
    let enc_rate = if n_en > 0.0 { (1.0 - MASK_SHARE) * cfg.r / (1.0 - MASK_SHARE * cfg.r) } else { 0.0 };
    FlopsReport::new(
        *cfg,
        vec![
            ("projection", 2.0 * n_en * cfg.d_en * cfg.d_de),
            ("encoder_blocks", cfg.l_en * phi_blk(n_en, cfg.d_en)),
            ("decoder_blocks", cfg.l_de * phi_cblk(n_en, n_de, cfg.d_de)),
            ("prediction_encoder", phi_pred(n_en, enc_rate, cfg.d_en, cfg.vocab)),
            ("prediction_decoder", phi_pred_projected(n_de, 1.0, cfg.d_en, cfg.d_de, cfg.vocab)),
        ],
    )
}

pub fn total(cfg: &FlopsConfig) -> FlopsReport {
    match cfg.arch {
        Arch::Vanilla => total_vanilla(cfg),
        Arch::ThreeMlSelf => total_threeml_self(cfg),
        Arch::ThreeMlCross => total_threeml_cross(cfg),
    }
}

/// `total(baseline) / total(target)`.
pub fn speedup(baseline: &FlopsConfig, target: &FlopsConfig) -> f64 {
    total(baseline).total / total(target).total
}

/// The usual baseline: the same encoder trained as vanilla MLM at rate 0.15.
pub fn default_baseline(target: &FlopsConfig) -> FlopsConfig {
    FlopsConfig {
        arch: Arch::Vanilla,
        r: 0.15,
        ..*target
    }
}

/// Sum of `2 M N K` over every matrix product in one forward pass.
pub fn count_matmul_flops<T: Scalar>(model: &ModelState<T>, cb: &CorruptedBatch) -> Result<u64> {
    let mut tape = Tape::new();
    let (_, w) = model.bind(&mut tape);
    let mut ctx = Ctx::eval(&mut tape);
    forward(&mut ctx, model, &w, cb, Filter::ALL)?;
    Ok(tape.matmul_flops())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub r: f64,
    pub total: f64,
    pub speedup: f64,
}

/// Totals and speedups of `target` over a grid of masking rates.
pub fn sweep(target: &FlopsConfig, baseline: &FlopsConfig, rates: &[f64]) -> Vec<SweepPoint> {
    let base = total(baseline).total;
    rates
        .iter()
        .map(|&r| {
            let t = total(&target.with_rate(r)).total;
            SweepPoint {
                r,
                total: t,
                speedup: base / t,
            }
        })
        .collect()
}

/// Inclusive `a:b:step` grid; the end point is kept when it lands within
/// rounding of the grid.
pub fn rate_grid(a: f64, b: f64, step: f64) -> Vec<f64> {
    if step <= 0.0 || b < a {
        return vec![a];
    }
    let count = ((b - a) / step + 1e-9).floor() as usize;
    (0..=count).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect()
}

/// Human-readable table followed by `key=value` lines.
pub fn render_report(target: &FlopsReport, baseline: &FlopsReport, points: &[SweepPoint]) -> String {
    let mut s = String::new();
    let c = &target.cfg;
    let _ = writeln!(s, "FLOPs report: {} (b={}, u={}, n={}, |V|={}, r={})", c.arch, c.b, c.u, c.n, c.vocab, c.r);
    let _ = writeln!(s, "  {:<22}{:>24}", "term", "FLOPs");
    for (k, v) in &target.terms {
        let _ = writeln!(s, "  {k:<22}{v:>24.1}");
    }
    let _ = writeln!(s, "  {:<22}{:>24.1}", "total", target.total);
    let _ = writeln!(s, "  {:<22}{:>24.1}", "baseline total", baseline.total);
    let _ = writeln!(s, "  speedup vs {} r={}: {:.4}", baseline.cfg.arch, baseline.cfg.r, baseline.total / target.total);
    if !points.is_empty() {
        let _ = writeln!(s, "\n  {:>6}{:>24}{:>10}", "r", "total", "speedup");
        for p in points {
            let _ = writeln!(s, "  {:>6.3}{:>24.1}{:>10.4}", p.r, p.total, p.speedup);
        }
    }
    s.push_str("\n# machine-readable\n");
    let _ = writeln!(s, "arch={}", c.arch);
    for (k, v) in &target.terms {
        let _ = writeln!(s, "term.{k}={v}");
    }
    let _ = writeln!(s, "total={}", target.total);
    let _ = writeln!(s, "baseline.total={}", baseline.total);
    let _ = writeln!(s, "speedup={}", baseline.total / target.total);
    for p in points {
        let _ = writeln!(s, "sweep.r={} total={} speedup={}", p.r, p.total, p.speedup);
    }
    s
}
