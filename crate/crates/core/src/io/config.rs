//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Every key has a default; unknown sections and keys are rejected. In
//! `[model]`, an unset `d_de`/`h_de` follows half of `d_en`/`h_en` and an
//! unset `max_positions` follows `seq_len`.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corruption::MaskingConfig;
use crate::error::{Error, Result};
use crate::flops::FlopsConfig;
use crate::models::{Arch, ModelConfig};
use crate::probes::MIProbeConfig;
use crate::train::{OptimizerConfig, TrainConfig};

/// Parsed `[section]` → ordered `(key, value, line)` entries.
pub type Sections = Vec<(String, Vec<(String, String, usize)>)>;

pub fn parse_sections(text: &str) -> Result<Sections> {
    let mut out: Sections = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            out.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {ln}: expected `key = value`")))?;
        let section = out
            .last_mut()
            .ok_or_else(|| Error::Config(format!("line {ln}: key outside any [section]")))?;
        section.1.push((k.trim().to_string(), v.trim().to_string(), ln));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn unknown(section: &str, key: &str) -> Error {
    Error::Config(format!("unknown key `{key}` in [{section}]"))
}

/// A configuration struct that maps onto one `[section]`.
pub trait Section {
    const NAME: &'static str;
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn set(&mut self, key: &str, value: &str) -> Result<()>;
}

impl Section for ModelConfig {
    const NAME: &'static str = "model";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("arch", self.arch.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("l_en", self.l_en.to_string()),
            ("d_en", self.d_en.to_string()),
            ("h_en", self.h_en.to_string()),
            ("l_de", self.l_de.to_string()),
            ("d_de", self.d_de.to_string()),
            ("h_de", self.h_de.to_string()),
            ("ln_mode", self.ln_mode.to_string()),
            ("dropout", self.dropout_p.to_string()),
            ("attn_dropout", self.attn_dropout_p.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "arch" => self.arch = v.parse()?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "seq_len" => self.seq_len = parse(key, v)?,
            "max_positions" => self.max_positions = parse(key, v)?,
            "l_en" => self.l_en = parse(key, v)?,
            "d_en" => self.d_en = parse(key, v)?,
            "h_en" => self.h_en = parse(key, v)?,
            "l_de" => self.l_de = parse(key, v)?,
            "d_de" => self.d_de = parse(key, v)?,
            "h_de" => self.h_de = parse(key, v)?,
            "ln_mode" => self.ln_mode = v.parse()?,
            "dropout" => self.dropout_p = parse(key, v)?,
            "attn_dropout" => self.attn_dropout_p = parse(key, v)?,
            _ => return Err(unknown(Self::NAME, key)),
        }
        Ok(())
    }
}

impl Section for MaskingConfig {
    const NAME: &'static str = "masking";

    fn entries(&self) -> Vec<(&'static str, String)> {
        let s = self.strategy;
        vec![
            ("rate", self.rate.to_string()),
            ("strategy", format!("{},{},{}", s.mask, s.random, s.keep)),
            ("deterministic_counts", self.deterministic_counts.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "rate" => self.rate = parse(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "deterministic_counts" => self.deterministic_counts = parse(key, v)?,
            _ => return Err(unknown(Self::NAME, key)),
        }
        Ok(())
    }
}

impl Section for OptimizerConfig {
    const NAME: &'static str = "optimizer";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("peak_lr", self.peak_lr.to_string()),
            ("warmup_proportion", self.warmup_proportion.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "peak_lr" => self.peak_lr = parse(key, v)?,
            "warmup_proportion" => self.warmup_proportion = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            _ => return Err(unknown(Self::NAME, key)),
        }
        Ok(())
    }
}

impl Section for TrainConfig {
    const NAME: &'static str = "train";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("log_every", self.log_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("dropout", self.dropout.map_or("none".to_string(), |p| p.to_string())),
            ("wall_time", self.wall_time.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "dropout" => self.dropout = if v == "none" { None } else { Some(parse(key, v)?) },
            "wall_time" => self.wall_time = parse(key, v)?,
            _ => return Err(unknown(Self::NAME, key)),
        }
        Ok(())
    }
}

impl Section for MIProbeConfig {
    const NAME: &'static str = "probe";

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("labels", self.num_token_labels.to_string()),
            ("k", self.k.to_string()),
            ("samples", self.max_samples.to_string()),
            ("kmeans_batch", self.kmeans_batch.to_string()),
            ("kmeans_iters", self.kmeans_iters.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "labels" => self.num_token_labels = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "samples" => self.max_samples = parse(key, v)?,
            "kmeans_batch" => self.kmeans_batch = parse(key, v)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(unknown(Self::NAME, key)),
        }
        Ok(())
    }
}

/// Corpus locations and vocabulary building options.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub vocab_min_count: u64,
    /// Upper bound on the vocabulary size, reserved ids included.
    pub vocab_max_size: Option<usize>,
}

impl Section for DataConfig {
    const NAME: &'static str = "data";

    fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".into(), |p| p.display().to_string());
        vec![
            ("corpus", path(&self.corpus)),
            ("eval_corpus", path(&self.eval_corpus)),
            ("vocab_min_count", self.vocab_min_count.to_string()),
            ("vocab_max_size", self.vocab_max_size.map_or("none".into(), |m| m.to_string())),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = |v: &str| (v != "none").then(|| PathBuf::from(v));
        match key {
            "corpus" => self.corpus = path(v),
            "eval_corpus" => self.eval_corpus = path(v),
            "vocab_min_count" => self.vocab_min_count = parse(key, v)?,
            "vocab_max_size" => self.vocab_max_size = if v == "none" { None } else { Some(parse(key, v)?) },
            _ => return Err(unknown(Self::NAME, key)),
        }
        Ok(())
    }
}

/// Batch size and update count for FLOPs reports; `None` falls back to
/// the training section.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlopsSection {
    pub b: Option<u64>,
    pub u: Option<u64>,
}

impl Section for FlopsSection {
    const NAME: &'static str = "flops";

    fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |x: Option<u64>| x.map_or("none".into(), |x| x.to_string());
        vec![("b", opt(self.b)), ("u", opt(self.u))]
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let opt = |v: &str| -> Result<Option<u64>> { if v == "none" { Ok(None) } else { Ok(Some(parse(key, v)?)) } };
        match key {
            "b" => self.b = opt(v)?,
            "u" => self.u = opt(v)?,
            _ => return Err(unknown(Self::NAME, key)),
        }
        Ok(())
    }
}

pub fn write_section<S: Section>(out: &mut String, s: &S) {
    out.push_str(&format!("[{}]\n", S::NAME));
    for (k, v) in s.entries() {
        out.push_str(&format!("{k} = {v}\n"));
    }
}

pub fn apply_section<S: Section>(s: &mut S, entries: &[(String, String, usize)]) -> Result<()> {
    for (k, v, ln) in entries {
        s.set(k, v)
            .map_err(|e| Error::Config(format!("line {ln}: {}", e.to_string().trim_start_matches("invalid configuration: "))))?;
    }
    Ok(())
}

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub opt: OptimizerConfig,
    pub train: TrainConfig,
    pub probe: MIProbeConfig,
    pub data: DataConfig,
    pub flops: FlopsSection,
}

impl Default for RunConfig {
    /// The desk-scale recipe.
    fn default() -> Self {
        let mut model = ModelConfig::new(Arch::Vanilla, 2000, 64, 4, 128, 4);
        model.dropout_p = 0.1;
        model.attn_dropout_p = 0.1;
        Self {
            model,
            opt: OptimizerConfig {
                total_steps: 2000,
                ..OptimizerConfig::default()
            },
            train: TrainConfig {
                max_steps: 2000,
                log_every: 10,
                ..TrainConfig::default()
            },
            probe: MIProbeConfig::default(),
            data: DataConfig::default(),
            flops: FlopsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut total_steps_set = false;
        for (name, entries) in parse_sections(text)? {
            match name.as_str() {
                "model" => {
                    let has = |key: &str| entries.iter().any(|(k, _, _)| k == key);
                    apply_section(&mut cfg.model, &entries)?;
                    let m = &mut cfg.model;
                    if has("d_en") && !has("d_de") {
                        m.d_de = (m.d_en / 2).max(1);
                    }
                    if has("h_en") && !has("h_de") {
                        m.h_de = (m.h_en / 2).max(1);
                    }
                    if has("seq_len") && !has("max_positions") {
                        m.max_positions = m.seq_len;
                    }
                }
                "masking" => apply_section(&mut cfg.model.masking, &entries)?,
                "optimizer" => {
                    total_steps_set |= entries.iter().any(|(k, _, _)| k == "total_steps");
                    apply_section(&mut cfg.opt, &entries)?
                }
                "train" => apply_section(&mut cfg.train, &entries)?,
                "probe" => apply_section(&mut cfg.probe, &entries)?,
                "data" => apply_section(&mut cfg.data, &entries)?,
                "flops" => apply_section(&mut cfg.flops, &entries)?,
                other => return Err(Error::Config(format!("unknown section [{other}]"))),
            }
        }
        if !total_steps_set {
            cfg.opt.total_steps = cfg.train.max_steps.max(1);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.opt.validate()?;
        self.train.validate()?;
        self.probe.validate()
    }

    /// Fully resolved configuration in the same format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        write_section(&mut s, &self.model);
        write_section(&mut s, &self.model.masking);
        write_section(&mut s, &self.opt);
        write_section(&mut s, &self.train);
        write_section(&mut s, &self.probe);
        write_section(&mut s, &self.data);
        write_section(&mut s, &self.flops);
        s
    }

    pub fn flops_config(&self) -> FlopsConfig {
        FlopsConfig::from_model(
            &self.model,
            self.flops.b.unwrap_or(self.train.batch_size as u64),
            self.flops.u.unwrap_or(self.train.max_steps),
        )
    }
}
