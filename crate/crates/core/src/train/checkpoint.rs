//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic `MSKLCKPT`, `u32` version, `u64`-prefixed manifest text,
//! `u64`-prefixed vocabulary text, `u32` array count, then per array a
//! `u32`-prefixed name, `u32` rank, `u64` extents and `f32` values.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdamState, OptimizerConfig, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::io::config::{apply_section, parse_sections, write_section, RunConfig};
use crate::io::Vocabulary;
use crate::models::ModelState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MSKLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A resumable training state plus the vocabulary it was trained with.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub trainer: Trainer<f32>,
    pub vocab: Option<Vocabulary>,
}

fn manifest(tr: &Trainer<f32>) -> String {
    let mut s = String::new();
    write_section(&mut s, &tr.model.cfg);
    write_section(&mut s, &tr.model.cfg.masking);
    write_section(&mut s, &tr.opt);
    write_section(&mut s, &tr.train);
    let seed: String = tr.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    s.push_str("[state]\n");
    s.push_str(&format!("step = {}\n", tr.adam.t));
    s.push_str(&format!("rng_seed = {seed}\n"));
    s.push_str(&format!("rng_stream = {}\n", tr.rng.get_stream()));
    s.push_str(&format!("rng_word_pos = {}\n", tr.rng.get_word_pos()));
    s
}

pub fn to_bytes(tr: &Trainer<f32>, vocab: Option<&Vocabulary>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let put_blob = |out: &mut Vec<u8>, b: &[u8]| {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        out.extend_from_slice(b);
    };
    put_blob(&mut out, manifest(tr).as_bytes());
    put_blob(&mut out, vocab.map(|v| v.to_text()).unwrap_or_default().as_bytes());
    let store = &tr.model.store;
    let mut arrays: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (i, p) in store.iter().enumerate() {
        arrays.push((format!("param/{}", p.name), &p.value));
        arrays.push((format!("adam.m/{}", p.name), &tr.adam.m[i]));
        arrays.push((format!("adam.v/{}", p.name), &tr.adam.v[i]));
    }
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file (needed {n} bytes at offset {})", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }

    fn text(&mut self) -> Result<&'a str> {
        let n = self.u64()?;
        let n = self.len(n)?;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Checkpoint(format!("manifest is not UTF-8: {e}")))
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(bad("not a checkpoint (bad magic bytes)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("version {version} is not supported (expected {CHECKPOINT_VERSION})")));
    }
    let manifest = r.text()?;
    let vocab_text = r.text()?;

    let mut cfg = RunConfig::default().model;
    let mut opt = OptimizerConfig::default();
    let mut train = TrainConfig::default();
    let (mut step, mut seed, mut stream, mut word_pos) = (None, None, None, None);
    for (name, entries) in parse_sections(manifest)? {
        match name.as_str() {
            "model" => apply_section(&mut cfg, &entries)?,
            "masking" => apply_section(&mut cfg.masking, &entries)?,
            "optimizer" => apply_section(&mut opt, &entries)?,
            "train" => apply_section(&mut train, &entries)?,
            "state" => {
                for (k, v, _) in &entries {
                    let num = || v.parse::<u128>().map_err(|e| bad(format!("state `{k}`: {e}")));
                    match k.as_str() {
                        "step" => step = Some(num()? as u64),
                        "rng_stream" => stream = Some(num()? as u64),
                        "rng_word_pos" => word_pos = Some(num()?),
                        "rng_seed" => seed = Some(parse_seed(v)?),
                        _ => return Err(bad(format!("unknown state key `{k}`"))),
                    }
                }
            }
            other => return Err(bad(format!("unknown manifest section [{other}]"))),
        }
    }
    let (Some(step), Some(seed), Some(stream), Some(word_pos)) = (step, seed, stream, word_pos) else {
        return Err(bad("manifest lacks training state"));
    };
    let mut model = ModelState::<f32>::init(&cfg, 0)?;
    let mut adam = AdamState::new(&model.store);
    adam.t = step;

    let count = r.u32()? as usize;
    let mut seen = vec![[false; 3]; model.store.len()];
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("array name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = r.u64()?;
            shape.push(r.len(d)?);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| bad("array too large"))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let (kind, pname) = name.split_once('/').ok_or_else(|| bad(format!("malformed array name `{name}`")))?;
        let id = model
            .store
            .find(pname)
            .ok_or_else(|| bad(format!("array `{name}` does not belong to this model")))?;
        if model.store.get(id).shape() != shape.as_slice() {
            return Err(bad(format!("array `{name}` has shape {shape:?}, model expects {:?}", model.store.get(id).shape())));
        }
        let t = Tensor::new(&shape, data)?;
        let slot = match kind {
            "param" => {
                *model.store.get_mut(id) = t;
                0
            }
            "adam.m" => {
                adam.m[id.0] = t;
                1
            }
            "adam.v" => {
                adam.v[id.0] = t;
                2
            }
            _ => return Err(bad(format!("unknown array kind in `{name}`"))),
        };
        seen[id.0][slot] = true;
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes after the last array", buf.len() - r.pos)));
    }
    if let Some(i) = seen.iter().position(|s| s.iter().any(|&x| !x)) {
        return Err(bad(format!("missing arrays for parameter `{}`", model.store.param(crate::nn::ParamId(i)).name)));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let vocab = if vocab_text.is_empty() {
        None
    } else {
        Some(Vocabulary::from_text(vocab_text)?)
    };
    Ok(Checkpoint {
        trainer: Trainer::from_parts(model, adam, opt, train, rng),
        vocab,
    })
}

fn parse_seed(hex: &str) -> Result<[u8; 32]> {
    if hex.len() != 64 {
        return Err(bad("rng_seed must be 64 hex digits"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|e| bad(format!("rng_seed: {e}")))?;
    }
    Ok(seed)
}

/// Writes through a temporary file so a failed save never leaves a torn checkpoint.
pub fn save_checkpoint(path: &Path, tr: &Trainer<f32>, vocab: Option<&Vocabulary>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(tr, vocab))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    from_bytes(&buf)
}
