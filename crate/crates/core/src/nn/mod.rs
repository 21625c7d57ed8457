//! Transformer building blocks.
//!
//! Weight containers are generic over a handle type: `X<ParamId>` lives in a
//! [`ParamStore`] between steps, and `bind` turns it into `X<Var>` for one
//! forward pass on a [`Tape`].

mod params;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use params::{Param, ParamId, ParamStore, INIT_STD};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var, MASK_SENTINEL};

/// Layer-norm epsilon used throughout the models.
pub const LN_EPS: f64 = 1e-5;

/// Placement of layer normalization inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LnMode {
    /// Normalize the input of each sublayer.
    Pre,
    /// Normalize after each residual sum.
    Post,
}

impl fmt::Display for LnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LnMode::Pre => "pre",
            LnMode::Post => "post",
        })
    }
}

impl FromStr for LnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pre" => Ok(LnMode::Pre),
            "post" => Ok(LnMode::Post),
            other => Err(Error::Config(format!("unknown ln_mode `{other}` (expected pre|post)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub ln_mode: LnMode,
    pub dropout_p: f64,
    pub attn_dropout_p: f64,
}

impl BlockConfig {
    /// Block with a `4d` feed-forward layer and no dropout.
    pub fn new(d: usize, heads: usize, ln_mode: LnMode) -> Self {
        Self {
            d,
            heads,
            ffn_inner: 4 * d,
            ln_mode,
            dropout_p: 0.0,
            attn_dropout_p: 0.0,
        }
    }

    pub fn head_size(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        for p in [self.dropout_p, self.attn_dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Forward-pass context: the tape plus the dropout stream.
///
/// Without an RNG every dropout site is the identity (evaluation mode).
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self { tape, rng }
    }

    pub fn eval(tape: &'a mut Tape<T>) -> Self {
        Self { tape, rng: None }
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => self.tape.dropout(x, p, rng),
            _ => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<H> {
    /// `[d_in, d_out]`
    pub w: H,
    pub b: H,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<H> {
    pub gain: H,
    pub offset: H,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<H> {
    pub q: Dense<H>,
    pub k: Dense<H>,
    pub v: Dense<H>,
    pub o: Dense<H>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<H> {
    pub up: Dense<H>,
    pub down: Dense<H>,
}

/// Weights of one transformer block. Cross-attention blocks carry a second
/// attention module and a third norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<H> {
    pub self_attn: Attention<H>,
    pub ln_self: Norm<H>,
    pub cross: Option<(Attention<H>, Norm<H>)>,
    pub ffn: FeedForward<H>,
    pub ln_ffn: Norm<H>,
}

/// First prediction layer (dense + norm); the second is the tied embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<H> {
    pub dense: Dense<H>,
    pub norm: Norm<H>,
}

impl<H: Copy> Dense<H> {
    pub fn map<G>(&self, f: &mut impl FnMut(H) -> G) -> Dense<G> {
        Dense { w: f(self.w), b: f(self.b) }
    }
}

impl<H: Copy> Norm<H> {
    pub fn map<G>(&self, f: &mut impl FnMut(H) -> G) -> Norm<G> {
        Norm {
            gain: f(self.gain),
            offset: f(self.offset),
        }
    }
}

impl<H: Copy> Attention<H> {
    pub fn map<G>(&self, f: &mut impl FnMut(H) -> G) -> Attention<G> {
        Attention {
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            o: self.o.map(f),
        }
    }
}

impl<H: Copy> BlockWeights<H> {
    /// Applies `f` to every handle in registration order.
    pub fn map<G>(&self, f: &mut impl FnMut(H) -> G) -> BlockWeights<G> {
        let self_attn = self.self_attn.map(f);
        let ln_self = self.ln_self.map(f);
        let cross = self.cross.as_ref().map(|(a, n)| (a.map(f), n.map(f)));
        let ffn = FeedForward {
            up: self.ffn.up.map(f),
            down: self.ffn.down.map(f),
        };
        BlockWeights {
            self_attn,
            ln_self,
            cross,
            ffn,
            ln_ffn: self.ln_ffn.map(f),
        }
    }
}

fn pick(vars: &[Var], id: ParamId) -> Var {
    vars[id.0]
}

impl Dense<ParamId> {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_normal(format!("{name}.weight"), &[d_in, d_out], rng),
            b: store.add_const(format!("{name}.bias"), d_out, 0.0),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> Dense<Var> {
        Dense {
            w: pick(vars, self.w),
            b: pick(vars, self.b),
        }
    }
}

impl Norm<ParamId> {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gain: store.add_const(format!("{name}.gain"), d, 1.0),
            offset: store.add_const(format!("{name}.offset"), d, 0.0),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> Norm<Var> {
        Norm {
            gain: pick(vars, self.gain),
            offset: pick(vars, self.offset),
        }
    }
}

impl Attention<ParamId> {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            q: Dense::init(store, &format!("{name}.q"), d, d, rng),
            k: Dense::init(store, &format!("{name}.k"), d, d, rng),
            v: Dense::init(store, &format!("{name}.v"), d, d, rng),
            o: Dense::init(store, &format!("{name}.o"), d, d, rng),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> Attention<Var> {
        Attention {
            q: self.q.bind(vars),
            k: self.k.bind(vars),
            v: self.v.bind(vars),
            o: self.o.bind(vars),
        }
    }
}

impl BlockWeights<ParamId> {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BlockConfig,
        with_cross: bool,
        rng: &mut R,
    ) -> Self {
        let self_attn = Attention::init(store, &format!("{name}.attn"), cfg.d, rng);
        let ln_self = Norm::init(store, &format!("{name}.ln_attn"), cfg.d);
        let cross = with_cross.then(|| {
            (
                Attention::init(store, &format!("{name}.cross"), cfg.d, rng),
                Norm::init(store, &format!("{name}.ln_cross"), cfg.d),
            )
        });
        let ffn = FeedForward {
            up: Dense::init(store, &format!("{name}.ffn.up"), cfg.d, cfg.ffn_inner, rng),
            down: Dense::init(store, &format!("{name}.ffn.down"), cfg.ffn_inner, cfg.d, rng),
        };
        let ln_ffn = Norm::init(store, &format!("{name}.ln_ffn"), cfg.d);
        Self {
            self_attn,
            ln_self,
            cross,
            ffn,
            ln_ffn,
        }
    }

    pub fn bind(&self, vars: &[Var]) -> BlockWeights<Var> {
        BlockWeights {
            self_attn: self.self_attn.bind(vars),
            ln_self: self.ln_self.bind(vars),
            cross: self.cross.as_ref().map(|(a, n)| (a.bind(vars), n.bind(vars))),
            ffn: FeedForward {
                up: self.ffn.up.bind(vars),
                down: self.ffn.down.bind(vars),
            },
            ln_ffn: self.ln_ffn.bind(vars),
        }
    }
}

impl HeadWeights<ParamId> {
    pub fn init<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_en: usize, rng: &mut R) -> Self {
        Self {
            dense: Dense::init(store, &format!("{name}.dense"), d_in, d_en, rng),
            norm: Norm::init(store, &format!("{name}.norm"), d_en),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> HeadWeights<Var> {
        HeadWeights {
            dense: self.dense.bind(vars),
            norm: self.norm.bind(vars),
        }
    }
}

pub fn dense<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, w: &Dense<Var>) -> Result<Var> {
    let h = ctx.tape.matmul(x, w.w)?;
    Ok(ctx.tape.add_bias(h, w.b)?)
}

pub fn norm<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, n: &Norm<Var>) -> Result<Var> {
    Ok(ctx.tape.layer_norm(x, n.gain, n.offset, LN_EPS)?)
}

pub fn feed_forward<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, w: &FeedForward<Var>) -> Result<Var> {
    let h = dense(ctx, x, &w.up)?;
    let h = ctx.tape.gelu(h);
    dense(ctx, h, &w.down)
}

/// Additive key mask of shape `[B, 1, 1, n]` from an attendability grid
/// (`true` = attendable). Returns `None` when every key is attendable.
pub fn key_mask<T: Scalar>(attendable: &[bool], batch: usize, n: usize) -> Result<Option<Tensor<T>>> {
    if attendable.len() != batch * n {
        return Err(Error::Contract(format!(
            "attention mask has {} entries, expected {batch}x{n}",
            attendable.len()
        )));
    }
    if n > 0 {
        for (b, row) in attendable.chunks(n).enumerate() {
            if !row.iter().any(|&a| a) {
                return Err(Error::Contract(format!("sequence {b} has no attendable position")));
            }
        }
    }
    if attendable.iter().all(|&a| a) {
        return Ok(None);
    }
    let data = attendable
        .iter()
        .map(|&a| if a { T::zero() } else { T::lit(MASK_SENTINEL) })
        .collect();
    Ok(Some(Tensor::new(&[batch, 1, 1, n], data)?))
}

/// Multi-head scaled dot-product attention of `q_in[B, nq, d]` over
/// `kv_in[B, nk, d]`. Returns the projected output and the attention
/// weights `[B, heads, nq, nk]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    q_in: Var,
    kv_in: Var,
    w: &Attention<Var>,
    heads: usize,
    mask: Option<&Tensor<T>>,
    attn_dropout_p: f64,
) -> Result<(Var, Var)> {
    let qs = ctx.tape.shape(q_in).to_vec();
    let ks = ctx.tape.shape(kv_in).to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(crate::tensor::TensorError::Shape {
            op: "attention",
            lhs: qs,
            rhs: ks,
        }
        .into());
    }
    let (b, nq, d) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("hidden size {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = dense(ctx, q_in, &w.q)?;
    let q = ctx.tape.reshape(q, &[b, nq, heads, dh])?;
    let q = ctx.tape.permute(q, &[0, 2, 1, 3])?;
    let k = dense(ctx, kv_in, &w.k)?;
    let k = ctx.tape.reshape(k, &[b, nk, heads, dh])?;
    let kt = ctx.tape.permute(k, &[0, 2, 3, 1])?;
    let v = dense(ctx, kv_in, &w.v)?;
    let v = ctx.tape.reshape(v, &[b, nk, heads, dh])?;
    let v = ctx.tape.permute(v, &[0, 2, 1, 3])?;
    let scores = ctx.tape.matmul(q, kt)?;
    let scores = ctx.tape.scale(scores, T::one() / T::lit(dh as f64).sqrt());
    let weights = ctx.tape.softmax_lastdim(scores, mask)?;
    let dropped = ctx.dropout(weights, attn_dropout_p);
    let o = ctx.tape.matmul(dropped, v)?;
    let o = ctx.tape.permute(o, &[0, 2, 1, 3])?;
    let o = ctx.tape.reshape(o, &[b, nq, d])?;
    let out = dense(ctx, o, &w.o)?;
    Ok((out, weights))
}

/// Residual sublayer with the block's normalization placement.
fn sublayer<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    ln: &Norm<Var>,
    cfg: &BlockConfig,
    f: impl FnOnce(&mut Ctx<'_, T>, Var) -> Result<Var>,
) -> Result<Var> {
    match cfg.ln_mode {
        LnMode::Pre => {
            let h = norm(ctx, x, ln)?;
            let h = f(ctx, h)?;
            let h = ctx.dropout(h, cfg.dropout_p);
            Ok(ctx.tape.add(x, h)?)
        }
        LnMode::Post => {
            let h = f(ctx, x)?;
            let h = ctx.dropout(h, cfg.dropout_p);
            let s = ctx.tape.add(x, h)?;
            norm(ctx, s, ln)
        }
    }
}

/// Self-attention block over `x[B, n, d]`. `mask` comes from [`key_mask`].
pub fn self_attention_block<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    w: &BlockWeights<Var>,
    cfg: &BlockConfig,
    mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let x = sublayer(ctx, x, &w.ln_self, cfg, |ctx, h| {
        Ok(multi_head_attention(ctx, h, h, &w.self_attn, cfg.heads, mask, cfg.attn_dropout_p)?.0)
    })?;
    sublayer(ctx, x, &w.ln_ffn, cfg, |ctx, h| feed_forward(ctx, h, &w.ffn))
}

/// Decoder block: self-attention among queries (no causal mask), then
/// cross-attention into `memory[B, n_en, d]`, then feed-forward.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_block<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    q_x: Var,
    memory: Var,
    w: &BlockWeights<Var>,
    cfg: &BlockConfig,
    query_mask: Option<&Tensor<T>>,
    memory_mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let (cross, ln_cross) = w
        .cross
        .as_ref()
        .ok_or_else(|| Error::Contract("cross_attention_block needs cross-attention weights".into()))?;
    if ctx.tape.shape(memory).get(1).copied().unwrap_or(0) == 0 {
        return Err(Error::Contract("cross-attention memory is empty".into()));
    }
    let x = sublayer(ctx, q_x, &w.ln_self, cfg, |ctx, h| {
        Ok(multi_head_attention(ctx, h, h, &w.self_attn, cfg.heads, query_mask, cfg.attn_dropout_p)?.0)
    })?;
    let x = sublayer(ctx, x, ln_cross, cfg, |ctx, h| {
        Ok(multi_head_attention(ctx, h, memory, cross, cfg.heads, memory_mask, cfg.attn_dropout_p)?.0)
    })?;
    sublayer(ctx, x, &w.ln_ffn, cfg, |ctx, h| feed_forward(ctx, h, &w.ffn))
}

/// Dense → GELU → norm → product with the transposed tied embedding.
/// `hidden` is `[.., d_in]`; the result is `[.., |V|]`.
pub fn prediction_head<T: Scalar>(ctx: &mut Ctx<'_, T>, hidden: Var, head: &HeadWeights<Var>, tied_embedding: Var) -> Result<Var> {
    let h = dense(ctx, hidden, &head.dense)?;
    let h = ctx.tape.gelu(h);
    let h = norm(ctx, h, &head.norm)?;
    Ok(ctx.tape.matmul_t(h, tied_embedding)?)
}

/// Adds rows of a positional table to `x[B, m, d]`; `positions` has `B*m` entries.
pub fn add_positions<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, table: Var, positions: &[usize]) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    let lead = &s[..s.len().saturating_sub(1)];
    let bound = ctx.tape.shape(table)[0];
    if let Some(&bad) = positions.iter().find(|&&p| p >= bound) {
        return Err(crate::tensor::TensorError::Index {
            op: "add_positions",
            index: bad,
            bound,
        }
        .into());
    }
    let rows = ctx.tape.gather_rows(table, positions, lead)?;
    Ok(ctx.tape.add(x, rows)?)
}

/// Encoder→decoder width projection; identity when no weights are given.
pub fn projection<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Var, w: Option<&Dense<Var>>) -> Result<Var> {
    match w {
        Some(w) => dense(ctx, x, w),
        None => Ok(x),
    }
}

#[cfg(test)]
mod tests;
