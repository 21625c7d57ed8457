//! Vanilla MLM, the two-stage self- and cross-attention decoders, and the
//! encoder-only classifier used for fine-tuning.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corruption::{encoder_view_padded, CorruptedBatch, Filter, Kind, MaskingConfig};
use crate::error::{Error, Result};
use crate::nn::{
    add_positions, cross_attention_block, dense, key_mask, prediction_head, projection, self_attention_block,
    BlockConfig, BlockWeights, Ctx, Dense, HeadWeights, LnMode, ParamId, ParamStore,
};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Vanilla,
    ThreeMlSelf,
    ThreeMlCross,
}

impl Arch {
    pub fn is_two_stage(self) -> bool {
        self != Arch::Vanilla
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Vanilla => "vanilla",
            Arch::ThreeMlSelf => "3ml_self",
            Arch::ThreeMlCross => "3ml_cross",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" | "mlm" => Ok(Arch::Vanilla),
            "3ml_self" | "self" => Ok(Arch::ThreeMlSelf),
            "3ml_cross" | "cross" => Ok(Arch::ThreeMlCross),
            other => Err(Error::Config(format!("unknown arch `{other}` (vanilla|3ml_self|3ml_cross)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    /// Sequence length used by the data pipeline.
    pub seq_len: usize,
    /// Rows in each positional table.
    pub max_positions: usize,
    pub l_en: usize,
    pub d_en: usize,
    pub h_en: usize,
    pub l_de: usize,
    pub d_de: usize,
    pub h_de: usize,
    pub ln_mode: LnMode,
    pub dropout_p: f64,
    pub attn_dropout_p: f64,
    pub masking: MaskingConfig,
}

impl ModelConfig {
    /// Two decoder layers at half the encoder width.
    pub fn new(arch: Arch, vocab_size: usize, seq_len: usize, l_en: usize, d_en: usize, h_en: usize) -> Self {
        let d_de = (d_en / 2).max(1);
        Self {
            arch,
            vocab_size,
            seq_len,
            max_positions: seq_len,
            l_en,
            d_en,
            h_en,
            l_de: 2,
            d_de,
            h_de: (h_en / 2).max(1),
            ln_mode: LnMode::Pre,
            dropout_p: 0.0,
            attn_dropout_p: 0.0,
            masking: MaskingConfig::default(),
        }
    }

    pub fn encoder_block(&self) -> BlockConfig {
        BlockConfig {
            dropout_p: self.dropout_p,
            attn_dropout_p: self.attn_dropout_p,
            ..BlockConfig::new(self.d_en, self.h_en, self.ln_mode)
        }
    }

    pub fn decoder_block(&self) -> BlockConfig {
        BlockConfig {
            dropout_p: self.dropout_p,
            attn_dropout_p: self.attn_dropout_p,
            ..BlockConfig::new(self.d_de, self.h_de, self.ln_mode)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= crate::io::special::COUNT {
            return Err(Error::Config(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size)));
        }
        if self.seq_len == 0 || self.max_positions < self.seq_len {
            return Err(Error::Config(format!(
                "seq_len {} must be positive and at most max_positions {}",
                self.seq_len, self.max_positions
            )));
        }
        if self.l_en == 0 {
            return Err(Error::Config("l_en must be at least 1".into()));
        }
        self.encoder_block().validate()?;
        if self.arch.is_two_stage() {
            self.decoder_block().validate()?;
        }
        if self.arch == Arch::ThreeMlCross && self.ln_mode == LnMode::Post {
            return Err(Error::Config(
                "3ml_cross is unstable with post-LN; use ln_mode = pre".into(),
            ));
        }
        for p in [self.dropout_p, self.attn_dropout_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        self.masking.validate()
    }
}

/// Encoder weights shared by every architecture and kept by fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayout<H> {
    pub embed: H,
    pub pos: H,
    pub blocks: Vec<BlockWeights<H>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout<H> {
    pub encoder: EncoderLayout<H>,
    pub dec_pos: Option<H>,
    pub latent: Option<H>,
    pub proj: Option<Dense<H>>,
    pub dec_blocks: Vec<BlockWeights<H>>,
    pub head: HeadWeights<H>,
    /// Output matrix of the heads; the same parameter as `encoder.embed`.
    pub output_embed: H,
    /// Head on raw encoder outputs for replaced/kept tokens (cross only).
    pub enc_head: Option<HeadWeights<H>>,
}

impl EncoderLayout<ParamId> {
    fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let embed = store.add_normal("embed", &[cfg.vocab_size, cfg.d_en], rng);
        let pos = store.add_normal("enc.pos", &[cfg.max_positions, cfg.d_en], rng);
        let bc = cfg.encoder_block();
        let blocks = (0..cfg.l_en)
            .map(|i| BlockWeights::init(store, &format!("enc.{i}"), &bc, false, rng))
            .collect();
        Self { embed, pos, blocks }
    }

    pub fn bind(&self, vars: &[Var]) -> EncoderLayout<Var> {
        EncoderLayout {
            embed: vars[self.embed.0],
            pos: vars[self.pos.0],
            blocks: self.blocks.iter().map(|b| b.bind(vars)).collect(),
        }
    }
}

impl Layout<ParamId> {
    pub fn bind(&self, vars: &[Var]) -> Layout<Var> {
        Layout {
            encoder: self.encoder.bind(vars),
            dec_pos: self.dec_pos.map(|p| vars[p.0]),
            latent: self.latent.map(|p| vars[p.0]),
            proj: self.proj.as_ref().map(|p| p.bind(vars)),
            dec_blocks: self.dec_blocks.iter().map(|b| b.bind(vars)).collect(),
            head: self.head.bind(vars),
            output_embed: vars[self.output_embed.0],
            enc_head: self.enc_head.as_ref().map(|h| h.bind(vars)),
        }
    }
}

/// Configuration plus all learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: Layout<ParamId>,
}

impl<T: Scalar> ModelState<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderLayout::init(&mut store, cfg, &mut rng);
        let two_stage = cfg.arch.is_two_stage();
        let dec_pos = two_stage.then(|| store.add_normal("dec.pos", &[cfg.max_positions, cfg.d_de], &mut rng));
        let latent = two_stage.then(|| store.add_normal("latent", &[cfg.d_de], &mut rng));
        let proj = (two_stage && cfg.d_de != cfg.d_en).then(|| Dense::init(&mut store, "proj", cfg.d_en, cfg.d_de, &mut rng));
        let dec_blocks = if two_stage {
            let bc = cfg.decoder_block();
            let cross = cfg.arch == Arch::ThreeMlCross;
            (0..cfg.l_de)
                .map(|i| BlockWeights::init(&mut store, &format!("dec.{i}"), &bc, cross, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let d_head_in = if two_stage { cfg.d_de } else { cfg.d_en };
        let head = HeadWeights::init(&mut store, "head", d_head_in, cfg.d_en, &mut rng);
        let enc_head =
            (cfg.arch == Arch::ThreeMlCross).then(|| HeadWeights::init(&mut store, "enc_head", cfg.d_en, cfg.d_en, &mut rng));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            layout: Layout {
                output_embed: encoder.embed,
                encoder,
                dec_pos,
                latent,
                proj,
                dec_blocks,
                head,
                enc_head,
            },
        })
    }

    /// Registers the weights on `tape`. The first vector is indexed by
    /// [`ParamId`] and is what gradient lookups use.
    pub fn bind(&self, tape: &mut Tape<T>) -> (Vec<Var>, Layout<Var>) {
        let vars = self.store.bind(tape);
        let layout = self.layout.bind(&vars);
        (vars, layout)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }
}

/// Everything a forward pass exposes to training, evaluation and probes.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Mean negative log-likelihood over the pooled target rows.
    pub loss: Var,
    pub num_targets: usize,
    /// Logits of the main (vanilla or decoder) head, one row per entry of `logit_positions`.
    pub logits: Option<Var>,
    pub logit_positions: Vec<usize>,
    /// Encoder-side logits of the cross model.
    pub enc_logits: Option<Var>,
    pub enc_logit_positions: Vec<usize>,
    /// Embedded encoder input (word plus position rows).
    pub encoder_input: Var,
    /// Final encoder hidden states `[B, n_en, d_en]` (`n_en = n` for vanilla).
    pub encoder_out: Var,
    /// Hidden states probed at masked positions, input layer first.
    pub probe_layers: Vec<Var>,
    /// Row of each probe layer (viewed as `[rows, d]`) holding a masked slot.
    pub probe_rows: Vec<usize>,
    /// Flat `b * n + t` grid index of each probe row.
    pub probe_positions: Vec<usize>,
}

fn encode<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    w: &EncoderLayout<Var>,
    ids: &[usize],
    positions: &[usize],
    attendable: &[bool],
    batch: usize,
    len: usize,
) -> Result<Vec<Var>> {
    let x = ctx.tape.embedding_lookup(w.embed, ids, &[batch, len])?;
    let x = add_positions(ctx, x, w.pos, positions)?;
    let mut x = ctx.dropout(x, cfg.dropout_p);
    let mask = key_mask::<T>(attendable, batch, len)?;
    let bc = cfg.encoder_block();
    let mut layers = vec![x];
    for blk in &w.blocks {
        x = self_attention_block(ctx, x, blk, &bc, mask.as_ref())?;
        layers.push(x);
    }
    Ok(layers)
}

/// Encoder over uncorrupted `[batch, n]` ids with positions `0..n`.
pub fn encode_full<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cfg: &ModelConfig,
    w: &EncoderLayout<Var>,
    ids: &[usize],
    pad: &[bool],
    batch: usize,
    n: usize,
) -> Result<Vec<Var>> {
    let positions: Vec<usize> = (0..batch * n).map(|i| i % n).collect();
    let attendable: Vec<bool> = pad.iter().map(|&p| !p).collect();
    encode(ctx, cfg, w, ids, &positions, &attendable, batch, n)
}

fn head_rows<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    hidden: Var,
    rows: &[usize],
    head: &HeadWeights<Var>,
    embed: Var,
) -> Result<Option<Var>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let h = ctx.tape.gather_rows(hidden, rows, &[rows.len()])?;
    Ok(Some(prediction_head(ctx, h, head, embed)?))
}

fn pooled_loss<T: Scalar>(ctx: &mut Ctx<'_, T>, cb: &CorruptedBatch, parts: &[(Option<Var>, &[usize])]) -> Result<(Var, usize)> {
    let logits: Vec<Var> = parts.iter().filter_map(|(l, _)| *l).collect();
    let targets: Vec<usize> = parts.iter().flat_map(|(_, p)| p.iter().map(|&i| cb.original[i])).collect();
    if logits.is_empty() {
        return Err(Error::Contract("batch has no loss targets for the requested categories".into()));
    }
    let all = if logits.len() == 1 { logits[0] } else { ctx.tape.concat(&logits)? };
    let n = targets.len();
    Ok((ctx.tape.masked_cross_entropy(all, &targets, &vec![true; n])?, n))
}

fn check_batch<T: Scalar>(state: &ModelState<T>, cb: &CorruptedBatch) -> Result<()> {
    if cb.n > state.cfg.max_positions {
        return Err(Error::Contract(format!(
            "sequence length {} exceeds max_positions {}",
            cb.n, state.cfg.max_positions
        )));
    }
    Ok(())
}

/// Dispatches on the architecture.
pub fn forward<T: Scalar>(ctx: &mut Ctx<'_, T>, state: &ModelState<T>, w: &Layout<Var>, cb: &CorruptedBatch, filter: Filter) -> Result<ForwardOutput> {
    match state.cfg.arch {
        Arch::Vanilla => forward_vanilla(ctx, state, w, cb, filter),
        Arch::ThreeMlSelf => forward_threeml_self(ctx, state, w, cb, filter),
        Arch::ThreeMlCross => forward_threeml_cross(ctx, state, w, cb, filter),
    }
}

pub fn forward_vanilla<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    state: &ModelState<T>,
    w: &Layout<Var>,
    cb: &CorruptedBatch,
    filter: Filter,
) -> Result<ForwardOutput> {
    check_batch(state, cb)?;
    let (b, n) = (cb.batch, cb.n);
    let layers = encode_full(ctx, &state.cfg, &w.encoder, &cb.corrupted, &cb.pad, b, n)?;
    let hidden = *layers.last().expect("at least one layer");
    let positions: Vec<usize> = (0..b * n).filter(|&i| filter.contains(cb.kind[i])).collect();
    let logits = head_rows(ctx, hidden, &positions, &w.head, w.output_embed)?;
    let (loss, num_targets) = pooled_loss(ctx, cb, &[(logits, &positions)])?;
    let masked: Vec<usize> = (0..b * n).filter(|&i| cb.kind[i] == Kind::Masked).collect();
    Ok(ForwardOutput {
        loss,
        num_targets,
        logits,
        logit_positions: positions,
        enc_logits: None,
        enc_logit_positions: Vec::new(),
        encoder_input: layers[0],
        encoder_out: hidden,
        probe_layers: layers,
        probe_rows: masked.clone(),
        probe_positions: masked,
    })
}

/// Shared first stage of both two-stage models: encoder over the unmasked
/// stream at original positions, then projection to the decoder width.
struct Stage1 {
    view: crate::corruption::EncoderView,
    encoder_input: Var,
    encoder_out: Var,
    projected: Var,
}

fn stage1<T: Scalar>(ctx: &mut Ctx<'_, T>, state: &ModelState<T>, w: &Layout<Var>, cb: &CorruptedBatch) -> Result<Stage1> {
    check_batch(state, cb)?;
    let view = encoder_view_padded(cb);
    if view.n_mask == 0 {
        return Err(Error::Contract("two-stage models need at least one masked position per batch".into()));
    }
    if view.n_en == 0 {
        return Err(Error::Contract("every position is masked; the encoder would be empty".into()));
    }
    let attendable: Vec<bool> = view.pad.iter().map(|&p| !p).collect();
    let layers = encode(ctx, &state.cfg, &w.encoder, &view.ids, &view.positions, &attendable, cb.batch, view.n_en)?;
    let encoder_out = *layers.last().expect("at least one layer");
    let projected = projection(ctx, encoder_out, w.proj.as_ref())?;
    Ok(Stage1 {
        view,
        encoder_input: layers[0],
        encoder_out,
        projected,
    })
}

fn decoder_parts<'w>(w: &'w Layout<Var>) -> Result<(Var, Var)> {
    match (w.latent, w.dec_pos) {
        (Some(l), Some(p)) => Ok((l, p)),
        _ => Err(Error::Contract("model has no decoder weights".into())),
    }
}

pub fn forward_threeml_self<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    state: &ModelState<T>,
    w: &Layout<Var>,
    cb: &CorruptedBatch,
    filter: Filter,
) -> Result<ForwardOutput> {
    let (b, n) = (cb.batch, cb.n);
    let s1 = stage1(ctx, state, w, cb)?;
    let (latent, dec_pos) = decoder_parts(w)?;
    let d_de = state.cfg.d_de;
    let n_en = s1.view.n_en;

    // rows 0..b*n_en are projected encoder slots; the last row is the latent
    let flat = ctx.tape.reshape(s1.projected, &[b * n_en, d_de])?;
    let lat = ctx.tape.reshape(latent, &[1, d_de])?;
    let src = ctx.tape.concat(&[flat, lat])?;
    let latent_row = b * n_en;
    let mut idx = vec![latent_row; b * n];
    for r in 0..b {
        for j in 0..n_en {
            let c = r * n_en + j;
            if !s1.view.fill[c] {
                idx[r * n + s1.view.positions[c]] = c;
            }
        }
    }
    let x = ctx.tape.gather_rows(src, &idx, &[b, n])?;
    let positions: Vec<usize> = (0..b * n).map(|i| i % n).collect();
    let x = add_positions(ctx, x, dec_pos, &positions)?;
    let mut x = ctx.dropout(x, state.cfg.dropout_p);
    let attendable: Vec<bool> = cb.pad.iter().map(|&p| !p).collect();
    let mask = key_mask::<T>(&attendable, b, n)?;
    let bc = state.cfg.decoder_block();
    let mut layers = vec![x];
    for blk in &w.dec_blocks {
        x = self_attention_block(ctx, x, blk, &bc, mask.as_ref())?;
        layers.push(x);
    }
    let targets: Vec<usize> = (0..b * n).filter(|&i| filter.contains(cb.kind[i])).collect();
    let logits = head_rows(ctx, x, &targets, &w.head, w.output_embed)?;
    let (loss, num_targets) = pooled_loss(ctx, cb, &[(logits, &targets)])?;
    let masked: Vec<usize> = (0..b * n).filter(|&i| cb.kind[i] == Kind::Masked).collect();
    Ok(ForwardOutput {
        loss,
        num_targets,
        logits,
        logit_positions: targets,
        enc_logits: None,
        enc_logit_positions: Vec::new(),
        encoder_input: s1.encoder_input,
        encoder_out: s1.encoder_out,
        probe_layers: layers,
        probe_rows: masked.clone(),
        probe_positions: masked,
    })
}

pub fn forward_threeml_cross<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    state: &ModelState<T>,
    w: &Layout<Var>,
    cb: &CorruptedBatch,
    filter: Filter,
) -> Result<ForwardOutput> {
    let (b, n) = (cb.batch, cb.n);
    let s1 = stage1(ctx, state, w, cb)?;
    let (latent, dec_pos) = decoder_parts(w)?;
    let v = &s1.view;
    let n_de = v.n_mask;

    let x = ctx.tape.gather_rows(latent, &vec![0; b * n_de], &[b, n_de])?;
    let x = add_positions(ctx, x, dec_pos, &v.masked_positions)?;
    let mut x = ctx.dropout(x, state.cfg.dropout_p);
    // a row without masks keeps one dummy query attendable; it is never scored
    let q_ok: Vec<bool> = (0..b * n_de).map(|i| !v.masked_fill[i] || i % n_de == 0).collect();
    let q_mask = key_mask::<T>(&q_ok, b, n_de)?;
    let m_ok: Vec<bool> = v.pad.iter().map(|&p| !p).collect();
    let m_mask = key_mask::<T>(&m_ok, b, v.n_en)?;
    let bc = state.cfg.decoder_block();
    let mut layers = vec![x];
    for blk in &w.dec_blocks {
        x = cross_attention_block(ctx, x, s1.projected, blk, &bc, q_mask.as_ref(), m_mask.as_ref())?;
        layers.push(x);
    }

    let slots: Vec<usize> = (0..b * n_de).filter(|&i| !v.masked_fill[i]).collect();
    let slot_pos: Vec<usize> = slots.iter().map(|&i| (i / n_de) * n + v.masked_positions[i]).collect();
    let (dec_rows, dec_pos_flat): (Vec<usize>, Vec<usize>) = if filter.masked {
        (slots.clone(), slot_pos.clone())
    } else {
        (Vec::new(), Vec::new())
    };
    let logits = head_rows(ctx, x, &dec_rows, &w.head, w.output_embed)?;

    let mut enc_rows = Vec::new();
    let mut enc_pos = Vec::new();
    for i in 0..b * v.n_en {
        if v.fill[i] {
            continue;
        }
        let p = (i / v.n_en) * n + v.positions[i];
        if filter.contains(cb.kind[p]) {
            enc_rows.push(i);
            enc_pos.push(p);
        }
    }
    let enc_head = w
        .enc_head
        .as_ref()
        .ok_or_else(|| Error::Contract("cross model has no encoder-side head".into()))?;
    let enc_logits = head_rows(ctx, s1.encoder_out, &enc_rows, enc_head, w.output_embed)?;
    let (loss, num_targets) = pooled_loss(ctx, cb, &[(logits, &dec_pos_flat), (enc_logits, &enc_pos)])?;
    Ok(ForwardOutput {
        loss,
        num_targets,
        logits,
        logit_positions: dec_pos_flat,
        enc_logits,
        enc_logit_positions: enc_pos,
        encoder_input: s1.encoder_input,
        encoder_out: s1.encoder_out,
        probe_layers: layers,
        probe_rows: slots,
        probe_positions: slot_pos,
    })
}

/// Encoder plus a pooled classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub cfg: ModelConfig,
    pub num_classes: usize,
    pub store: ParamStore<T>,
    pub encoder: EncoderLayout<ParamId>,
    pub pooler: Dense<ParamId>,
    pub out: Dense<ParamId>,
}

pub struct ClassifierVars {
    pub encoder: EncoderLayout<Var>,
    pub pooler: Dense<Var>,
    pub out: Dense<Var>,
}

/// Keeps the word embedding, encoder positions and encoder blocks, and
/// attaches a fresh pooled head seeded by `seed`.
pub fn strip_for_finetune<T: Scalar>(state: &ModelState<T>, num_classes: usize, seed: u64) -> Result<Classifier<T>> {
    if num_classes < 2 {
        return Err(Error::Config("a classifier needs at least two classes".into()));
    }
    let mut store = ParamStore::new();
    let mut remap = |id: ParamId| {
        let p = state.store.param(id);
        store.add(p.name.clone(), p.value.clone(), p.decay)
    };
    let src = &state.layout.encoder;
    let embed = remap(src.embed);
    let pos = remap(src.pos);
    let mut blocks = Vec::with_capacity(src.blocks.len());
    for blk in &src.blocks {
        blocks.push(blk.map(&mut remap));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = state.cfg.d_en;
    let pooler = Dense::init(&mut store, "cls.pooler", d, d, &mut rng);
    let out = Dense::init(&mut store, "cls.out", d, num_classes, &mut rng);
    let mut cfg = state.cfg.clone();
    cfg.arch = Arch::Vanilla;
    Ok(Classifier {
        cfg,
        num_classes,
        store,
        encoder: EncoderLayout { embed, pos, blocks },
        pooler,
        out,
    })
}

impl<T: Scalar> Classifier<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> (Vec<Var>, ClassifierVars) {
        let vars = self.store.bind(tape);
        let cv = ClassifierVars {
            encoder: self.encoder.bind(&vars),
            pooler: self.pooler.bind(&vars),
            out: self.out.bind(&vars),
        };
        (vars, cv)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

/// Class logits `[batch, classes]` pooled from the leading token.
pub fn classify_forward<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    model: &Classifier<T>,
    w: &ClassifierVars,
    ids: &[usize],
    pad: &[bool],
    batch: usize,
    n: usize,
) -> Result<Var> {
    if n > model.cfg.max_positions {
        return Err(Error::Contract(format!("sequence length {n} exceeds max_positions {}", model.cfg.max_positions)));
    }
    let layers = encode_full(ctx, &model.cfg, &w.encoder, ids, pad, batch, n)?;
    let hidden = *layers.last().expect("at least one layer");
    let first: Vec<usize> = (0..batch).map(|b| b * n).collect();
    let pooled = ctx.tape.gather_rows(hidden, &first, &[batch])?;
    let h = dense(ctx, pooled, &w.pooler)?;
    let h = ctx.tape.tanh(h);
    let h = ctx.dropout(h, model.cfg.dropout_p);
    dense(ctx, h, &w.out)
}
