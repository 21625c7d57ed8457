//! AdamW with a linear schedule, the pre-training loop and fine-tuning.

mod checkpoint;

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::corruption::{corrupt, Filter};
use crate::error::{Error, Result};
use crate::io::CorpusDataset;
use crate::models::{classify_forward, forward, Classifier, ModelState};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub warmup_proportion: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold; 0 disables it.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_proportion: 0.06,
            total_steps: 1000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            grad_clip: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_proportion) {
            return Err(Error::Config(format!("warmup_proportion {} outside [0, 1)", self.warmup_proportion)));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("peak_lr {} must be nonnegative", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_proportion * self.total_steps as f64).round() as u64
    }
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> f64 {
    let warm = cfg.warmup_steps();
    let total = cfg.total_steps;
    if step >= total {
        0.0
    } else if step < warm {
        cfg.peak_lr * step as f64 / warm as f64
    } else {
        cfg.peak_lr * (total - step) as f64 / (total - warm) as f64
    }
}

/// First and second moments, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// Collects one gradient per parameter, zero-filled where the loss did not
/// reach it, and rejects non-finite values.
pub fn param_grads<T: Scalar>(store: &ParamStore<T>, vars: &[Var], grads: &mut Gradients<T>) -> Result<Vec<Tensor<T>>> {
    store
        .iter()
        .zip(vars)
        .map(|(p, &v)| {
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            if g.is_finite() {
                Ok(g)
            } else {
                Err(Error::NonFiniteGradient(p.name.clone()))
            }
        })
        .collect()
}

/// One bias-corrected AdamW step with decoupled weight decay. Parameters
/// flagged `decay = false` (biases, norm gains and offsets) are never decayed.
pub fn adam_update<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &mut [Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (p, g) in store.iter().zip(grads.iter()) {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    if cfg.grad_clip > 0.0 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&x| x.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > cfg.grad_clip {
            let s = T::lit(cfg.grad_clip / norm);
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let lr_t = T::lit(lr);
    let eps = T::lit(cfg.eps);
    let shrink = T::one() - T::lit(lr * cfg.weight_decay);
    for (i, p) in store.iter_mut().enumerate() {
        let decay = p.decay && cfg.weight_decay != 0.0;
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            if decay {
                *w = *w * shrink;
            }
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w = *w - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Replaces the model's dropout probabilities when set.
    pub dropout: Option<f64>,
    /// Record real elapsed time in the metrics log; off keeps logs reproducible.
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 1000,
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
            dropout: None,
            wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// `exp(loss)` over the corrupted positions of the step's batch.
    pub ppl_masked: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,lr,loss,ppl_masked,wall_ms";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.4},{}",
            self.step, self.lr, self.loss, self.ppl_masked, self.wall_ms
        )
    }
}

/// Pre-training state: model, optimizer and the single RNG stream that
/// drives batch sampling, corruption seeds and dropout.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub model: ModelState<T>,
    pub adam: AdamState<T>,
    pub opt: OptimizerConfig,
    pub train: TrainConfig,
    pub rng: ChaCha8Rng,
    started: Option<Instant>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: ModelState<T>, opt: OptimizerConfig, train: TrainConfig) -> Result<Self> {
        opt.validate()?;
        train.validate()?;
        if let Some(p) = train.dropout {
            model.cfg.dropout_p = p;
            model.cfg.attn_dropout_p = p;
        }
        let adam = AdamState::new(&model.store);
        let rng = ChaCha8Rng::seed_from_u64(train.seed);
        Ok(Self {
            model,
            adam,
            opt,
            train,
            rng,
            started: None,
        })
    }

    pub fn from_parts(model: ModelState<T>, adam: AdamState<T>, opt: OptimizerConfig, train: TrainConfig, rng: ChaCha8Rng) -> Self {
        Self {
            model,
            adam,
            opt,
            train,
            rng,
            started: None,
        }
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.adam.t
    }

    /// Samples a batch, corrupts it, and applies one optimizer update.
    pub fn step(&mut self, data: &CorpusDataset) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        if data.n != self.model.cfg.seq_len {
            return Err(Error::Config(format!(
                "corpus sequence length {} differs from model seq_len {}",
                data.n, self.model.cfg.seq_len
            )));
        }
        let started = *self.started.get_or_insert_with(Instant::now);
        let b = self.train.batch_size;
        let which: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..data.len())).collect();
        let (ids, pad) = data.batch(&which);
        let seed: u64 = self.rng.random();
        let cfg = &self.model.cfg;
        let cb = corrupt(&ids, &pad, b, data.n, &cfg.masking, cfg.vocab_size, seed)?;

        let lr = lr_at(self.adam.t, &self.opt);
        let mut tape = Tape::new();
        let (vars, w) = self.model.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, Some(&mut self.rng));
        let out = forward(&mut ctx, &self.model, &w, &cb, Filter::ALL)?;
        let loss = tape.value(out.loss).item().to_f64_lossy();
        let mut grads = tape.backward(out.loss)?;
        let mut g = param_grads(&self.model.store, &vars, &mut grads)?;
        adam_update(&mut self.model.store, &mut g, &mut self.adam, lr, &self.opt)?;
        Ok(StepMetrics {
            step: self.adam.t,
            lr,
            loss,
            ppl_masked: loss.exp(),
            wall_ms: if self.train.wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }
}

/// Runs `train.max_steps` updates, writing metrics rows every `log_every`
/// steps to `log` (header included when starting from step 0).
pub fn pretrain<T: Scalar>(trainer: &mut Trainer<T>, data: &CorpusDataset, mut log: Option<&mut dyn Write>) -> Result<Vec<StepMetrics>> {
    if trainer.step_count() == 0 {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{METRICS_HEADER}")?;
        }
    }
    let mut all = Vec::new();
    while trainer.step_count() < trainer.train.max_steps {
        let m = trainer.step(data)?;
        if let Some(w) = log.as_deref_mut() {
            if trainer.train.log_every > 0 && m.step % trainer.train.log_every == 0 {
                writeln!(w, "{}", m.csv_row())?;
            }
        }
        all.push(m);
    }
    Ok(all)
}

/// Labelled sequences for classification.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub data: CorpusDataset,
    pub labels: Vec<usize>,
}

/// Fine-tunes a stripped encoder; returns per-step training losses.
pub fn finetune<T: Scalar>(
    model: &mut Classifier<T>,
    set: &LabeledSet,
    opt: &OptimizerConfig,
    batch_size: usize,
    steps: u64,
    seed: u64,
) -> Result<Vec<f64>> {
    opt.validate()?;
    if set.data.is_empty() || set.labels.len() != set.data.len() {
        return Err(Error::Data("fine-tuning set is empty or has mismatched labels".into()));
    }
    if let Some(&bad) = set.labels.iter().find(|&&l| l >= model.num_classes) {
        return Err(Error::Data(format!("label {bad} outside {} classes", model.num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(&model.store);
    let n = set.data.n;
    let mut losses = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let which: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..set.data.len())).collect();
        let (ids, pad) = set.data.batch(&which);
        let targets: Vec<usize> = which.iter().map(|&i| set.labels[i]).collect();
        let lr = lr_at(adam.t, opt);
        let mut tape = Tape::new();
        let (vars, w) = model.bind(&mut tape);
        let mut ctx = Ctx::new(&mut tape, Some(&mut rng));
        let logits = classify_forward(&mut ctx, model, &w, &ids, &pad, batch_size, n)?;
        let loss = tape.masked_cross_entropy(logits, &targets, &vec![true; batch_size])?;
        losses.push(tape.value(loss).item().to_f64_lossy());
        let mut grads = tape.backward(loss)?;
        let mut g = param_grads(&model.store, &vars, &mut grads)?;
        adam_update(&mut model.store, &mut g, &mut adam, lr, opt)?;
    }
    Ok(losses)
}

/// Predicted class per sequence.
pub fn predict<T: Scalar>(model: &Classifier<T>, data: &CorpusDataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (ids, pad) = data.batch(chunk);
        let mut tape = Tape::new();
        let (_, w) = model.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape);
        let logits = classify_forward(&mut ctx, model, &w, &ids, &pad, chunk.len(), data.n)?;
        let lv = tape.value(logits);
        for r in 0..chunk.len() {
            let row = lv.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal))
                .unwrap_or(0);
            preds.push(best);
        }
    }
    Ok(preds)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64
}

#[cfg(test)]
mod tests;
