//! Per-category perplexity and the layerwise mutual-information probe.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corruption::{corrupt, Filter, Kind, MaskingConfig};
use crate::error::{Error, Result};
use crate::io::{special, CorpusDataset};
use crate::models::{forward, ModelState};
use crate::nn::Ctx;
use crate::tensor::{Scalar, Tape};

/// Sequences per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MIProbeConfig {
    pub num_token_labels: usize,
    pub k: usize,
    pub max_samples: usize,
    pub kmeans_batch: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for MIProbeConfig {
    fn default() -> Self {
        Self {
            num_token_labels: 50,
            k: 200,
            max_samples: 50_000,
            kmeans_batch: 1024,
            kmeans_iters: 200,
            seed: 0,
        }
    }
}

impl MIProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("probe k = {} must be at least 2", self.k)));
        }
        if self.max_samples < self.k {
            return Err(Error::Config(format!("probe samples {} must be at least k = {}", self.max_samples, self.k)));
        }
        if self.num_token_labels == 0 || self.kmeans_batch == 0 {
            return Err(Error::Config("probe labels and kmeans_batch must be positive".into()));
        }
        Ok(())
    }
}

fn eval_batches(data: &CorpusDataset) -> impl Iterator<Item = Vec<usize>> + '_ {
    (0..data.len()).step_by(EVAL_BATCH).map(move |s| (s..(s + EVAL_BATCH).min(data.len())).collect())
}

/// Summed NLL and target count over a corpus for one category filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllTotal {
    pub nll: f64,
    pub targets: usize,
}

impl NllTotal {
    pub fn perplexity(&self) -> f64 {
        (self.nll / self.targets as f64).exp()
    }
}

/// Corrupts every sequence of `data` once (batch seeds drawn from `seed`)
/// and sums the NLL of the targets selected by `filter`. Two-stage batches
/// without a masked position are skipped, as are batches without targets.
pub fn corpus_nll<T: Scalar>(
    model: &ModelState<T>,
    data: &CorpusDataset,
    masking: &MaskingConfig,
    filter: Filter,
    seed: u64,
) -> Result<NllTotal> {
    if data.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    if filter.is_empty() {
        return Err(Error::Config("category filter selects nothing".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = NllTotal { nll: 0.0, targets: 0 };
    for which in eval_batches(data) {
        let (ids, pad) = data.batch(&which);
        let cb = corrupt(&ids, &pad, which.len(), data.n, masking, model.cfg.vocab_size, rng.random())?;
        let has_mask = cb.kind.contains(&Kind::Masked);
        if cb.num_targets(filter) == 0 || (model.cfg.arch.is_two_stage() && !has_mask) {
            continue;
        }
        let mut tape = Tape::new();
        let (_, w) = model.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape);
        let out = forward(&mut ctx, model, &w, &cb, filter)?;
        total.nll += tape.value(out.loss).item().to_f64_lossy() * out.num_targets as f64;
        total.targets += out.num_targets;
    }
    if total.targets == 0 {
        return Err(Error::Data("no evaluation targets in the corpus for this category".into()));
    }
    Ok(total)
}

/// `exp` of the mean NLL over the filtered target positions.
pub fn perplexity<T: Scalar>(model: &ModelState<T>, data: &CorpusDataset, masking: &MaskingConfig, filter: Filter, seed: u64) -> Result<f64> {
    Ok(corpus_nll(model, data, masking, filter, seed)?.perplexity())
}

/// The `k` most frequent ordinary token ids of a corpus, ties to the smaller id.
pub fn top_tokens(data: &CorpusDataset, k: usize) -> Vec<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for i in 0..data.len() {
        for &t in data.seq(i) {
            if !special::is_special(t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut v: Vec<(usize, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(t, _)| t).collect()
}

/// Hidden vectors of one probed layer, row-major `[samples, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSamples {
    pub layer: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSamples {
    pub layers: Vec<LayerSamples>,
    /// Original token id of every sample.
    pub labels: Vec<usize>,
}

/// Number of probe layers: every encoder layer for vanilla (input first),
/// the decoder input plus each decoder layer for two-stage models.
pub fn probe_layer_count(cfg: &crate::models::ModelConfig) -> usize {
    if cfg.arch.is_two_stage() {
        cfg.l_de + 1
    } else {
        cfg.l_en + 1
    }
}

/// Hidden states at masked positions whose original token is in `labels`,
/// for every probe layer at once, up to `cfg.max_samples`.
pub fn collect_hidden_all<T: Scalar>(
    model: &ModelState<T>,
    data: &CorpusDataset,
    labels: &[usize],
    cfg: &MIProbeConfig,
) -> Result<HiddenSamples> {
    cfg.validate()?;
    let keep: std::collections::HashSet<usize> = labels.iter().copied().collect();
    let count = probe_layer_count(&model.cfg);
    let mut out = HiddenSamples {
        layers: (0..count).map(|layer| LayerSamples { layer, d: 0, data: Vec::new() }).collect(),
        labels: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    'outer: for which in eval_batches(data) {
        let (ids, pad) = data.batch(&which);
        let cb = corrupt(&ids, &pad, which.len(), data.n, &model.cfg.masking, model.cfg.vocab_size, rng.random())?;
        if !cb.kind.contains(&Kind::Masked) {
            continue;
        }
        let mut tape = Tape::new();
        let (_, w) = model.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape);
        let fo = forward(&mut ctx, model, &w, &cb, Filter::MASKED)?;
        for (&row, &pos) in fo.probe_rows.iter().zip(&fo.probe_positions) {
            if out.labels.len() >= cfg.max_samples {
                break 'outer;
            }
            let label = cb.original[pos];
            if !keep.contains(&label) {
                continue;
            }
            for (ls, &v) in out.layers.iter_mut().zip(&fo.probe_layers) {
                let t = tape.value(v);
                let d = *t.shape().last().expect("hidden states have a width");
                ls.d = d;
                ls.data.extend(t.data()[row * d..(row + 1) * d].iter().map(|x| x.to_f64_lossy()));
            }
            out.labels.push(label);
        }
    }
    if out.labels.len() < cfg.k {
        return Err(Error::Data(format!(
            "only {} probe samples for k = {}; use a larger corpus or a smaller k",
            out.labels.len(),
            cfg.k
        )));
    }
    Ok(out)
}

/// One probe layer; see [`collect_hidden_all`].
pub fn collect_hidden<T: Scalar>(
    model: &ModelState<T>,
    data: &CorpusDataset,
    layer: usize,
    labels: &[usize],
    cfg: &MIProbeConfig,
) -> Result<(LayerSamples, Vec<usize>)> {
    let count = probe_layer_count(&model.cfg);
    if layer >= count {
        return Err(Error::Config(format!("layer {layer} is not probed ({count} probe layers)")));
    }
    let mut all = collect_hidden_all(model, data, labels, cfg)?;
    Ok((all.layers.swap_remove(layer), all.labels))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Mean squared distance after each full-assignment evaluation.
    pub objective_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(d).enumerate() {
        let dist = sq_dist(x, center);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

fn assign_all(data: &[f64], d: usize, centers: &[f64]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let a = data
        .chunks_exact(d)
        .map(|x| {
            let (c, dist) = nearest(x, centers, d);
            total += dist;
            c
        })
        .collect();
    (a, total / (data.len() / d) as f64)
}

fn plus_plus(data: &[f64], d: usize, k: usize, pool: &[usize], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let point = |i: usize| &data[i * d..(i + 1) * d];
    let mut centers = Vec::with_capacity(k * d);
    centers.extend_from_slice(point(pool[rng.random_range(0..pool.len())]));
    let mut dist: Vec<f64> = pool.iter().map(|&i| sq_dist(point(i), &centers[..d])).collect();
    for _ in 1..k {
        let sum: f64 = dist.iter().sum();
        let pick = if sum > 0.0 {
            let mut u = rng.random::<f64>() * sum;
            let mut j = 0;
            while j + 1 < dist.len() && u >= dist[j] {
                u -= dist[j];
                j += 1;
            }
            j
        } else {
            rng.random_range(0..pool.len())
        };
        let start = centers.len();
        centers.extend_from_slice(point(pool[pick]));
        for (dj, &i) in dist.iter_mut().zip(pool) {
            *dj = dj.min(sq_dist(point(i), &centers[start..]));
        }
    }
    centers
}

/// Mini-batch k-means with k-means++ seeding. The full objective is
/// evaluated every few iterations and the best centers seen are kept.
/// Ties in assignment go to the lower center index.
pub fn minibatch_kmeans(data: &[f64], d: usize, k: usize, batch: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if d == 0 || data.len() % d != 0 {
        return Err(Error::Contract(format!("{} values do not form rows of width {d}", data.len())));
    }
    let n = data.len() / d;
    if k == 0 || n < k {
        return Err(Error::Contract(format!("k-means needs at least k = {k} points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool_size = n.min((10 * k).max(batch));
    let pool = sample(&mut rng, n, pool_size).into_vec();
    let mut centers = plus_plus(data, d, k, &pool, &mut rng);
    let mut counts = vec![0usize; k];
    let (mut best_assign, mut best_obj) = assign_all(data, d, &centers);
    let mut best_centers = centers.clone();
    let mut trace = vec![best_obj];
    let eval_every = 10;
    let batch = batch.min(n);
    for it in 1..=iters {
        let idx = sample(&mut rng, n, batch).into_vec();
        let near: Vec<usize> = idx.iter().map(|&i| nearest(&data[i * d..(i + 1) * d], &centers, d).0).collect();
        for (&i, &c) in idx.iter().zip(&near) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (cv, &xv) in centers[c * d..(c + 1) * d].iter_mut().zip(&data[i * d..(i + 1) * d]) {
                *cv += eta * (xv - *cv);
            }
        }
        if it % eval_every == 0 || it == iters {
            let (a, obj) = assign_all(data, d, &centers);
            if obj < best_obj {
                best_obj = obj;
                best_assign = a;
                best_centers.copy_from_slice(&centers);
            }
            trace.push(best_obj);
        }
    }
    Ok(KMeans {
        centers: best_centers,
        assignments: best_assign,
        objective_trace: trace,
    })
}

/// Shannon entropy in bits of the empirical distribution of `xs`.
pub fn entropy_bits(xs: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &x in xs {
        *counts.entry(x).or_default() += 1;
    }
    let n = xs.len() as f64;
    -counts.values().map(|&c| c as f64 / n).map(|p| p * p.log2()).sum::<f64>()
}

/// Plug-in mutual information in bits of the empirical joint of two sequences.
pub fn mutual_information(labels: &[usize], clusters: &[usize]) -> Result<f64> {
    if labels.len() != clusters.len() {
        return Err(Error::Contract(format!("{} labels but {} cluster ids", labels.len(), clusters.len())));
    }
    if labels.is_empty() {
        return Err(Error::Contract("mutual information of an empty sample".into()));
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut pl: HashMap<usize, usize> = HashMap::new();
    let mut pc: HashMap<usize, usize> = HashMap::new();
    for (&t, &c) in labels.iter().zip(clusters) {
        *joint.entry((t, c)).or_default() += 1;
        *pl.entry(t).or_default() += 1;
        *pc.entry(c).or_default() += 1;
    }
    let n = labels.len() as f64;
    let mi: f64 = joint
        .iter()
        .map(|(&(t, c), &ntc)| {
            let ntc = ntc as f64;
            ntc / n * (ntc * n / (pl[&t] as f64 * pc[&c] as f64)).log2()
        })
        .sum();
    Ok(mi.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MIEntry {
    pub layer: usize,
    pub mi_bits: f64,
    pub samples: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MIProfile {
    pub entries: Vec<MIEntry>,
    /// Entropy of the probed labels in bits.
    pub label_entropy: f64,
}

impl MIProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mi_bits,samples,k\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{:.6},{},{}", e.layer, e.mi_bits, e.samples, e.k);
        }
        s
    }

    /// Whether every entry satisfies `0 <= MI <= min(H(labels), log2 k)`.
    pub fn within_bounds(&self, tol: f64) -> bool {
        self.entries
            .iter()
            .all(|e| e.mi_bits >= 0.0 && e.mi_bits <= self.label_entropy.min((e.k as f64).log2()) + tol)
    }

    pub fn get(&self, layer: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.layer == layer).map(|e| e.mi_bits)
    }
}

/// Clusters each probe layer and measures MI against the original tokens.
pub fn mi_from_samples(samples: &HiddenSamples, cfg: &MIProbeConfig) -> Result<MIProfile> {
    let entries = samples
        .layers
        .iter()
        .map(|ls| {
            let km = minibatch_kmeans(&ls.data, ls.d, cfg.k, cfg.kmeans_batch, cfg.kmeans_iters, cfg.seed ^ ls.layer as u64)?;
            Ok(MIEntry {
                layer: ls.layer,
                mi_bits: mutual_information(&samples.labels, &km.assignments)?,
                samples: samples.labels.len(),
                k: cfg.k,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MIProfile {
        entries,
        label_entropy: entropy_bits(&samples.labels),
    })
}

/// Collect, cluster and measure every probe layer. `labels` is the set of
/// token ids eligible as probe labels, usually [`top_tokens`] of the
/// training corpus.
pub fn mi_profile<T: Scalar>(model: &ModelState<T>, data: &CorpusDataset, labels: &[usize], cfg: &MIProbeConfig) -> Result<MIProfile> {
    let samples = collect_hidden_all(model, data, labels, cfg)?;
    mi_from_samples(&samples, cfg)
}
