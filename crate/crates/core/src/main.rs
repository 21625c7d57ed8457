use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use masklater::corruption::{corrupt, Filter, MaskingConfig, Strategy};
use masklater::flops::{self, render_report, sweep, FlopsConfig};
use masklater::io::config::{write_section, RunConfig};
use masklater::io::corpus::read_corpus;
use masklater::io::{encode_corpus, synth, CorpusDataset, Vocabulary};
use masklater::models::{strip_for_finetune, ModelState};
use masklater::probes::{corpus_nll, mi_profile, MIProbeConfig};
use masklater::train::{self, load_checkpoint, pretrain, save_checkpoint, Checkpoint, LabeledSet, OptimizerConfig, Trainer};
use masklater::{Error, Result};

#[derive(Parser)]
#[command(name = "masklater", version, about = "Masked-language-model lab: vanilla and two-stage pre-training, FLOPs, probes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train from a config file; writes metrics.csv, vocab.txt and checkpoints.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Overrides `[data] corpus`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Continue from a checkpoint instead of initialising.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Perplexity of a checkpoint on a corpus for one corruption category.
    EvalPpl {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "all")]
        category: Filter,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the checkpoint's masking rate.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Layerwise mutual information at masked positions, as CSV.
    ProbeMi {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = MIProbeConfig::default().k)]
        k: usize,
        #[arg(long, default_value_t = MIProbeConfig::default().num_token_labels)]
        labels: usize,
        #[arg(long, default_value_t = MIProbeConfig::default().max_samples)]
        samples: usize,
        #[arg(long, default_value_t = MIProbeConfig::default().kmeans_batch)]
        kmeans_batch: usize,
        #[arg(long, default_value_t = MIProbeConfig::default().kmeans_iters)]
        kmeans_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOPs breakdown and speedup over a baseline; no model is built.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Baseline config; defaults to the same encoder as vanilla at rate 0.15.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Masking-rate grid `a:b:step`.
        #[arg(long)]
        sweep_r: Option<String>,
        /// Vocabulary size override for both sides.
        #[arg(long)]
        vocab: Option<usize>,
    },
    /// Strip the decoder, fine-tune the encoder on a `label<TAB>text` task.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Held-out task file; otherwise the last fifth of `--task` is held out.
        #[arg(long)]
        eval_task: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        steps: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Corrupt a corpus and write one TSV record per sequence.
    CorruptDump {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        rate: f64,
        #[arg(long, default_value_t = Strategy::DEFAULT)]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        seq_len: usize,
        /// Use per-position draws instead of fixed per-sequence counts.
        #[arg(long)]
        bernoulli: bool,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus or classification task.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        /// Documents or examples to emit.
        #[arg(long, default_value_t = 5000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        symbols: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    TrigramGrammar,
    SeparableClassification,
}

fn echo(title: &str, body: &str) {
    eprintln!("# {title}");
    for line in body.lines() {
        eprintln!("#   {line}");
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_vocab(ck: &Checkpoint) -> Result<&Vocabulary> {
    ck.vocab
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no vocabulary".into()))
}

fn corpus_for(ck: &Checkpoint, path: &Path) -> Result<CorpusDataset> {
    let text = read_corpus(path)?;
    encode_corpus(text.lines(), load_vocab(ck)?, ck.trainer.model.cfg.seq_len)
}

fn cmd_pretrain(config: &Path, seed: Option<u64>, out: &Path, corpus: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if corpus.is_some() {
        cfg.data.corpus = corpus;
    }
    let corpus_path = cfg
        .data
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("no corpus: set [data] corpus or pass --corpus".into()))?;
    let text = read_corpus(&corpus_path)?;
    fs::create_dir_all(out)?;

    let (mut trainer, vocab) = match resume {
        Some(p) => {
            let ck = load_checkpoint(&p)?;
            let vocab = load_vocab(&ck)?.clone();
            let mut tr = ck.trainer;
            tr.train.max_steps = cfg.train.max_steps;
            (tr, vocab)
        }
        None => {
            let vocab = Vocabulary::build(text.lines(), cfg.data.vocab_min_count, cfg.data.vocab_max_size)?;
            cfg.model.vocab_size = vocab.len();
            cfg.validate()?;
            let model = ModelState::init(&cfg.model, cfg.train.seed)?;
            (Trainer::new(model, cfg.opt, cfg.train.clone())?, vocab)
        }
    };
    cfg.model = trainer.model.cfg.clone();
    echo("resolved config", &cfg.to_text());
    eprintln!("# seed = {}", trainer.train.seed);
    eprintln!("# parameters = {}", trainer.model.num_params());
    let data = encode_corpus(text.lines(), &vocab, trainer.model.cfg.seq_len)?;
    eprintln!("# sequences = {}", data.len());
    vocab.save(&out.join("vocab.txt"))?;

    let metrics_path = out.join("metrics.csv");
    let mut log = if trainer.step_count() == 0 {
        BufWriter::new(File::create(&metrics_path)?)
    } else {
        BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?)
    };
    let target = trainer.train.max_steps;
    let every = trainer.train.checkpoint_every;
    while trainer.step_count() < target {
        let next = if every > 0 { ((trainer.step_count() / every + 1) * every).min(target) } else { target };
        trainer.train.max_steps = next;
        pretrain(&mut trainer, &data, Some(&mut log))?;
        log.flush()?;
        if every > 0 && next % every == 0 && next < target {
            save_checkpoint(&out.join(format!("checkpoint-{next}.bin")), &trainer, Some(&vocab))?;
        }
    }
    trainer.train.max_steps = target;
    save_checkpoint(&out.join("checkpoint.bin"), &trainer, Some(&vocab))?;
    eprintln!("# wrote {}", out.display());
    Ok(())
}

fn cmd_eval_ppl(ckpt: &Path, corpus: &Path, category: Filter, seed: u64, rate: Option<f64>, strategy: Option<Strategy>) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let mut masking = ck.trainer.model.cfg.masking;
    if let Some(r) = rate {
        masking.rate = r;
    }
    if let Some(s) = strategy {
        masking.strategy = s;
    }
    let mut echoed = String::new();
    write_section(&mut echoed, &ck.trainer.model.cfg);
    write_section(&mut echoed, &masking);
    echo("resolved config", &echoed);
    eprintln!("# seed = {seed}");
    let data = corpus_for(&ck, corpus)?;
    let t = corpus_nll(&ck.trainer.model, &data, &masking, category, seed)?;
    println!("category={category} targets={} nll={:.6} ppl={:.6}", t.targets, t.nll / t.targets as f64, t.perplexity());
    Ok(())
}

fn cmd_probe_mi(ckpt: &Path, corpus: &Path, probe: MIProbeConfig, out: Option<&Path>) -> Result<()> {
    probe.validate()?;
    let ck = load_checkpoint(ckpt)?;
    let mut echoed = String::new();
    write_section(&mut echoed, &ck.trainer.model.cfg);
    write_section(&mut echoed, &ck.trainer.model.cfg.masking);
    write_section(&mut echoed, &probe);
    echo("resolved config", &echoed);
    eprintln!("# seed = {}", probe.seed);
    let data = corpus_for(&ck, corpus)?;
    // vocabulary frequencies come from the training corpus
    let labels = load_vocab(&ck)?.most_frequent(probe.num_token_labels);
    let prof = mi_profile(&ck.trainer.model, &data, &labels, &probe)?;
    eprintln!("# label entropy = {:.6} bits", prof.label_entropy);
    output(out)?.write_all(prof.to_csv().as_bytes())?;
    Ok(())
}

fn parse_grid(grid: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = grid
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("--sweep-r `{grid}`: {e}")))?;
    match parts[..] {
        [a, b, step] if step > 0.0 && b >= a => Ok(flops::rate_grid(a, b, step)),
        _ => Err(Error::Config(format!("--sweep-r `{grid}`: expected a:b:step with step > 0 and b >= a"))),
    }
}

fn cmd_flops(config: &Path, baseline: Option<&Path>, sweep_r: Option<&str>, vocab: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut target = cfg.flops_config();
    if let Some(v) = vocab {
        target.vocab = v as f64;
    }
    let base: FlopsConfig = match baseline {
        Some(p) => {
            let mut b = RunConfig::load(p)?.flops_config();
            if let Some(v) = vocab {
                b.vocab = v as f64;
            }
            b
        }
        None => flops::default_baseline(&target),
    };
    echo("resolved config", &cfg.to_text());
    eprintln!("# seed = none (pure arithmetic)");
    let rates = sweep_r.map(parse_grid).transpose()?.unwrap_or_default();
    let points = sweep(&target, &base, &rates);
    print!("{}", render_report(&flops::total(&target), &flops::total(&base), &points));
    Ok(())
}

fn cmd_finetune(ckpt: &Path, task: &Path, eval_task: Option<&Path>, steps: u64, lr: f64, batch: usize, seed: u64) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let vocab = load_vocab(&ck)?;
    let n = ck.trainer.model.cfg.seq_len;
    let mut examples = synth::parse_task(&read_corpus(task)?)?;
    let held = match eval_task {
        Some(p) => synth::parse_task(&read_corpus(p)?)?,
        None => {
            let cut = examples.len() - examples.len() / 5;
            examples.split_off(cut)
        }
    };
    let num_classes = examples.iter().chain(&held).map(|e| e.label).max().unwrap_or(0) + 1;
    let opt = OptimizerConfig {
        peak_lr: lr,
        total_steps: steps.max(1),
        ..OptimizerConfig::default()
    };
    let mut echoed = String::new();
    write_section(&mut echoed, &ck.trainer.model.cfg);
    write_section(&mut echoed, &opt);
    echo("resolved config", &format!("{echoed}batch = {batch}\nsteps = {steps}\nclasses = {num_classes}"));
    eprintln!("# seed = {seed}");

    let (data, labels) = synth::encode_task(&examples, vocab, n)?;
    let (eval_data, eval_labels) = synth::encode_task(&held, vocab, n)?;
    let mut clf = strip_for_finetune(&ck.trainer.model, num_classes.max(2), seed)?;
    println!("pretrained_params={} classifier_params={}", ck.trainer.model.num_params(), clf.num_params());
    let set = LabeledSet { data, labels };
    let losses = train::finetune(&mut clf, &set, &opt, batch, steps, seed)?;
    let train_acc = train::accuracy(&train::predict(&clf, &set.data, batch)?, &set.labels);
    let eval_acc = if eval_data.is_empty() {
        f64::NAN
    } else {
        train::accuracy(&train::predict(&clf, &eval_data, batch)?, &eval_labels)
    };
    println!(
        "final_loss={:.6} train_accuracy={train_acc:.4} eval_accuracy={eval_acc:.4} eval_examples={}",
        losses.last().copied().unwrap_or(f64::NAN),
        eval_data.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_corrupt_dump(
    corpus: &Path,
    rate: f64,
    strategy: Strategy,
    seed: u64,
    seq_len: usize,
    bernoulli: bool,
    vocab: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let masking = MaskingConfig {
        rate,
        strategy,
        deterministic_counts: !bernoulli,
    };
    masking.validate()?;
    let mut echoed = String::new();
    write_section(&mut echoed, &masking);
    echo("resolved config", &format!("{echoed}seq_len = {seq_len}"));
    eprintln!("# seed = {seed}");
    let text = read_corpus(corpus)?;
    let vocab = match vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::build(text.lines(), 1, None)?,
    };
    let data = encode_corpus(text.lines(), &vocab, seq_len)?;
    let mut w = output(out)?;
    writeln!(w, "original\tcorrupted\tkinds")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(64) {
        let (ids, pad) = data.batch(chunk);
        let cb = corrupt(&ids, &pad, chunk.len(), seq_len, &masking, vocab.len(), rng.random())?;
        for b in 0..chunk.len() {
            let words = |g: &[usize]| g.iter().map(|&i| vocab.token(i).unwrap_or("?")).collect::<Vec<_>>().join(" ");
            let kinds: String = cb.row(&cb.kind, b).iter().map(|k| k.code()).collect();
            writeln!(w, "{}\t{}\t{kinds}", words(cb.row(&cb.original, b)), words(cb.row(&cb.corrupted, b)))?;
        }
    }
    Ok(())
}

fn cmd_synth(kind: SynthKind, size: usize, seed: u64, symbols: usize, out: &Path) -> Result<()> {
    let name = match kind {
        SynthKind::TrigramGrammar => "trigram-grammar",
        SynthKind::SeparableClassification => "separable-classification",
    };
    echo("resolved config", &format!("kind = {name}\nsize = {size}\nsymbols = {symbols}"));
    eprintln!("# seed = {seed}");
    let text = match kind {
        SynthKind::TrigramGrammar => synth::trigram_corpus(size, symbols, 30, 62, seed)?,
        SynthKind::SeparableClassification => synth::task_to_tsv(&synth::separable_classification(size, symbols, seed)?),
    };
    fs::write(out, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Pretrain {
            config,
            seed,
            out,
            corpus,
            resume,
        } => cmd_pretrain(&config, seed, &out, corpus, resume),
        Cmd::EvalPpl {
            ckpt,
            corpus,
            category,
            seed,
            rate,
            strategy,
        } => cmd_eval_ppl(&ckpt, &corpus, category, seed, rate, strategy),
        Cmd::ProbeMi {
            ckpt,
            corpus,
            k,
            labels,
            samples,
            kmeans_batch,
            kmeans_iters,
            seed,
            out,
        } => {
            let probe = MIProbeConfig {
                num_token_labels: labels,
                k,
                max_samples: samples,
                kmeans_batch,
                kmeans_iters,
                seed,
            };
            cmd_probe_mi(&ckpt, &corpus, probe, out.as_deref())
        }
        Cmd::Flops {
            config,
            baseline,
            sweep_r,
            vocab,
        } => cmd_flops(&config, baseline.as_deref(), sweep_r.as_deref(), vocab),
        Cmd::Finetune {
            ckpt,
            task,
            eval_task,
            steps,
            lr,
            batch,
            seed,
        } => cmd_finetune(&ckpt, &task, eval_task.as_deref(), steps, lr, batch, seed),
        Cmd::CorruptDump {
            corpus,
            rate,
            strategy,
            seed,
            seq_len,
            bernoulli,
            vocab,
            out,
        } => cmd_corrupt_dump(&corpus, rate, strategy, seed, seq_len, bernoulli, vocab.as_deref(), out.as_deref()),
        Cmd::Synth {
            kind,
            size,
            seed,
            symbols,
            out,
        } => cmd_synth(kind, size, seed, symbols, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
