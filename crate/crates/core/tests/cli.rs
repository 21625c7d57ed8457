use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use masklater::corruption::{CorruptedBatch, Counts, Kind, MaskingConfig, Strategy};
use masklater::io::{special, Vocabulary};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_masklater"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field(stdout: &str, key: &str) -> f64 {
    stdout
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= in {stdout:?}"))
        .parse()
        .unwrap()
}

const TINY: &str = "[model]
arch = 3ml_self
seq_len = 32
l_en = 1
d_en = 16
h_en = 2
l_de = 1
dropout = 0.1

[masking]
rate = 0.4

[train]
batch_size = 8
max_steps = 12
log_every = 3
checkpoint_every = 6
";

fn repo_configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(d, &["synth", "--kind", "trigram-grammar"]).status.code(), Some(1));
    fs::write(d.join("bad.conf"), "[model]\nwidth = 3\n").unwrap();
    assert_eq!(run(d, &["pretrain", "--config", "bad.conf", "--corpus", "c.txt"]).status.code(), Some(1));
    fs::write(d.join("ok.conf"), TINY).unwrap();
    assert_eq!(run(d, &["pretrain", "--config", "ok.conf", "--corpus", "missing.txt"]).status.code(), Some(2));
    assert_eq!(run(d, &["eval-ppl", "--ckpt", "missing.bin", "--corpus", "c.txt"]).status.code(), Some(2));
}

#[test]
fn pretrain_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "trigram-grammar", "--size", "200", "--symbols", "40", "--seed", "2", "--out", "corpus.txt"]);
    fs::write(d.join("tiny.conf"), TINY).unwrap();
    let train = |out: &str| ok(d, &["pretrain", "--config", "tiny.conf", "--corpus", "corpus.txt", "--seed", "5", "--out", out]);
    train("a");
    train("b");
    let log_a = fs::read_to_string(d.join("a/metrics.csv")).unwrap();
    assert_eq!(log_a, fs::read_to_string(d.join("b/metrics.csv")).unwrap());
    assert_eq!(log_a.lines().count(), 1 + 4);
    assert_eq!(fs::read(d.join("a/checkpoint.bin")).unwrap(), fs::read(d.join("b/checkpoint.bin")).unwrap());

    fs::create_dir(d.join("c")).unwrap();
    fs::copy(d.join("a/checkpoint-6.bin"), d.join("c/start.bin")).unwrap();
    let head: String = log_a.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(d.join("c/metrics.csv"), head).unwrap();
    ok(d, &["pretrain", "--config", "tiny.conf", "--corpus", "corpus.txt", "--seed", "5", "--out", "c", "--resume", "c/start.bin"]);
    assert_eq!(fs::read_to_string(d.join("c/metrics.csv")).unwrap(), log_a);
    assert_eq!(fs::read(d.join("c/checkpoint.bin")).unwrap(), fs::read(d.join("a/checkpoint.bin")).unwrap());
}

#[test]
fn untrained_model_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // 59 symbols plus the five reserved tokens
    ok(d, &["synth", "--kind", "trigram-grammar", "--size", "300", "--symbols", "59", "--out", "corpus.txt"]);
    fs::write(d.join("zero.conf"), TINY.replace("max_steps = 12", "max_steps = 0")).unwrap();
    ok(d, &["pretrain", "--config", "zero.conf", "--corpus", "corpus.txt", "--out", "run"]);
    let vocab = Vocabulary::load(&d.join("run/vocab.txt")).unwrap();
    assert_eq!(vocab.len(), 64);
    for category in ["masked", "all"] {
        let out = ok(d, &["eval-ppl", "--ckpt", "run/checkpoint.bin", "--corpus", "corpus.txt", "--category", category]);
        let ppl = field(&out, "ppl");
        assert!((ppl - 64.0).abs() < 6.4, "{category}: untrained perplexity {ppl}");
    }
}

#[test]
fn flops_reports_large_recipe_speedups() {
    let cfgs = repo_configs();
    let dir = tempfile::tempdir().unwrap();
    for (target, want) in [("large-3ml-self.conf", 1.34), ("large-3ml-cross.conf", 1.37)] {
        let out = ok(
            dir.path(),
            &[
                "flops",
                "--config",
                cfgs.join(target).to_str().unwrap(),
                "--baseline",
                cfgs.join("large-vanilla.conf").to_str().unwrap(),
            ],
        );
        let got: f64 = out.lines().find_map(|l| l.strip_prefix("speedup=")).unwrap().parse().unwrap();
        assert!((got - want).abs() <= 0.02, "{target}: {got}");
    }
    // without --baseline the target's own encoder at r = 0.15 is the reference
    let out = ok(dir.path(), &["flops", "--config", cfgs.join("base-3ml-self.conf").to_str().unwrap()]);
    let got: f64 = out.lines().find_map(|l| l.strip_prefix("speedup=")).unwrap().parse().unwrap();
    assert!((got - 1.22).abs() <= 0.02, "base 3ml_self: {got}");
}

#[test]
fn corrupt_dump_parses_back_into_valid_batches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "trigram-grammar", "--size", "120", "--symbols", "30", "--out", "corpus.txt"]);
    ok(d, &["corrupt-dump", "--corpus", "corpus.txt", "--rate", "0.4", "--strategy", "80-10-10", "--seed", "1", "--seq-len", "32", "--out", "dump.tsv"]);
    let vocab = Vocabulary::build(fs::read_to_string(d.join("corpus.txt")).unwrap().lines(), 1, None).unwrap();
    let dump = fs::read_to_string(d.join("dump.tsv")).unwrap();
    let mut lines = dump.lines();
    assert_eq!(lines.next(), Some("original\tcorrupted\tkinds"));
    let masking = MaskingConfig::new(0.4, Strategy::DEFAULT);
    let mut rows = 0;
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 3, "{line}");
        let original: Vec<usize> = cols[0].split(' ').map(|t| vocab.id(t)).collect();
        let corrupted: Vec<usize> = cols[1].split(' ').map(|t| vocab.id(t)).collect();
        let kind: Vec<Kind> = cols[2].chars().map(|c| Kind::from_code(c).unwrap()).collect();
        let n = original.len();
        assert_eq!(n, 32);
        let pad: Vec<bool> = original.iter().map(|&t| t == special::PAD).collect();
        let count = |k| kind.iter().filter(|&&x| x == k).count();
        let counts = Counts { mask: count(Kind::Masked), random: count(Kind::Replaced), keep: count(Kind::Kept) };
        let eligible = original.iter().zip(&pad).filter(|(&t, &p)| !p && !special::is_special(t)).count();
        assert_eq!(counts, masking.counts(eligible), "{line}");
        let cb = CorruptedBatch { batch: 1, n, original, corrupted, kind, pad, counts: vec![counts] };
        cb.check(vocab.len()).unwrap();
        rows += 1;
    }
    assert!(rows > 120, "{rows} records");
}

#[test]
fn probe_and_finetune_run_on_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "trigram-grammar", "--size", "200", "--symbols", "40", "--out", "corpus.txt"]);
    ok(d, &["synth", "--kind", "separable-classification", "--size", "300", "--symbols", "40", "--out", "task.tsv"]);
    fs::write(d.join("tiny.conf"), TINY).unwrap();
    ok(d, &["pretrain", "--config", "tiny.conf", "--corpus", "corpus.txt", "--out", "run"]);

    ok(d, &["probe-mi", "--ckpt", "run/checkpoint.bin", "--corpus", "corpus.txt", "--k", "8", "--labels", "10", "--samples", "500", "--out", "mi.csv"]);
    let csv = fs::read_to_string(d.join("mi.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,mi_bits,samples,k"));
    // decoder input plus one decoder layer
    let mis: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(mis.len(), 2);
    assert!(mis.iter().all(|&m| (0.0..=3.0).contains(&m)), "{mis:?}");

    let out = ok(d, &["finetune", "--ckpt", "run/checkpoint.bin", "--task", "task.tsv", "--steps", "60", "--batch", "16"]);
    assert!(field(&out, "pretrained_params") > field(&out, "classifier_params"));
    let acc = field(&out, "eval_accuracy");
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn shipped_configs_are_valid() {
    let mut seen = 0;
    for entry in fs::read_dir(repo_configs()).unwrap() {
        let path = entry.unwrap().path();
        let cfg = masklater::io::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 9);
}
