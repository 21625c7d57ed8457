use super::checkpoint::{from_bytes, to_bytes};
use super::*;
use crate::corruption::{MaskingConfig, Strategy};
use crate::io::special;
use crate::models::{Arch, ModelConfig};

fn opt(total: u64) -> OptimizerConfig {
    OptimizerConfig {
        total_steps: total,
        ..OptimizerConfig::default()
    }
}

#[test]
fn schedule_examples() {
    let c = OptimizerConfig {
        peak_lr: 1e-3,
        ..opt(100)
    };
    assert_eq!(c.warmup_steps(), 6);
    assert_eq!(lr_at(0, &c), 0.0);
    assert!((lr_at(3, &c) - 5e-4).abs() < 1e-15);
    assert_eq!(lr_at(6, &c), 1e-3);
    assert!((lr_at(53, &c) - 1e-3 * 47.0 / 94.0).abs() < 1e-15);
    assert_eq!(lr_at(100, &c), 0.0);
    assert_eq!(lr_at(250, &c), 0.0);
    let flat = OptimizerConfig {
        warmup_proportion: 0.0,
        ..c
    };
    assert_eq!(lr_at(0, &flat), 1e-3);
}

fn one_param(value: &[f64], decay: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::from_f64(&[value.len()], value).unwrap(), decay);
    s
}

#[test]
fn adam_two_steps_by_hand() {
    let cfg = OptimizerConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-6,
        weight_decay: 0.1,
        ..opt(10)
    };
    let mut store = one_param(&[1.0, -2.0], true);
    let mut st = AdamState::new(&store);
    let lr = 0.01;
    let g1 = [0.5, -1.0];
    let g2 = [0.25, 2.0];
    for g in [g1, g2] {
        let mut gs = vec![Tensor::from_f64(&[2], &g).unwrap()];
        adam_update(&mut store, &mut gs, &mut st, lr, &cfg).unwrap();
    }
    // reference arithmetic, written out per coordinate
    let reference = |w0: f64, a: f64, b: f64| {
        let (m1, v1) = (0.1 * a, 0.02 * a * a);
        let mut w = w0 * (1.0 - lr * 0.1);
        w -= lr * (m1 / 0.1) / ((v1 / 0.02).sqrt() + 1e-6);
        let (m2, v2) = (0.9 * m1 + 0.1 * b, 0.98 * v1 + 0.02 * b * b);
        w *= 1.0 - lr * 0.1;
        w -= lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.98f64 * 0.98)).sqrt() + 1e-6);
        w
    };
    let got = store.get(crate::nn::ParamId(0)).data().to_vec();
    assert!((got[0] - reference(1.0, 0.5, 0.25)).abs() < 1e-12);
    assert!((got[1] - reference(-2.0, -1.0, 2.0)).abs() < 1e-12);
    assert_eq!(st.t, 2);
}

#[test]
fn zero_gradient_and_zero_lr_cases() {
    let cfg = OptimizerConfig { weight_decay: 0.0, ..opt(10) };
    let mut store = one_param(&[0.3, 0.7], true);
    let mut st = AdamState::new(&store);
    adam_update(&mut store, &mut [Tensor::zeros(&[2])], &mut st, 0.1, &cfg).unwrap();
    assert_eq!(store.get(crate::nn::ParamId(0)).data(), &[0.3, 0.7]);

    let decayed = OptimizerConfig { weight_decay: 0.5, ..cfg };
    adam_update(&mut store, &mut [Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap()], &mut st, 0.0, &decayed).unwrap();
    assert_eq!(store.get(crate::nn::ParamId(0)).data(), &[0.3, 0.7]);
}

#[test]
fn decay_skips_flagged_parameters() {
    let cfg = OptimizerConfig { weight_decay: 0.5, ..opt(10) };
    for (decay, expect) in [(true, 2.0 * (1.0 - 0.1 * 0.5)), (false, 2.0)] {
        let mut store = one_param(&[2.0], decay);
        let mut st = AdamState::new(&store);
        adam_update(&mut store, &mut [Tensor::zeros(&[1])], &mut st, 0.1, &cfg).unwrap();
        assert!((store.get(crate::nn::ParamId(0)).data()[0] - expect).abs() < 1e-15);
    }
}

#[test]
fn constant_gradient_moves_by_lr_per_step() {
    // bias correction makes mhat/sqrt(vhat) = sign(g) for a constant gradient
    let cfg = OptimizerConfig { weight_decay: 0.0, eps: 1e-12, ..opt(10) };
    let mut store = one_param(&[0.0], true);
    let mut st = AdamState::new(&store);
    for _ in 0..5 {
        adam_update(&mut store, &mut [Tensor::from_f64(&[1], &[3.0]).unwrap()], &mut st, 0.01, &cfg).unwrap();
    }
    assert!((store.get(crate::nn::ParamId(0)).data()[0] + 0.05).abs() < 1e-9);
}

#[test]
fn non_finite_gradients_are_rejected() {
    let mut store = one_param(&[1.0], true);
    let mut st = AdamState::new(&store);
    let r = adam_update(&mut store, &mut [Tensor::from_f64(&[1], &[f64::NAN]).unwrap()], &mut st, 0.1, &opt(10));
    assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
    assert_eq!(st.t, 0);
}

#[test]
fn clipping_bounds_the_global_norm() {
    let cfg = OptimizerConfig { grad_clip: 1.0, ..opt(10) };
    let mut store = one_param(&[0.0, 0.0], true);
    let mut st = AdamState::new(&store);
    let mut g = vec![Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()];
    adam_update(&mut store, &mut g, &mut st, 0.0, &cfg).unwrap();
    assert!((g[0].data()[0] - 0.6).abs() < 1e-12 && (g[0].data()[1] - 0.8).abs() < 1e-12);
}

fn tiny_setup(arch: Arch, seed: u64) -> (Trainer<f32>, CorpusDataset) {
    let mut cfg = ModelConfig::new(arch, 40, 12, 2, 16, 2);
    cfg.d_de = 8;
    cfg.l_de = 1;
    cfg.h_de = 2;
    cfg.masking = MaskingConfig::new(0.4, Strategy::DEFAULT);
    let model = ModelState::init(&cfg, seed).unwrap();
    let train = TrainConfig {
        batch_size: 4,
        max_steps: 10,
        seed,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<usize>> = (0..30)
        .map(|_| {
            let mut s = vec![special::BOS];
            s.extend((0..10).map(|_| rng.random_range(special::COUNT..40)));
            s.push(special::EOS);
            s
        })
        .collect();
    let data = CorpusDataset::from_sequences(12, &seqs).unwrap();
    (Trainer::new(model, opt(10), train).unwrap(), data)
}

fn log_of(tr: &mut Trainer<f32>, data: &CorpusDataset) -> String {
    let mut buf = Vec::new();
    pretrain(tr, data, Some(&mut buf)).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn identical_seeds_give_identical_logs() {
    for arch in [Arch::Vanilla, Arch::ThreeMlSelf, Arch::ThreeMlCross] {
        let (mut a, data) = tiny_setup(arch, 3);
        let (mut b, _) = tiny_setup(arch, 3);
        let (la, lb) = (log_of(&mut a, &data), log_of(&mut b, &data));
        assert_eq!(la, lb);
        assert_eq!(la.lines().count(), 11);
        assert!(la.starts_with(METRICS_HEADER));
        assert_eq!(a.model.store, b.model.store);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (mut tr, data) = tiny_setup(Arch::ThreeMlCross, 1);
    tr.train.max_steps = 3;
    pretrain(&mut tr, &data, None).unwrap();
    let vocab = crate::io::Vocabulary::build(["a b c a"], 1, None).unwrap();
    let bytes = to_bytes(&tr, Some(&vocab));
    let ck = from_bytes(&bytes).unwrap();
    assert_eq!(ck.vocab.as_ref(), Some(&vocab));
    assert_eq!(ck.trainer.model.store, tr.model.store);
    assert_eq!(ck.trainer.model.cfg, tr.model.cfg);
    assert_eq!(ck.trainer.adam, tr.adam);
    assert_eq!(ck.trainer.opt, tr.opt);
    assert_eq!(ck.trainer.train, tr.train);
    assert_eq!(ck.trainer.rng, tr.rng);
    assert_eq!(to_bytes(&ck.trainer, Some(&vocab)), bytes);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    for arch in [Arch::Vanilla, Arch::ThreeMlSelf, Arch::ThreeMlCross] {
        let (mut full, data) = tiny_setup(arch, 7);
        let full_log = log_of(&mut full, &data);

        let (mut half, _) = tiny_setup(arch, 7);
        half.train.max_steps = 5;
        let first = log_of(&mut half, &data);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &half, None).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap().trainer;
        resumed.train.max_steps = 10;
        let second = log_of(&mut resumed, &data);
        assert_eq!(format!("{first}{second}"), full_log, "{arch}");
        assert_eq!(resumed.model.store, full.model.store);
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (tr, _) = tiny_setup(Arch::Vanilla, 2);
    let bytes = to_bytes(&tr, None);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(from_bytes(&bad_magic), Err(Error::Checkpoint(m)) if m.contains("magic")));
    for cut in [4, 12, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(from_bytes(&long).is_err());
    let mut version = bytes;
    version[8] = 9;
    assert!(matches!(from_bytes(&version), Err(Error::Checkpoint(m)) if m.contains("version")));
}

#[test]
fn finetune_learns_a_leading_token_rule() {
    let (tr, _) = tiny_setup(Arch::ThreeMlSelf, 4);
    let mut clf = crate::models::strip_for_finetune(&tr.model, 2, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seqs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..64 {
        let y = rng.random_range(0..2);
        let mut s = vec![special::BOS, 10 + y];
        s.extend((0..9).map(|_| rng.random_range(20..40)));
        s.push(special::EOS);
        seqs.push(s);
        labels.push(y);
    }
    let set = LabeledSet {
        data: CorpusDataset::from_sequences(12, &seqs).unwrap(),
        labels,
    };
    let o = OptimizerConfig { peak_lr: 1e-2, ..opt(150) };
    let losses = finetune(&mut clf, &set, &o, 16, 150, 1).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    let preds = predict(&clf, &set.data, 16).unwrap();
    assert!(accuracy(&preds, &set.labels) >= 0.95);
}

