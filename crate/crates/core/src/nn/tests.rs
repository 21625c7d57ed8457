use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{check_gradients, random_tensor};

type Mat = Vec<Vec<f64>>;

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn to_mat(t: &Tensor<f64>, rows: usize) -> Mat {
    let c = t.numel() / rows;
    (0..rows).map(|r| t.data()[r * c..(r + 1) * c].to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn dense_ref(x: &Mat, s: &ParamStore<f64>, w: &Dense<ParamId>) -> Mat {
    let wt = s.get(w.w);
    let wm = to_mat(wt, wt.shape()[0]);
    let bias = s.get(w.b).data();
    mm(x, &wm)
        .into_iter()
        .map(|r| r.iter().zip(bias).map(|(a, b)| a + b).collect())
        .collect()
}

fn ln_ref(x: &Mat, s: &ParamStore<f64>, n: &Norm<ParamId>) -> Mat {
    let g = s.get(n.gain).data();
    let o = s.get(n.offset).data();
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * g[j] + o[j])
                .collect()
        })
        .collect()
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// One head at a time, one query at a time.
fn mha_ref(q_in: &Mat, kv: &Mat, s: &ParamStore<f64>, w: &Attention<ParamId>, heads: usize, key_ok: &[bool]) -> Mat {
    let q = dense_ref(q_in, s, &w.q);
    let k = dense_ref(kv, s, &w.k);
    let v = dense_ref(kv, s, &w.v);
    let d = q[0].len();
    let dh = d / heads;
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let mut scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores
                .iter()
                .zip(key_ok)
                .filter(|(_, &ok)| ok)
                .map(|(s, _)| *s)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (sj, &ok) in scores.iter_mut().zip(key_ok) {
                *sj = if ok { (*sj - mx).exp() } else { 0.0 };
                z += *sj;
            }
            for c in cols.clone() {
                concat[i][c] = scores.iter().zip(&v).map(|(p, vj)| p / z * vj[c]).sum();
            }
        }
    }
    dense_ref(&concat, s, &w.o)
}

fn ffn_ref(x: &Mat, s: &ParamStore<f64>, w: &FeedForward<ParamId>) -> Mat {
    let h: Mat = dense_ref(x, s, &w.up)
        .into_iter()
        .map(|r| r.into_iter().map(gelu_ref).collect())
        .collect();
    dense_ref(&h, s, &w.down)
}

fn sub_ref(x: &Mat, s: &ParamStore<f64>, ln: &Norm<ParamId>, mode: LnMode, f: impl Fn(&Mat) -> Mat) -> Mat {
    match mode {
        LnMode::Pre => add(x, &f(&ln_ref(x, s, ln))),
        LnMode::Post => ln_ref(&add(x, &f(x)), s, ln),
    }
}

fn block_ref(x: &Mat, s: &ParamStore<f64>, w: &BlockWeights<ParamId>, cfg: &BlockConfig, key_ok: &[bool]) -> Mat {
    let x = sub_ref(x, s, &w.ln_self, cfg.ln_mode, |h| mha_ref(h, h, s, &w.self_attn, cfg.heads, key_ok));
    sub_ref(&x, s, &w.ln_ffn, cfg.ln_mode, |h| ffn_ref(h, s, &w.ffn))
}

fn cross_ref(x: &Mat, mem: &Mat, s: &ParamStore<f64>, w: &BlockWeights<ParamId>, cfg: &BlockConfig) -> Mat {
    let (cross, ln_cross) = w.cross.as_ref().unwrap();
    let all_q = vec![true; x.len()];
    let all_m = vec![true; mem.len()];
    let x = sub_ref(x, s, &w.ln_self, cfg.ln_mode, |h| mha_ref(h, h, s, &w.self_attn, cfg.heads, &all_q));
    let x = sub_ref(&x, s, ln_cross, cfg.ln_mode, |h| mha_ref(h, mem, s, cross, cfg.heads, &all_m));
    sub_ref(&x, s, &w.ln_ffn, cfg.ln_mode, |h| ffn_ref(h, s, &w.ffn))
}

fn make_block(cfg: &BlockConfig, cross: bool, seed: u64) -> (ParamStore<f64>, BlockWeights<ParamId>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = BlockWeights::init(&mut store, "blk", cfg, cross, &mut rng);
    randomize(&mut store, seed + 1);
    (store, w)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn single_token_attention_weight_is_one() {
    let cfg = BlockConfig::new(8, 2, LnMode::Pre);
    let (store, w) = make_block(&cfg, false, 1);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let w = w.bind(&vars);
    let mut ctx = Ctx::eval(&mut tape);
    let x = ctx.tape.constant(random_tensor(&[1, 1, 8], 2));
    let (_, weights) = multi_head_attention(&mut ctx, x, x, &w.self_attn, 2, None, 0.0).unwrap();
    assert_eq!(tape.value(weights).data(), &[1.0, 1.0]);
}

#[test]
fn self_block_matches_naive_reference() {
    for mode in [LnMode::Pre, LnMode::Post] {
        let cfg = BlockConfig::new(8, 2, mode);
        let (store, wid) = make_block(&cfg, false, 3);
        let x0 = random_tensor(&[2, 5, 8], 4);
        let ok = [true, true, true, false, false, true, true, true, true, true];
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let w = wid.bind(&vars);
        let mut ctx = Ctx::eval(&mut tape);
        let x = ctx.tape.constant(x0.clone());
        let mask = key_mask::<f64>(&ok, 2, 5).unwrap();
        let y = self_attention_block(&mut ctx, x, &w, &cfg, mask.as_ref()).unwrap();
        let out = tape.value(y).data().to_vec();
        let xs = to_mat(&x0, 10);
        for b in 0..2 {
            let seq: Mat = xs[b * 5..(b + 1) * 5].to_vec();
            let r = block_ref(&seq, &store, &wid, &cfg, &ok[b * 5..(b + 1) * 5]);
            // padded query rows are unspecified; compare attendable rows only
            for t in 0..5 {
                if ok[b * 5 + t] {
                    let got = &out[(b * 5 + t) * 8..(b * 5 + t + 1) * 8];
                    assert!(max_abs_diff(got, &r[t]) < 1e-6, "{mode:?} b{b} t{t}");
                }
            }
        }
    }
}

#[test]
fn all_padded_sequence_is_rejected() {
    let ok = [true, true, false, false];
    assert!(matches!(key_mask::<f32>(&ok, 2, 2), Err(Error::Contract(_))));
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let cfg = BlockConfig::new(8, 2, LnMode::Pre);
    let (store, wid) = make_block(&cfg, false, 5);
    let x0 = random_tensor(&[1, 4, 8], 6);
    let perm = [2usize, 0, 3, 1];
    let run = |x: Tensor<f64>| {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let w = wid.bind(&vars);
        let mut ctx = Ctx::eval(&mut tape);
        let xv = ctx.tape.constant(x);
        let y = self_attention_block(&mut ctx, xv, &w, &cfg, None).unwrap();
        tape.value(y).data().to_vec()
    };
    let base = run(x0.clone());
    let px: Vec<f64> = perm.iter().flat_map(|&p| x0.row(p).to_vec()).collect();
    let permuted = run(Tensor::new(&[1, 4, 8], px).unwrap());
    for (i, &p) in perm.iter().enumerate() {
        assert!(max_abs_diff(&permuted[i * 8..(i + 1) * 8], &base[p * 8..(p + 1) * 8]) < 1e-12);
    }
}

#[test]
fn attention_weights_are_a_distribution_over_attendable_keys() {
    let cfg = BlockConfig::new(8, 2, LnMode::Pre);
    let (store, wid) = make_block(&cfg, false, 7);
    let ok = [true, false, true, true, true, true, false, false];
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let w = wid.bind(&vars);
    let mut ctx = Ctx::eval(&mut tape);
    let x = ctx.tape.constant(random_tensor(&[2, 4, 8], 8));
    let mask = key_mask::<f64>(&ok, 2, 4).unwrap();
    let (_, weights) = multi_head_attention(&mut ctx, x, x, &w.self_attn, 2, mask.as_ref(), 0.0).unwrap();
    let wv = tape.value(weights);
    for r in 0..16 {
        let row = wv.row(r);
        let b = r / 8;
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..4 {
            if !ok[b * 4 + k] {
                assert_eq!(row[k], 0.0);
            }
        }
    }
}

#[test]
fn pre_and_post_blocks_have_equal_parameter_counts() {
    let (a, _) = make_block(&BlockConfig::new(16, 4, LnMode::Pre), true, 1);
    let (b, _) = make_block(&BlockConfig::new(16, 4, LnMode::Post), true, 1);
    assert_eq!(a.num_scalars(), b.num_scalars());
    // 4 projections (d*d + d) + ffn (d*4d + 4d + 4d*d + d) + 2 norms (2d)
    let d = 16;
    let (s, _) = make_block(&BlockConfig::new(d, 4, LnMode::Pre), false, 1);
    assert_eq!(s.num_scalars(), 4 * (d * d + d) + (8 * d * d + 5 * d) + 4 * d);
    assert_eq!(a.num_scalars(), s.num_scalars() + 4 * (d * d + d) + 2 * d);
}

#[test]
fn cross_block_single_query_single_memory_weight_is_one() {
    let cfg = BlockConfig::new(8, 2, LnMode::Pre);
    let (store, wid) = make_block(&cfg, true, 9);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let w = wid.bind(&vars);
    let mut ctx = Ctx::eval(&mut tape);
    let q = ctx.tape.constant(random_tensor(&[1, 1, 8], 10));
    let m = ctx.tape.constant(random_tensor(&[1, 1, 8], 11));
    let (cross, _) = w.cross.as_ref().unwrap();
    let (_, weights) = multi_head_attention(&mut ctx, q, m, cross, 2, None, 0.0).unwrap();
    assert_eq!(tape.value(weights).data(), &[1.0, 1.0]);
}

#[test]
fn identical_memory_rows_make_cross_attention_query_independent() {
    let cfg = BlockConfig::new(8, 2, LnMode::Pre);
    let (store, wid) = make_block(&cfg, true, 12);
    let row = random_tensor(&[8], 13);
    let mem: Vec<f64> = (0..5).flat_map(|_| row.data().to_vec()).collect();
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let w = wid.bind(&vars);
    let mut ctx = Ctx::eval(&mut tape);
    let q = ctx.tape.constant(random_tensor(&[1, 3, 8], 14));
    let m = ctx.tape.constant(Tensor::new(&[1, 5, 8], mem).unwrap());
    let (cross, _) = w.cross.as_ref().unwrap();
    let (out, _) = multi_head_attention(&mut ctx, q, m, cross, 2, None, 0.0).unwrap();
    let o = tape.value(out);
    for r in 1..3 {
        assert!(max_abs_diff(o.row(0), o.row(r)) < 1e-12);
    }
}

#[test]
fn cross_block_matches_naive_reference_and_ignores_memory_order() {
    for mode in [LnMode::Pre, LnMode::Post] {
        let cfg = BlockConfig::new(8, 2, mode);
        let (store, wid) = make_block(&cfg, true, 15);
        let q0 = random_tensor(&[1, 3, 8], 16);
        let m0 = random_tensor(&[1, 4, 8], 17);
        let run = |m: Tensor<f64>| {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape);
            let w = wid.bind(&vars);
            let mut ctx = Ctx::eval(&mut tape);
            let q = ctx.tape.constant(q0.clone());
            let mv = ctx.tape.constant(m);
            let y = cross_attention_block(&mut ctx, q, mv, &w, &cfg, None, None).unwrap();
            tape.value(y).data().to_vec()
        };
        let out = run(m0.clone());
        let r = cross_ref(&to_mat(&q0, 3), &to_mat(&m0, 4), &store, &wid, &cfg);
        let flat: Vec<f64> = r.concat();
        assert!(max_abs_diff(&out, &flat) < 1e-6, "{mode:?}");
        let perm = [3usize, 1, 0, 2];
        let pm: Vec<f64> = perm.iter().flat_map(|&p| m0.row(p).to_vec()).collect();
        let permuted = run(Tensor::new(&[1, 4, 8], pm).unwrap());
        assert!(max_abs_diff(&out, &permuted) < 1e-12);
    }
}

#[test]
fn cross_block_rejects_empty_memory() {
    let cfg = BlockConfig::new(8, 2, LnMode::Pre);
    let (store, wid) = make_block(&cfg, true, 18);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let w = wid.bind(&vars);
    let mut ctx = Ctx::eval(&mut tape);
    let q = ctx.tape.constant(random_tensor(&[1, 2, 8], 19));
    let m = ctx.tape.constant(Tensor::zeros(&[1, 0, 8]));
    assert!(matches!(
        cross_attention_block(&mut ctx, q, m, &w, &cfg, None, None),
        Err(Error::Contract(_))
    ));
}

fn head_fixture(d_in: usize, d_en: usize, vocab: usize, seed: u64) -> (ParamStore<f64>, HeadWeights<ParamId>, ParamId) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = store.add_normal("emb", &[vocab, d_en], &mut rng);
    let head = HeadWeights::init(&mut store, "head", d_in, d_en, &mut rng);
    randomize(&mut store, seed + 1);
    (store, head, emb)
}

#[test]
fn prediction_head_argmax_recovers_orthonormal_row() {
    let (d, vocab, k) = (4, 4, 2);
    let (mut store, head, emb) = head_fixture(d, d, vocab, 20);
    // orthonormal embedding rows: the identity
    *store.get_mut(emb) = Tensor::from_fn(&[vocab, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    for id in [head.dense.w, head.dense.b] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    // norm output is its offset when the input row is constant
    *store.get_mut(head.norm.gain) = Tensor::full(&[d], 1.0);
    *store.get_mut(head.norm.offset) = Tensor::from_fn(&[d], |j| if j == k { 1.0 } else { 0.0 });
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let hw = head.bind(&vars);
    let mut ctx = Ctx::eval(&mut tape);
    let h = ctx.tape.constant(random_tensor(&[3, d], 21));
    let logits = prediction_head(&mut ctx, h, &hw, vars[emb.0]).unwrap();
    for r in 0..3 {
        let row = tape.value(logits).row(r);
        let am = (0..vocab).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(am, k);
    }
}

#[test]
fn prediction_head_matches_direct_product() {
    let (store, head, emb) = head_fixture(3, 5, 7, 22);
    let hidden = random_tensor(&[4, 3], 23);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let hw = head.bind(&vars);
    let mut ctx = Ctx::eval(&mut tape);
    let h = ctx.tape.constant(hidden.clone());
    let logits = prediction_head(&mut ctx, h, &hw, vars[emb.0]).unwrap();
    let z: Mat = dense_ref(&to_mat(&hidden, 4), &store, &head.dense)
        .into_iter()
        .map(|r| r.into_iter().map(gelu_ref).collect())
        .collect();
    let z = ln_ref(&z, &store, &head.norm);
    let e = to_mat(store.get(emb), 7);
    let et: Mat = (0..5).map(|j| e.iter().map(|r| r[j]).collect()).collect();
    let expect = mm(&z, &et).concat();
    assert!(max_abs_diff(tape.value(logits).data(), &expect) < 1e-6);
}

#[test]
fn tied_embedding_affects_lookup_and_logit_column() {
    let (store, head, emb) = head_fixture(5, 5, 6, 24);
    let run = |s: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let hw = head.bind(&vars);
        let mut ctx = Ctx::eval(&mut tape);
        let e = ctx.tape.embedding_lookup(vars[emb.0], &[3, 1], &[2]).unwrap();
        let logits = prediction_head(&mut ctx, e, &hw, vars[emb.0]).unwrap();
        (tape.value(e).clone(), tape.value(logits).clone())
    };
    let (e0, l0) = run(&store);
    let mut perturbed = store.clone();
    perturbed.get_mut(emb).data_mut()[3 * 5 + 2] += 0.25;
    let (e1, l1) = run(&perturbed);
    assert_ne!(e0.row(0), e1.row(0));
    assert_eq!(e0.row(1), e1.row(1));
    // row 1 lookup is unchanged, so only logit column 3 can move for it
    for j in 0..6 {
        let moved = l0.row(1)[j] != l1.row(1)[j];
        assert_eq!(moved, j == 3, "column {j}");
    }
}

#[test]
fn add_positions_examples() {
    let mut tape = Tape::<f64>::new();
    let x0 = random_tensor(&[1, 2, 3], 25);
    let x = tape.constant(x0.clone());
    let zero = tape.constant(Tensor::zeros(&[4, 3]));
    let mut ctx = Ctx::eval(&mut tape);
    let y = add_positions(&mut ctx, x, zero, &[0, 1]).unwrap();
    assert_eq!(tape.value(y).data(), x0.data());

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 3]));
    let table = tape.constant(random_tensor(&[4, 3], 26));
    let mut ctx = Ctx::eval(&mut tape);
    let y = add_positions(&mut ctx, x, table, &[0, 0]).unwrap();
    assert_eq!(tape.value(y).row(0), tape.value(y).row(1));
    let mut ctx = Ctx::eval(&mut tape);
    assert!(add_positions(&mut ctx, x, table, &[0, 4]).is_err());
}

#[test]
fn add_positions_gradient_touches_used_rows_only() {
    let x0 = random_tensor(&[2, 2, 3], 27);
    let t0 = random_tensor(&[5, 3], 28);
    let w = random_tensor(&[2, 2, 3], 29);
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let mut ctx = Ctx::eval(tape);
        let y = add_positions(&mut ctx, v[0], v[1], &[0, 3, 3, 1]).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let wv = tape.constant(w.clone());
        let p = tape.mul(y, wv)?;
        let sq = tape.mul(p, p)?;
        Ok(tape.sum(sq))
    };
    assert!(check_gradients(&[x0.clone(), t0.clone()], f) <= 1e-6);
    let mut tape = Tape::new();
    let xv = tape.leaf(x0);
    let tv = tape.leaf(t0);
    let out = f(&mut tape, &[xv, tv]).unwrap();
    let g = tape.backward(out).unwrap();
    let gt = g.get(tv).unwrap();
    for r in [2usize, 4] {
        assert!(gt.row(r).iter().all(|&v| v == 0.0));
    }
    assert!(gt.row(3).iter().any(|&v| v != 0.0));
}

#[test]
fn projection_examples() {
    // identity-initialised square projection
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let p = Dense::init(&mut store, "proj", 3, 3, &mut rng);
    *store.get_mut(p.w) = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let x0 = random_tensor(&[2, 2, 3], 31);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let pw = p.bind(&vars);
    let mut ctx = Ctx::eval(&mut tape);
    let x = ctx.tape.constant(x0.clone());
    let y = projection(&mut ctx, x, Some(&pw)).unwrap();
    assert_eq!(tape.value(y).data(), x0.data());
    let mut ctx = Ctx::eval(&mut tape);
    assert_eq!(projection(&mut ctx, x, None).unwrap(), x);

    // 4 -> 2 by hand
    let mut store = ParamStore::<f64>::new();
    let p = Dense::init(&mut store, "proj", 4, 2, &mut rng);
    *store.get_mut(p.w) = Tensor::from_f64(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]).unwrap();
    *store.get_mut(p.b) = Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap();
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let pw = p.bind(&vars);
    let mut ctx = Ctx::eval(&mut tape);
    let x = ctx.tape.constant(Tensor::from_f64(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = projection(&mut ctx, x, Some(&pw)).unwrap();
    // [1+3+8, 2+3-4] + bias
    assert_eq!(tape.value(y).data(), &[12.5, 0.5]);
    assert_eq!(tape.matmul_flops(), 2 * 4 * 2);
}

#[test]
fn projection_gradient() {
    let x0 = random_tensor(&[2, 3, 4], 32);
    let w0 = random_tensor(&[4, 2], 33);
    let b0 = random_tensor(&[2], 34);
    let err = check_gradients(&[x0, w0, b0], |tape, v| {
        let mut ctx = Ctx::eval(tape);
        let y = projection(&mut ctx, v[0], Some(&Dense { w: v[1], b: v[2] })).unwrap();
        let sq = tape.mul(y, y)?;
        Ok(tape.sum(sq))
    });
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn block_gradients_match_finite_differences() {
    for (mode, cross) in [(LnMode::Pre, false), (LnMode::Post, false), (LnMode::Pre, true)] {
        let cfg = BlockConfig::new(8, 2, mode);
        let (store, wid) = make_block(&cfg, cross, 35);
        let mut inputs: Vec<Tensor<f64>> = store.iter().map(|p| p.value.clone()).collect();
        inputs.push(random_tensor(&[2, 3, 8], 36));
        inputs.push(random_tensor(&[2, 2, 8], 37));
        let proj = random_tensor(&[2, 3, 8], 38);
        let n = store.len();
        let err = check_gradients(&inputs, |tape, v| {
            let w = wid.bind(&v[..n]);
            let mut ctx = Ctx::eval(tape);
            let mask = key_mask::<f64>(&[true, true, false, true, true, true], 2, 3).unwrap();
            let y = if cross {
                cross_attention_block(&mut ctx, v[n], v[n + 1], &w, &cfg, mask.as_ref(), None).unwrap()
            } else {
                self_attention_block(&mut ctx, v[n], &w, &cfg, mask.as_ref()).unwrap()
            };
            let pv = tape.constant(proj.clone());
            let p = tape.mul(y, pv)?;
            Ok(tape.sum(p))
        });
        assert!(err <= 1e-6, "{mode:?} cross={cross}: {err}");
    }
}

#[test]
fn dropout_in_ctx_is_seeded() {
    let run = |seed: u64| {
        let mut tape = Tape::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ctx = Ctx::new(&mut tape, Some(&mut rng));
        let x = ctx.tape.constant(Tensor::full(&[64], 1.0));
        let y = ctx.dropout(x, 0.5);
        tape.value(y).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let mut tape = Tape::<f32>::new();
    let mut ctx = Ctx::eval(&mut tape);
    let x = ctx.tape.constant(Tensor::full(&[4], 1.0));
    assert_eq!(ctx.dropout(x, 0.5), x);
}
