use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::gradcheck::{check_params, DEFAULT_STEP};
use crate::model::config::InitMode;
use crate::params::ParamStore;
use crate::perm::{permute_tensor, random};
use crate::tensor::Tensor;

const D: usize = 8;
const H: usize = 2;

fn build(kind: BlockKind, mode: InitMode, seed: u64) -> (ParamStore, Block) {
    let mut store = ParamStore::new();
    let b = {
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mode,
        };
        Block::new(
            &mut init,
            "b",
            BlockSpec {
                d: D,
                heads: H,
                ffn: 16,
                dropout: 0.1,
                kind,
                rope: true,
                channel_bias: true,
            },
        )
    };
    (store, b)
}

fn rot() -> Arc<RotaryTable> {
    Arc::new(RotaryTable::new(D / H, 32, 10_000.0))
}

fn random_tokens(rows: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        &[rows, D],
        (0..rows * D).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn trace(store: &ParamStore, a: &Attention, x: &Tensor, tok: &Tokens) -> AttentionTrace {
    let mut tape = Tape::inference();
    let mut f = Fwd::eval(&mut tape, store);
    a.trace(&mut f, &Var::constant(x.clone()), tok, &rot()).unwrap()
}

#[test]
fn single_token_is_output_of_value_path() {
    let (store, b) = build(BlockKind::Diver, InitMode::Dense, 1);
    let x = random_tokens(1, 2);
    let t = trace(&store, &b.attn, &x, &Tokens::grid(1, 1));
    assert_eq!(t.weights[0].value().data(), &[1.0]);
    let wv = store.get(b.attn.wv.w);
    let wo = store.get(b.attn.wo.w);
    let want = x.matmul(wv).unwrap().matmul(wo).unwrap();
    assert!(t.output.value().max_abs_diff(&want) < 1e-12);
}

#[test]
fn weights_rows_sum_to_one() {
    let (store, b) = build(BlockKind::Diver, InitMode::Dense, 3);
    let (c, n) = (3, 5);
    let t = trace(&store, &b.attn, &random_tokens(c * n, 4), &Tokens::grid(c, n));
    for w in &t.weights {
        for r in 0..c * n {
            let s: f64 = w.value().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn equal_bias_scalars_cancel() {
    let (mut store, b) = build(BlockKind::Diver, InitMode::Dense, 5);
    let (c, n) = (3, 4);
    let x = random_tokens(c * n, 6);
    let tok = Tokens::grid(c, n);
    let mut plain = b.attn.clone();
    plain.channel_bias = false;
    let base = trace(&store, &plain, &x, &tok);
    for v in [-2.0, 0.0, 0.7] {
        store.set(b.attn.u_same, Tensor::full(&[H], v)).unwrap();
        store.set(b.attn.u_diff, Tensor::full(&[H], v)).unwrap();
        let t = trace(&store, &b.attn, &x, &tok);
        for h in 0..H {
            assert!(t.weights[h].value().max_abs_diff(base.weights[h].value()) < 1e-12);
        }
    }
}

#[test]
fn scores_depend_on_offset_only() {
    let (store, b) = build(BlockKind::Diver, InitMode::Dense, 7);
    let (c, n) = (2, 10);
    let mut x = random_tokens(c * n, 8);
    let qa = random_tokens(1, 9);
    let kb = random_tokens(1, 10);
    // Channel 0 holds the query content at times 5 and 8, channel 1 the
    // key content at times 2 and 5.
    for t in [5, 8] {
        x.data_mut()[t * D..(t + 1) * D].copy_from_slice(qa.data());
    }
    for t in [2, 5] {
        let r = n + t;
        x.data_mut()[r * D..(r + 1) * D].copy_from_slice(kb.data());
    }
    let tr = trace(&store, &b.attn, &x, &Tokens::grid(c, n));
    let nt = c * n;
    for h in 0..H {
        let s = tr.scores[h].value().data();
        let e1 = s[5 * nt + (n + 2)];
        let e2 = s[8 * nt + (n + 5)];
        assert!((e1 - e2).abs() < 1e-10, "{e1} vs {e2}");
    }
}

#[test]
fn zero_offset_is_plain_dot_product() {
    let (store, b) = build(BlockKind::Diver, InitMode::Dense, 11);
    let mut a = b.attn.clone();
    a.channel_bias = false;
    let n = 4;
    let row = random_tokens(1, 12);
    let x = Tensor::new(&[n, D], row.data().repeat(n)).unwrap();
    let tr = trace(&store, &a, &x, &Tokens::grid(1, n));
    let q = row.matmul(store.get(a.wq.w)).unwrap();
    let k = row.matmul(store.get(a.wk.w)).unwrap();
    let hd = D / H;
    for h in 0..H {
        let dot: f64 = (0..hd)
            .map(|i| q.data()[h * hd + i] * k.data()[h * hd + i])
            .sum();
        let want = dot / (hd as f64).sqrt();
        for i in 0..n {
            assert!((tr.scores[h].value().data()[i * n + i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn raising_same_channel_bias_raises_same_channel_mass() {
    let (mut store, b) = build(BlockKind::Diver, InitMode::Dense, 13);
    let (c, n) = (3, 4);
    let x = random_tokens(c * n, 14);
    let tok = Tokens::grid(c, n);
    store.set(b.attn.u_diff, Tensor::full(&[H], 0.3)).unwrap();
    let mass = |store: &ParamStore| -> Vec<f64> {
        let t = trace(store, &b.attn, &x, &tok);
        (0..H)
            .map(|h| {
                let w = t.weights[h].value();
                let mut m = 0.0;
                for i in 0..c * n {
                    for j in 0..c * n {
                        if tok.channel[i] == tok.channel[j] {
                            m += w.data()[i * c * n + j];
                        }
                    }
                }
                m
            })
            .collect()
    };
    let mut prev: Option<Vec<f64>> = None;
    for u in [-1.0, 0.5, 2.0] {
        store.set(b.attn.u_same, Tensor::full(&[H], u)).unwrap();
        let m = mass(&store);
        if let Some(p) = &prev {
            for h in 0..H {
                assert!(m[h] > p[h]);
            }
        }
        prev = Some(m);
    }
}

#[test]
fn criss_cross_heads_stay_on_their_axis() {
    let (store, b) = build(BlockKind::CrissCross, InitMode::Dense, 15);
    let (c, n) = (3, 4);
    let tok = Tokens::grid(c, n);
    let t = trace(&store, &b.attn, &random_tokens(c * n, 16), &tok);
    let nt = c * n;
    for h in 0..H {
        let w = t.weights[h].value().data();
        for i in 0..nt {
            for j in 0..nt {
                let same_t = tok.time[i] == tok.time[j];
                let same_c = tok.channel[i] == tok.channel[j];
                if !same_t && !same_c {
                    assert_eq!(w[i * nt + j], 0.0);
                }
                if h < b.attn.spatial_heads() && !same_t {
                    assert_eq!(w[i * nt + j], 0.0);
                }
                if h >= b.attn.spatial_heads() && !same_c {
                    assert_eq!(w[i * nt + j], 0.0);
                }
            }
        }
    }
}

#[test]
fn vanilla_attention_ignores_switches() {
    let (_, b) = build(BlockKind::Vanilla, InitMode::Dense, 17);
    assert!(!b.attn.rope && !b.attn.channel_bias && !b.attn.split_axes);
}

fn block_out(store: &ParamStore, b: &Block, x: &Tensor, c: usize, n: usize) -> Tensor {
    let mut tape = Tape::inference();
    let mut f = Fwd::eval(&mut tape, store);
    b.forward(&mut f, &Var::constant(x.clone()), &Tokens::grid(c, n), &rot())
        .unwrap()
        .value()
        .clone()
}

#[test]
fn blocks_commute_with_channel_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for kind in [BlockKind::Diver, BlockKind::CrissCross] {
        let (store, b) = build(kind, InitMode::Dense, 18);
        for c in [2, 5] {
            let n = 6;
            let x = random_tokens(c * n, 20);
            let base = block_out(&store, &b, &x, c, n);
            for _ in 0..5 {
                let p = random(&mut rng, c);
                let got = block_out(&store, &b, &permute_tensor(&x, &p).unwrap(), c, n);
                let want = permute_tensor(&base, &p).unwrap();
                assert!(got.max_abs_diff(&want) < 1e-9);
            }
        }
    }
}

#[test]
fn eval_mode_shapes_and_determinism() {
    for kind in [BlockKind::Diver, BlockKind::Vanilla, BlockKind::CrissCross] {
        let (store, b) = build(kind, InitMode::Dense, 21);
        let x = random_tokens(12, 22);
        let a = block_out(&store, &b, &x, 3, 4);
        assert_eq!(a.shape(), &[12, D]);
        assert_eq!(a, block_out(&store, &b, &x, 3, 4));
    }
}

#[test]
fn dropout_changes_training_output() {
    let (store, b) = build(BlockKind::Diver, InitMode::Dense, 23);
    let x = Var::constant(random_tokens(6, 24));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::inference();
    let mut f = Fwd::train(&mut tape, &store, &mut rng);
    let t = b.forward(&mut f, &x, &Tokens::grid(2, 3), &rot()).unwrap();
    let e = block_out(&store, &b, x.value(), 2, 3);
    assert!(t.value().max_abs_diff(&e) > 0.0);
}

#[test]
fn block_gradients_match_finite_differences() {
    // Two channels, three patches, reconstruction-style MSE.
    let (store, b) = build(BlockKind::Diver, InitMode::Dense, 25);
    let x = random_tokens(6, 26);
    let target = random_tokens(6, 27);
    let checks = check_params(&store, DEFAULT_STEP, |tape, store| {
        let mut f = Fwd::eval(tape, store);
        let y = b.forward(&mut f, &Var::constant(x.clone()), &Tokens::grid(2, 3), &rot())?;
        let diff = f.tape.sub(&y, &Var::constant(target.clone()))?;
        let sq = f.tape.mul(&diff, &diff)?;
        let s = f.tape.sum(&sq)?;
        f.tape.scale(&s, 1.0 / 48.0)
    })
    .unwrap();
    for c in checks {
        assert!(c.rel_err <= 1e-4, "{}: {}", c.name, c.rel_err);
        assert!(c.max_abs_grad > 0.0, "{} has no gradient", c.name);
    }
}
