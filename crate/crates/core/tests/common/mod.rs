//! Test-only helpers: an independent straight-line reimplementation of the
//! model (plain nested loops, no tape, no shared kernels) and random model
//! builders.

#![allow(dead_code)]

use echo_core::model::{CrossDecoderBlock, Ffn, GlobalKvProjector, SelfAttnBlock};
use echo_core::{EchoModel, ModelConfig, Parameter, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    let rows: Vec<&[f64]> = m.iter().map(|r| r.as_slice()).collect();
    Tensor::from_rows(&rows)
}

fn mm(a: &Mat, w: &Parameter) -> Mat {
    let (k, n) = (w.value.shape()[0], w.value.shape()[1]);
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n)
                .map(|j| (0..k).map(|t| row[t] * w.value.data()[t * n + j]).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn add_vec(a: &Mat, b: &Parameter) -> Mat {
    a.iter()
        .map(|x| x.iter().zip(b.value.data()).map(|(p, q)| p + q).collect())
        .collect()
}

fn rms(a: &Mat, g: &Parameter, eps: f64) -> Mat {
    a.iter()
        .map(|x| {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
            let r = (ms + eps).sqrt();
            x.iter()
                .zip(g.value.data())
                .map(|(v, gg)| gg * v / r)
                .collect()
        })
        .collect()
}

fn rotate(a: &Mat, positions: &[usize], heads: usize, base: f64) -> Mat {
    a.iter()
        .zip(positions)
        .map(|(x, &p)| {
            let dk = x.len() / heads;
            let half = dk / 2;
            let mut y = x.clone();
            for h in 0..heads {
                for i in 0..half {
                    let theta = p as f64 / base.powf(2.0 * i as f64 / dk as f64);
                    let (a0, b0) = (x[h * dk + i], x[h * dk + i + half]);
                    y[h * dk + i] = a0 * theta.cos() - b0 * theta.sin();
                    y[h * dk + i + half] = a0 * theta.sin() + b0 * theta.cos();
                }
            }
            y
        })
        .collect()
}

/// Causal multi-head attention of queries at `positions` over keys at
/// positions `0..k.len()`.
fn attend(q: &Mat, k: &Mat, v: &Mat, positions: &[usize], heads: usize) -> Mat {
    let d = q[0].len();
    let dk = d / heads;
    q.iter()
        .zip(positions)
        .map(|(qi, &p)| {
            let mut out = vec![0.0; d];
            for h in 0..heads {
                let r = h * dk..(h + 1) * dk;
                let scores: Vec<f64> = (0..=p)
                    .map(|j| {
                        qi[r.clone()]
                            .iter()
                            .zip(&k[j][r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, w) in e.iter().enumerate() {
                    for t in r.clone() {
                        out[t] += w / z * v[j][t];
                    }
                }
            }
            out
        })
        .collect()
}

pub fn oracle_ffn(f: &Ffn, x: &Mat) -> Mat {
    let gate = add_vec(&mm(x, &f.w_gate), &f.b_gate);
    let up = add_vec(&mm(x, &f.w_up), &f.b_up);
    let h: Mat = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| {
            g.iter()
                .zip(u)
                .map(|(a, b)| a / (1.0 + (-a).exp()) * b)
                .collect()
        })
        .collect();
    add_vec(&mm(&h, &f.w_down), &f.b_down)
}

fn tail(
    cfg: &ModelConfig,
    x: &Mat,
    a: &Mat,
    w_o: &Parameter,
    ffn_norm: &Parameter,
    ffn: &Ffn,
) -> Mat {
    let x1 = add(&mm(a, w_o), x);
    add(&oracle_ffn(ffn, &rms(&x1, ffn_norm, cfg.eps)), &x1)
}

/// Returns (output, rotated keys, values).
pub fn oracle_self_block(
    cfg: &ModelConfig,
    b: &SelfAttnBlock,
    x: &Mat,
    pos: &[usize],
) -> (Mat, Mat, Mat) {
    let h = rms(x, &b.attn_norm, cfg.eps);
    let q = rotate(&mm(&h, &b.w_q), pos, cfg.n_heads, cfg.rope_base);
    let k = rotate(&mm(&h, &b.w_k), pos, cfg.n_heads, cfg.rope_base);
    let v = mm(&h, &b.w_v);
    let a = attend(&q, &k, &v, pos, cfg.n_heads);
    (tail(cfg, x, &a, &b.w_o, &b.ffn_norm, &b.ffn), k, v)
}

pub fn oracle_shared_kv(
    cfg: &ModelConfig,
    g: &GlobalKvProjector,
    x_n: &Mat,
    pos: &[usize],
) -> (Mat, Mat) {
    let k = rotate(
        &rms(&mm(x_n, &g.w_k), &g.k_norm, cfg.eps),
        pos,
        cfg.n_heads,
        cfg.rope_base,
    );
    let v = rms(&mm(x_n, &g.w_v), &g.v_norm, cfg.eps);
    (k, v)
}

pub fn oracle_cross_block(
    cfg: &ModelConfig,
    b: &CrossDecoderBlock,
    x: &Mat,
    k: &Mat,
    v: &Mat,
    pos: &[usize],
) -> Mat {
    let h = rms(x, &b.attn_norm, cfg.eps);
    let q = rotate(&mm(&h, &b.w_q), pos, cfg.n_heads, cfg.rope_base);
    let a = attend(&q, k, v, pos, cfg.n_heads);
    tail(cfg, x, &a, &b.w_o, &b.ffn_norm, &b.ffn)
}

/// Straight-line logits `[T x vocab]` and the hidden state after layer N.
pub fn oracle_forward(model: &EchoModel, tokens: &[usize]) -> (Mat, Mat) {
    let cfg = &model.config;
    let pos: Vec<usize> = (0..tokens.len()).collect();
    let mut x: Mat = tokens
        .iter()
        .map(|&t| model.token_embedding.value.row(t).to_vec())
        .collect();
    for b in &model.blocks_self {
        x = oracle_self_block(cfg, b, &x, &pos).0;
    }
    let x_n = x.clone();
    if let Some(g) = &model.global_kv {
        let (k, v) = oracle_shared_kv(cfg, g, &x_n, &pos);
        for b in &model.blocks_cross {
            x = oracle_cross_block(cfg, b, &x, &k, &v, &pos);
        }
    }
    (
        mm(&rms(&x, &model.final_norm, cfg.eps), &model.lm_head),
        x_n,
    )
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Overwrites every parameter with non-trivial random values: weights
/// ~ U(-s, s), norm gains ~ 1 + U(-0.3, 0.3), biases ~ U(-0.1, 0.1).
pub fn randomize(model: &mut EchoModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        let is_norm = p.name.ends_with("norm");
        let is_bias = p.name.contains(".b_");
        for v in p.value.data_mut() {
            *v = if is_norm {
                1.0 + rng.random_range(-0.3..0.3)
            } else if is_bias {
                rng.random_range(-0.1..0.1)
            } else {
                rng.random_range(-scale..scale)
            };
        }
    }
}

pub fn random_model(
    d: usize,
    heads: usize,
    layers: usize,
    n_self: usize,
    vocab: usize,
    seed: u64,
) -> EchoModel {
    let cfg = ModelConfig::tiny(d, heads, layers, vocab)
        .with_self_layers(n_self)
        .with_seed(seed);
    let mut m = EchoModel::init(cfg).unwrap();
    randomize(&mut m, seed.wrapping_add(1), 0.4);
    m
}

pub fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Relative error of two gradient tensors: max |a - n| over the larger max magnitude.
pub fn rel_err(a: &Tensor, n: &Tensor) -> f64 {
    a.max_abs_diff(n) / a.max_abs().max(n.max_abs()).max(1e-12)
}
