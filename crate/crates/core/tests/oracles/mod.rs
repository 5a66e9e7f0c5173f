//! Reference implementations shared by the attention tests and the
//! acceptance harness.
#![allow(dead_code)]

use flowdet_core::attn::{
    grid_positions, relative_index, sinusoidal_pe, GcbParams, LdbParams, SaaConfig,
};
use flowdet_core::nn::{Init, ParamStore};
use flowdet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn cfg(dim: usize, heads: usize, window: usize, reduction: usize) -> SaaConfig {
    SaaConfig {
        embed_dim: dim,
        heads,
        window,
        reduction,
        ffn_dim: 2 * dim,
        ..SaaConfig::default()
    }
}

/// Randomize every parameter so zero-initialized heads are exercised too.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::randn(&shape, std, &mut rng);
    }
}

pub fn linear_rows(
    x: &[f64],
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    col0: usize,
    cols: usize,
) -> Vec<f64> {
    let d_out = w.shape()[1];
    (0..cols)
        .map(|j| {
            b.data()[col0 + j]
                + x.iter()
                    .enumerate()
                    .map(|(i, v)| v * w.data()[i * d_out + col0 + j])
                    .sum::<f64>()
        })
        .collect()
}

/// Naive multi-head attention for one image; `logit_bias(h, i, j)` returns
/// `None` for masked pairs.
pub fn naive_attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    heads: usize,
    logit_bias: impl Fn(usize, usize, usize) -> Option<f64>,
) -> Vec<Vec<f64>> {
    let c = q[0].len();
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<Option<f64>> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    logit_bias(h, i, j).map(|b| {
                        (0..d).map(|e| qi[h * d + e] * kj[h * d + e]).sum::<f64>()
                            / (d as f64).sqrt()
                            + b
                    })
                })
                .collect();
            let m = logits
                .iter()
                .flatten()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let ws: Vec<f64> = logits
                .iter()
                .map(|l| l.map_or(0.0, |l| (l - m).exp()))
                .collect();
            let z: f64 = ws.iter().sum();
            for (j, wj) in ws.iter().enumerate() {
                for e in 0..d {
                    out[i][h * d + e] += wj / z * v[j][h * d + e];
                }
            }
        }
    }
    out
}

pub fn tokens_of(x: &Tensor<f64>, img: usize) -> Vec<Vec<f64>> {
    let s = x.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    (0..hw)
        .map(|p| (0..c).map(|ch| x.data()[(img * c + ch) * hw + p]).collect())
        .collect()
}

pub fn ldb_setup(c: &SaaConfig, seed: u64) -> (ParamStore<f64>, LdbParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = LdbParams::new(&mut Init::new(&mut store, &mut rng), "ldb", c);
    (store, params)
}

pub fn ldb_oracle(
    x: &Tensor<f64>,
    store: &ParamStore<f64>,
    params: &LdbParams,
    c: &SaaConfig,
) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let win = c.window;
    let rel = relative_index(win);
    let lpe = store.get(params.lpe);
    let qkv = &params.qkv;
    let zero = Tensor::zeros(&[ch]);
    let (wp, bp) = (store.get(params.proj.w), store.get(params.proj.b));
    let mut out = vec![0.0; n * ch * h * w];
    for img in 0..n {
        let toks = tokens_of(x, img);
        let q: Vec<_> = toks
            .iter()
            .map(|t| linear_rows(t, store.get(qkv.q.w), store.get(qkv.q.b), 0, ch))
            .collect();
        let k: Vec<_> = toks
            .iter()
            .map(|t| linear_rows(t, store.get(qkv.k), &zero, 0, ch))
            .collect();
        let v: Vec<_> = toks
            .iter()
            .map(|t| linear_rows(t, store.get(qkv.v.w), store.get(qkv.v.b), 0, ch))
            .collect();
        let win_of = |p: usize| ((p / w) / win, (p % w) / win);
        let local = |p: usize| ((p / w) % win) * win + (p % w) % win;
        let att = naive_attention(&q, &k, &v, c.heads, |hd, i, j| {
            (win_of(i) == win_of(j))
                .then(|| lpe.data()[rel[local(i) * win * win + local(j)] * c.heads + hd])
        });
        for (p, a) in att.iter().enumerate() {
            let o = linear_rows(a, wp, bp, 0, ch);
            for (cc, v) in o.iter().enumerate() {
                out[(img * ch + cc) * h * w + p] = *v;
            }
        }
    }
    Tensor::from_vec(&[n, ch, h, w], out).unwrap()
}

pub fn gcb_setup(c: &SaaConfig, seed: u64) -> (ParamStore<f64>, GcbParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = GcbParams::new(&mut Init::new(&mut store, &mut rng), "gcb", c);
    (store, params)
}

/// Full softmax attention over every position, with the projected
/// positional encoding added to queries and keys.
pub fn gcb_full_oracle(
    x: &Tensor<f64>,
    store: &ParamStore<f64>,
    params: &GcbParams,
    c: &SaaConfig,
) -> Tensor<f64> {
    let s = x.shape().to_vec();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let pe: Tensor<f64> = sinusoidal_pe(&grid_positions(h, w), ch, c.pe_temperature);
    let wpos = store.get(params.pos);
    let zero = Tensor::zeros(&[ch]);
    let pe_rows: Vec<Vec<f64>> = pe
        .data()
        .chunks(ch)
        .map(|r| linear_rows(r, wpos, &zero, 0, ch))
        .collect();
    let add = |a: Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let mut want = vec![0.0; n * ch * h * w];
    for img in 0..n {
        let toks = tokens_of(x, img);
        let q: Vec<_> = toks
            .iter()
            .zip(&pe_rows)
            .map(|(t, pr)| {
                add(
                    linear_rows(
                        t,
                        store.get(params.qkv.q.w),
                        store.get(params.qkv.q.b),
                        0,
                        ch,
                    ),
                    pr,
                )
            })
            .collect();
        let k: Vec<_> = toks
            .iter()
            .zip(&pe_rows)
            .map(|(t, pr)| add(linear_rows(t, store.get(params.qkv.k), &zero, 0, ch), pr))
            .collect();
        let v: Vec<_> = toks
            .iter()
            .map(|t| {
                linear_rows(
                    t,
                    store.get(params.qkv.v.w),
                    store.get(params.qkv.v.b),
                    0,
                    ch,
                )
            })
            .collect();
        let att = naive_attention(&q, &k, &v, c.heads, |_, _, _| Some(0.0));
        for (pi, a) in att.iter().enumerate() {
            let o = linear_rows(a, store.get(params.proj.w), store.get(params.proj.b), 0, ch);
            for (cc, val) in o.iter().enumerate() {
                want[(img * ch + cc) * h * w + pi] = *val;
            }
        }
    }
    Tensor::from_vec(&[n, ch, h, w], want).unwrap()
}
