//! Independent reference implementations used as test oracles. Nothing
//! here calls the library's kernels: plain loops over `Vec<f64>`.
#![allow(dead_code)]

use danube::model::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(data: &[f64], rows: usize, cols: usize) -> Mat {
    assert_eq!(data.len(), rows * cols);
    (0..rows)
        .map(|r| data[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn rms_norm(x: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().zip(w).map(|(v, g)| v * r * g).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotates one head vector: dimension `i` pairs with `i + d/2`.
pub fn rope(v: &[f64], pos: usize, theta: f64) -> Vec<f64> {
    let d = v.len();
    let half = d / 2;
    let mut out = v.to_vec();
    for i in 0..half {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = (pos as f64 * freq).sin_cos();
        out[i] = v[i] * c - v[i + half] * s;
        out[i + half] = v[i] * s + v[i + half] * c;
    }
    out
}

fn mat_of(t: &danube::tensor::Tensor<f64>) -> Mat {
    let s = t.shape();
    to_mat(t.data(), s[0], s[1])
}

/// Straight-line decoder forward: logits `[T][vocab]`.
pub fn forward(cfg: &ModelConfig, p: &ModelParams<f64>, tokens: &[usize]) -> Mat {
    let t_len = tokens.len();
    let (h, nh, nkv) = (cfg.hidden_size, cfg.n_heads, cfg.n_kv_heads);
    let d = h / nh;
    let group = nh / nkv;
    let emb = mat_of(&p.embed);
    let mut x: Mat = tokens.iter().map(|&t| emb[t].clone()).collect();
    for l in &p.layers {
        let xn: Mat = x
            .iter()
            .map(|r| rms_norm(r, l.attn_norm.data(), cfg.norm_eps))
            .collect();
        let q = matmul(&xn, &mat_of(&l.wq));
        let k = matmul(&xn, &mat_of(&l.wk));
        let v = matmul(&xn, &mat_of(&l.wv));
        let mut attn = vec![vec![0.0; h]; t_len];
        for head in 0..nh {
            let kvh = head / group;
            let qh: Mat = (0..t_len)
                .map(|i| rope(&q[i][head * d..(head + 1) * d], i, cfg.rope_theta))
                .collect();
            let kh: Mat = (0..t_len)
                .map(|j| rope(&k[j][kvh * d..(kvh + 1) * d], j, cfg.rope_theta))
                .collect();
            for i in 0..t_len {
                let allowed: Vec<usize> = (0..=i)
                    .filter(|&j| cfg.sliding_window.is_none_or(|w| j + w > i))
                    .collect();
                let scores: Vec<f64> = allowed
                    .iter()
                    .map(|&j| {
                        qh[i].iter().zip(&kh[j]).map(|(a, b)| a * b).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&scores);
                for (&j, wj) in allowed.iter().zip(&w) {
                    for c in 0..d {
                        attn[i][head * d + c] += wj * v[j][kvh * d + c];
                    }
                }
            }
        }
        let o = matmul(&attn, &mat_of(&l.wo));
        for i in 0..t_len {
            for c in 0..h {
                x[i][c] += o[i][c];
            }
        }
        let xn: Mat = x
            .iter()
            .map(|r| rms_norm(r, l.mlp_norm.data(), cfg.norm_eps))
            .collect();
        let g = matmul(&xn, &mat_of(&l.w_gate));
        let u = matmul(&xn, &mat_of(&l.w_up));
        let act: Mat = g
            .iter()
            .zip(&u)
            .map(|(gr, ur)| gr.iter().zip(ur).map(|(a, b)| silu(*a) * b).collect())
            .collect();
        let down = matmul(&act, &mat_of(&l.w_down));
        for i in 0..t_len {
            for c in 0..h {
                x[i][c] += down[i][c];
            }
        }
    }
    let xn: Mat = x
        .iter()
        .map(|r| rms_norm(r, p.final_norm.data(), cfg.norm_eps))
        .collect();
    matmul(&xn, &mat_of(&p.lm_head))
}

/// Mean next-token NLL of `window` under the oracle forward.
pub fn window_loss(cfg: &ModelConfig, p: &ModelParams<f64>, window: &[usize]) -> f64 {
    let n = window.len() - 1;
    let logits = forward(cfg, p, &window[..n]);
    -(0..n)
        .map(|i| log_softmax(&logits[i])[window[i + 1]])
        .sum::<f64>()
        / n as f64
}

/// Reference AdamW on flat vectors: bias-corrected moments, decoupled
/// decay `x ← x − lr·(m̂/(√v̂+ε) + wd·x)`.
pub struct RefAdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl RefAdamW {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        x: &mut [f64],
        g: &[f64],
        lr: f64,
        b1: f64,
        b2: f64,
        eps: f64,
        wd: f64,
        decay: bool,
    ) {
        self.t += 1;
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            let w = if decay { wd } else { 0.0 };
            x[i] -= lr * (mh / (vh.sqrt() + eps) + w * x[i]);
        }
    }
}

/// E4M3 code (1 sign, 4 exponent bits with bias 7, 3 mantissa bits; the
/// all-ones pattern is NaN, there is no infinity) to its real value.
pub fn e4m3_decode(code: u8) -> f64 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = ((code >> 3) & 0x0F) as i32;
    let m = (code & 0x07) as f64;
    if e == 15 && m == 7.0 {
        return f64::NAN;
    }
    if e == 0 {
        sign * (m / 8.0) * 2f64.powi(-6)
    } else {
        sign * (1.0 + m / 8.0) * 2f64.powi(e - 7)
    }
}

pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept local so the oracle does not share samplers.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Perturbs every parameter (including norm weights) so tests do not sit
/// on the symmetric init.
pub fn jitter(p: &mut ModelParams<f64>, scale: f64, seed: u64) {
    let mut r = rng(seed);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += scale * randn(&mut r);
        }
    }
}
