//! Gradient-free forward pass with a key/value cache for incremental decoding.
//!
//! Uses the same kernels and accumulation order as the graph forward, so a
//! prefill followed by single-token steps reproduces the full-sequence
//! logits.

use super::{attends, check_tokens, ForwardOptions, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::pretrain::fp8;
use crate::tensor::{kernels, Scalar, Tensor};

/// Rotated keys and values of every layer for positions `0..len`.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn linear<S: Scalar>(x: &[S], rows: usize, w: &Tensor<S>, quantize: bool) -> Vec<S> {
    let (din, dout) = w.dims2().expect("weight matrix");
    let mut out = vec![S::zero(); rows * dout];
    if quantize {
        let xq: Vec<S> = x.iter().map(|&v| fp8::quantize_scalar(v)).collect();
        let wq: Vec<S> = w.data().iter().map(|&v| fp8::quantize_scalar(v)).collect();
        kernels::matmul(&xq, &wq, &mut out, rows, din, dout);
    } else {
        kernels::matmul(x, w.data(), &mut out, rows, din, dout);
    }
    out
}

fn rms_norm<S: Scalar>(x: &[S], w: &Tensor<S>, eps: S) -> Vec<S> {
    let d = w.numel();
    let mut out = vec![S::zero(); x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        kernels::rms_norm_row(row, w.data(), eps, o);
    }
    out
}

impl<S: Scalar> Model<S> {
    /// Appends `tokens` to the cached context and returns their logits
    /// `[tokens.len() × vocab]`.
    pub fn forward_cached(
        &self,
        cache: &mut KvCache<S>,
        tokens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<Tensor<S>> {
        let cfg = &self.config;
        check_tokens(cfg, tokens)?;
        let start = cache.len;
        let n = tokens.len();
        if start + n > cfg.max_context {
            return Err(Error::Input(format!(
                "cached context of {} plus {n} new tokens exceeds {}",
                start, cfg.max_context
            )));
        }
        let h = cfg.hidden_size;
        let d = cfg.head_dim();
        let kvd = cfg.kv_dim();
        let eps = S::cast(cfg.norm_eps);
        let positions: Vec<usize> = (start..start + n).collect();
        let (cos, sin) = kernels::rope_tables::<S>(&positions, d, cfg.rope_theta);
        let scale = S::one() / S::cast(d as f64).sqrt();
        let quant = opts.fp8;

        let mut x = Vec::with_capacity(n * h);
        for &t in tokens {
            x.extend_from_slice(self.params.embed.row(t));
        }

        for (li, layer) in self.params.layers.iter().enumerate() {
            let xn = rms_norm(&x, &layer.attn_norm, eps);
            let mut q = linear(&xn, n, &layer.wq, quant);
            let mut k = linear(&xn, n, &layer.wk, quant);
            let v = linear(&xn, n, &layer.wv, quant);
            kernels::rope_apply(&mut q, cfg.n_heads, d, &cos, &sin, false);
            kernels::rope_apply(&mut k, cfg.n_kv_heads, d, &cos, &sin, false);
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&v);
            let keys = &cache.keys[li];
            let values = &cache.values[li];

            let mut heads = vec![S::zero(); n * h];
            let mut scores = Vec::new();
            for (r, &pos) in positions.iter().enumerate() {
                let lo = (0..=pos)
                    .find(|&j| attends(pos, j, cfg.sliding_window))
                    .unwrap_or(pos);
                for head in 0..cfg.n_heads {
                    let kvh = head / cfg.group_size();
                    let qh = &q[r * h + head * d..r * h + (head + 1) * d];
                    scores.clear();
                    for j in lo..=pos {
                        let kj = &keys[j * kvd + kvh * d..j * kvd + (kvh + 1) * d];
                        let mut acc = S::zero();
                        for (&a, &b) in qh.iter().zip(kj) {
                            acc = acc + a * b;
                        }
                        scores.push(acc * scale);
                    }
                    kernels::softmax_in_place(&mut scores);
                    let out = &mut heads[r * h + head * d..r * h + (head + 1) * d];
                    for (p, j) in scores.iter().zip(lo..=pos) {
                        if *p == S::zero() {
                            continue;
                        }
                        let vj = &values[j * kvd + kvh * d..j * kvd + (kvh + 1) * d];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o = *o + *p * vv;
                        }
                    }
                }
            }
            let attn = linear(&heads, n, &layer.wo, quant);
            for (a, b) in x.iter_mut().zip(&attn) {
                *a = *a + *b;
            }

            let xn = rms_norm(&x, &layer.mlp_norm, eps);
            let gate = linear(&xn, n, &layer.w_gate, quant);
            let up = linear(&xn, n, &layer.w_up, quant);
            let act: Vec<S> = gate
                .iter()
                .zip(&up)
                .map(|(&gv, &u)| kernels::silu(gv) * u)
                .collect();
            let down = linear(&act, n, &layer.w_down, quant);
            for (a, b) in x.iter_mut().zip(&down) {
                *a = *a + *b;
            }
        }
        cache.len += n;

        let xn = rms_norm(&x, &self.params.final_norm, eps);
        let logits = linear(&xn, n, &self.params.lm_head, false);
        Tensor::new([n, cfg.vocab_size], logits)
    }
}
