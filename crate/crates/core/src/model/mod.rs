//! The decoder: RMSNorm pre-norm blocks with rotary grouped-query attention
//! (optionally sliding-window) and a SiLU-gated MLP, untied head, no biases.

mod config;
pub mod infer;
mod params;

pub use config::{count_params, ModelConfig};
pub use params::{
    is_norm, param_shapes, BoundLayer, BoundParams, LayerParams, LinearKind, ModelParams,
};

use crate::align::lora::BoundLora;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Quantize-dequantize attention/MLP linear inputs and weights through FP8 E4M3.
    pub fp8: bool,
}

/// Whether query position `i` may attend to key position `j`.
pub fn attends(i: usize, j: usize, window: Option<usize>) -> bool {
    match window {
        Some(w) => j <= i && j + w > i,
        None => j <= i,
    }
}

/// `[T×T]` additive mask: zero where attention is allowed, the dtype's
/// large negative constant elsewhere.
pub fn attention_mask<S: Scalar>(seq_len: usize, window: Option<usize>) -> Tensor<S> {
    let mut data = vec![S::zero(); seq_len * seq_len];
    for i in 0..seq_len {
        for j in 0..seq_len {
            if !attends(i, j, window) {
                data[i * seq_len + j] = S::MASK_NEG;
            }
        }
    }
    Tensor::new([seq_len, seq_len], data).expect("square mask")
}

/// Rotary embedding of `x[T × heads × head_dim]`.
pub fn rope_rotate<S: Scalar>(x: &Tensor<S>, positions: &[usize], theta: f64) -> Result<Tensor<S>> {
    let [t, heads, head_dim] = x.shape()[..] else {
        return Err(Error::shape("rope", x.shape(), &[positions.len(), 0, 0]));
    };
    if head_dim % 2 != 0 {
        return Err(Error::Config(vec![format!(
            "head dimension {head_dim} must be even for rotary embeddings"
        )]));
    }
    if t != positions.len() {
        return Err(Error::shape("rope", x.shape(), &[positions.len()]));
    }
    let (cos, sin) = kernels::rope_tables::<S>(positions, head_dim, theta);
    let mut data = x.data().to_vec();
    kernels::rope_apply(&mut data, heads, head_dim, &cos, &sin, false);
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_context {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds the context of {}",
            tokens.len(),
            cfg.max_context
        )));
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenRange {
            id,
            size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// `x·W` (with FP8 emulation and an optional LoRA branch).
pub fn linear<S: Scalar>(
    g: &mut Graph<'_, S>,
    x: Var,
    w: Var,
    site: Option<(usize, LinearKind)>,
    opts: &ForwardOptions,
    lora: Option<&BoundLora<S>>,
) -> Result<Var> {
    let (xq, wq) = if opts.fp8 {
        (g.fp8(x), g.fp8(w))
    } else {
        (x, w)
    };
    let y = g.matmul(xq, wq)?;
    let adapter = site.and_then(|(l, k)| lora.and_then(|set| set.get(l, k)));
    let Some((a, b)) = adapter else { return Ok(y) };
    let at = g.transpose(a)?;
    let bt = g.transpose(b)?;
    let xa = g.matmul(x, at)?;
    let xab = g.matmul(xa, bt)?;
    let scaled = g.scale(xab, lora.unwrap().scale);
    g.add(y, scaled)
}

/// Scaled dot-product attention over already-projected, already-rotated
/// `q[T × n_heads·d]`, `k, v[T × n_kv_heads·d]`. Query head `h` reads KV head
/// `h / group_size`. Returns concatenated heads `[T × n_heads·d]`.
pub fn gqa_attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    q: Var,
    k: Var,
    v: Var,
    mask: &Tensor<S>,
) -> Result<Var> {
    let d = cfg.head_dim();
    let (t, qw) = g.value(q).dims2()?;
    let (tk, kw) = g.value(k).dims2()?;
    let (tv, vw) = g.value(v).dims2()?;
    if qw != cfg.n_heads * d || kw != cfg.n_kv_heads * d || vw != kw || tk != t || tv != t {
        return Err(Error::shape("gqa_attention", &[t, qw], &[tk, kw, tv, vw]));
    }
    if mask.shape() != [t, t] {
        return Err(Error::shape("gqa_attention mask", mask.shape(), &[t, t]));
    }
    let scale = S::one() / S::cast(d as f64).sqrt();
    let mut kv = Vec::with_capacity(cfg.n_kv_heads);
    for h in 0..cfg.n_kv_heads {
        let kh = g.narrow_cols(k, h * d, d)?;
        let kt = g.transpose(kh)?;
        let vh = g.narrow_cols(v, h * d, d)?;
        kv.push((kt, vh));
    }
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (kt, vh) = kv[h / cfg.group_size()];
        let qh = g.narrow_cols(q, h * d, d)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let scores = g.add_const(scores, mask)?;
        let probs = g.softmax(scores, 1)?;
        heads.push(g.matmul(probs, vh)?);
    }
    g.concat_cols(&heads)
}

#[allow(clippy::too_many_arguments)]
fn attention_block<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    layer: &BoundLayer,
    idx: usize,
    x: Var,
    mask: &Tensor<S>,
    positions: &[usize],
    opts: &ForwardOptions,
    lora: Option<&BoundLora<S>>,
) -> Result<Var> {
    let t = positions.len();
    let d = cfg.head_dim();
    let q = linear(g, x, layer.wq, Some((idx, LinearKind::Q)), opts, lora)?;
    let k = linear(g, x, layer.wk, Some((idx, LinearKind::K)), opts, lora)?;
    let v = linear(g, x, layer.wv, Some((idx, LinearKind::V)), opts, lora)?;
    let q = g.reshape(q, &[t, cfg.n_heads, d])?;
    let q = g.rope(q, positions, cfg.rope_theta)?;
    let q = g.reshape(q, &[t, cfg.n_heads * d])?;
    let k = g.reshape(k, &[t, cfg.n_kv_heads, d])?;
    let k = g.rope(k, positions, cfg.rope_theta)?;
    let k = g.reshape(k, &[t, cfg.n_kv_heads * d])?;
    let heads = gqa_attention(g, cfg, q, k, v, mask)?;
    linear(g, heads, layer.wo, Some((idx, LinearKind::O)), opts, lora)
}

/// `h = x + Attn(RMSNorm(x))`, `y = h + W_down(silu(W_gate·n) ⊙ W_up·n)` with
/// `n = RMSNorm(h)`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    layer: &BoundLayer,
    idx: usize,
    x: Var,
    mask: &Tensor<S>,
    positions: &[usize],
    opts: &ForwardOptions,
    lora: Option<&BoundLora<S>>,
) -> Result<Var> {
    let eps = S::cast(cfg.norm_eps);
    let n1 = g.rms_norm(x, layer.attn_norm, eps)?;
    let attn = attention_block(g, cfg, layer, idx, n1, mask, positions, opts, lora)?;
    let h = g.add(x, attn)?;
    let n2 = g.rms_norm(h, layer.mlp_norm, eps)?;
    let gate = linear(
        g,
        n2,
        layer.w_gate,
        Some((idx, LinearKind::Gate)),
        opts,
        lora,
    )?;
    let gate = g.silu(gate);
    let up = linear(g, n2, layer.w_up, Some((idx, LinearKind::Up)), opts, lora)?;
    let act = g.mul(gate, up)?;
    let down = linear(
        g,
        act,
        layer.w_down,
        Some((idx, LinearKind::Down)),
        opts,
        lora,
    )?;
    g.add(h, down)
}

/// Embed → blocks → final RMSNorm → head. Returns logits `[T × vocab]`.
/// The lm_head is never FP8-quantized.
pub fn forward_graph<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    params: &BoundParams,
    tokens: &[usize],
    opts: &ForwardOptions,
    lora: Option<&BoundLora<S>>,
) -> Result<Var> {
    check_tokens(cfg, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mask = attention_mask::<S>(tokens.len(), cfg.sliding_window);
    let mut x = g.embedding(params.embed, tokens)?;
    for (idx, layer) in params.layers.iter().enumerate() {
        x = decoder_block(g, cfg, layer, idx, x, &mask, &positions, opts, lora)?;
    }
    let xn = g.rms_norm(x, params.final_norm, S::cast(cfg.norm_eps))?;
    linear(
        g,
        xn,
        params.lm_head,
        None,
        &ForwardOptions::default(),
        None,
    )
}

/// Config plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ModelParams<S>,
}

impl<S: Scalar> Model<S> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn new(config: ModelConfig, params: ModelParams<S>) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::from_tensors(&config, params.into_tensors())?;
        Ok(Self { config, params })
    }

    /// Logits for a whole sequence, without recording gradients.
    pub fn forward(&self, tokens: &[usize], opts: &ForwardOptions) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let out = forward_graph(&mut g, &self.config, &bound, tokens, opts, None)?;
        Ok(g.value(out).clone())
    }
}
