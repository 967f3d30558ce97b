use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// The seven linear maps of a decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 7] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Gate,
        LinearKind::Up,
        LinearKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinearKind::Q => "attn.wq",
            LinearKind::K => "attn.wk",
            LinearKind::V => "attn.wv",
            LinearKind::O => "attn.wo",
            LinearKind::Gate => "mlp.w_gate",
            LinearKind::Up => "mlp.w_up",
            LinearKind::Down => "mlp.w_down",
        }
    }

    /// `(in, out)` extents. Weights are stored `[in × out]` and applied as `x·W`.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let h = cfg.hidden_size;
        match self {
            LinearKind::Q | LinearKind::O => (h, h),
            LinearKind::K | LinearKind::V => (h, cfg.kv_dim()),
            LinearKind::Gate | LinearKind::Up => (h, cfg.intermediate_size),
            LinearKind::Down => (cfg.intermediate_size, h),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub attn_norm: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub mlp_norm: Tensor<S>,
    pub w_gate: Tensor<S>,
    pub w_up: Tensor<S>,
    pub w_down: Tensor<S>,
}

impl<S: Scalar> LayerParams<S> {
    pub fn linear(&self, kind: LinearKind) -> &Tensor<S> {
        match kind {
            LinearKind::Q => &self.wq,
            LinearKind::K => &self.wk,
            LinearKind::V => &self.wv,
            LinearKind::O => &self.wo,
            LinearKind::Gate => &self.w_gate,
            LinearKind::Up => &self.w_up,
            LinearKind::Down => &self.w_down,
        }
    }

    pub fn linear_mut(&mut self, kind: LinearKind) -> &mut Tensor<S> {
        match kind {
            LinearKind::Q => &mut self.wq,
            LinearKind::K => &mut self.wk,
            LinearKind::V => &mut self.wv,
            LinearKind::O => &mut self.wo,
            LinearKind::Gate => &mut self.w_gate,
            LinearKind::Up => &mut self.w_up,
            LinearKind::Down => &mut self.w_down,
        }
    }

    fn tensors(&self) -> [&Tensor<S>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<S>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

const LAYER_NAMES: [&str; 9] = [
    "attn_norm",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "mlp_norm",
    "mlp.w_gate",
    "mlp.w_up",
    "mlp.w_down",
];

/// All trainable weights. Iteration order (`tensors`, `names`) is canonical:
/// embedding, layers in order, final norm, head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    pub embed: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: Tensor<S>,
    pub lm_head: Tensor<S>,
}

/// Expected `(name, shape)` of every parameter for a config.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_size;
    let mat = |k: LinearKind| {
        let (i, o) = k.dims(cfg);
        vec![i, o]
    };
    let layer: [Vec<usize>; 9] = [
        vec![h],
        mat(LinearKind::Q),
        mat(LinearKind::K),
        mat(LinearKind::V),
        mat(LinearKind::O),
        vec![h],
        mat(LinearKind::Gate),
        mat(LinearKind::Up),
        mat(LinearKind::Down),
    ];
    let mut out = vec![("embed_tokens".to_string(), vec![cfg.vocab_size, h])];
    for l in 0..cfg.n_layers {
        for (name, shape) in LAYER_NAMES.iter().zip(&layer) {
            out.push((format!("layers.{l}.{name}"), shape.clone()));
        }
    }
    out.push(("final_norm".into(), vec![h]));
    out.push(("lm_head".into(), vec![h, cfg.vocab_size]));
    out
}

/// Norm weights are the only parameters exempt from weight decay.
pub fn is_norm(name: &str) -> bool {
    name.ends_with("norm")
}

impl<S: Scalar> ModelParams<S> {
    /// Truncated-normal(0, init_std) at ±3σ for matrices, ones for norms.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let bound = 3.0 * cfg.init_std;
        let tensors = param_shapes(cfg)
            .into_iter()
            .map(|(name, shape)| {
                if is_norm(&name) {
                    return Tensor::ones(shape);
                }
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| loop {
                        let x: f64 = normal.sample(&mut rng);
                        if x.abs() <= bound {
                            break S::cast(x);
                        }
                    })
                    .collect();
                Tensor::new(shape, data).expect("shape from param_shapes")
            })
            .collect();
        Self::from_tensors(cfg, tensors)
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let tensors = param_shapes(cfg)
            .into_iter()
            .map(|(_, s)| Tensor::zeros(s))
            .collect();
        Self::from_tensors(cfg, tensors)
    }

    /// Builds params from tensors in canonical order, checking every shape.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let shapes = param_shapes(cfg);
        if tensors.len() != shapes.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let embed = it.next().unwrap();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: it.next().unwrap(),
                wq: it.next().unwrap(),
                wk: it.next().unwrap(),
                wv: it.next().unwrap(),
                wo: it.next().unwrap(),
                mlp_norm: it.next().unwrap(),
                w_gate: it.next().unwrap(),
                w_up: it.next().unwrap(),
                w_down: it.next().unwrap(),
            })
            .collect();
        Ok(Self {
            embed,
            layers,
            final_norm: it.next().unwrap(),
            lm_head: it.next().unwrap(),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn into_tensors(self) -> Vec<Tensor<S>> {
        let mut out = vec![self.embed];
        for l in self.layers {
            out.extend([
                l.attn_norm,
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.mlp_norm,
                l.w_gate,
                l.w_up,
                l.w_down,
            ]);
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["embed_tokens".to_string()];
        for l in 0..self.layers.len() {
            out.extend(LAYER_NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        out.push("final_norm".into());
        out.push("lm_head".into());
        out
    }

    /// Weight-decay flags in canonical order.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.names().iter().map(|n| !is_norm(n)).collect()
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// Registers every parameter as a graph leaf, borrowing the data.
    /// With `trainable == false` they are constants.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, S>, trainable: bool) -> BoundParams {
        let mut leaf = |t: &'a Tensor<S>| if trainable { g.param(t) } else { g.constant(t) };
        let embed = leaf(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                attn_norm: leaf(&l.attn_norm),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                mlp_norm: leaf(&l.mlp_norm),
                w_gate: leaf(&l.w_gate),
                w_up: leaf(&l.w_up),
                w_down: leaf(&l.w_down),
            })
            .collect();
        let final_norm = leaf(&self.final_norm);
        let lm_head = leaf(&self.lm_head);
        BoundParams {
            embed,
            layers,
            final_norm,
            lm_head,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

impl BoundLayer {
    pub fn linear(&self, kind: LinearKind) -> Var {
        match kind {
            LinearKind::Q => self.wq,
            LinearKind::K => self.wk,
            LinearKind::V => self.wv,
            LinearKind::O => self.wo,
            LinearKind::Gate => self.w_gate,
            LinearKind::Up => self.w_up,
            LinearKind::Down => self.w_down,
        }
    }

    fn vars(&self) -> [Var; 9] {
        [
            self.attn_norm,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.mlp_norm,
            self.w_gate,
            self.w_up,
            self.w_down,
        ]
    }
}

/// Graph handles for a [`ModelParams`], same canonical order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub embed: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub lm_head: Var,
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend(l.vars());
        }
        out.push(self.final_norm);
        out.push(self.lm_head);
        out
    }

    /// Gradients in canonical order; parameters the loss never reached get zeros.
    pub fn grads<S: Scalar>(&self, g: &Graph<'_, S>) -> Vec<Tensor<S>> {
        self.vars()
            .into_iter()
            .map(|v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect()
    }
}
