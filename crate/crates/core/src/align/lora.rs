//! Low-rank adapters on the attention and MLP projections.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinearKind, ModelConfig, ModelParams};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Std of the normal init of `A`; `B` starts at zero.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 16.0,
            init_std: 0.02,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `A[r×in]`, `B[out×r]`; the layer becomes `y = x·W + (α/r)·(x·Aᵀ)·Bᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<S> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LoraAdapter<S> {
    fn check(&self, w: &Tensor<S>) -> Result<(usize, usize, usize)> {
        let (din, dout) = w.dims2()?;
        let (r, ain) = self.a.dims2()?;
        let (bout, br) = self.b.dims2()?;
        if ain != din || bout != dout || br != r {
            return Err(Error::shape("lora", w.shape(), &[r, ain, bout, br]));
        }
        Ok((din, dout, r))
    }
}

/// `x[T×in] · W + scale·(x·Aᵀ)·Bᵀ` without merging.
pub fn lora_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    adapter: &LoraAdapter<S>,
    scale: f64,
) -> Result<Tensor<S>> {
    adapter.check(w)?;
    let base = x.matmul(w)?;
    let low = x
        .matmul(&adapter.a.transpose()?)?
        .matmul(&adapter.b.transpose()?)?;
    let s = S::cast(scale);
    let data = base
        .data()
        .iter()
        .zip(low.data())
        .map(|(&y, &l)| y + s * l)
        .collect();
    Tensor::new(base.shape().to_vec(), data)
}

/// `W' = W + scale·Aᵀ·Bᵀ`, i.e. the stored-transposed form of `W + scale·B·A`.
pub fn lora_merge<S: Scalar>(
    w: &Tensor<S>,
    adapter: &LoraAdapter<S>,
    scale: f64,
) -> Result<Tensor<S>> {
    adapter.check(w)?;
    let delta = adapter.a.transpose()?.matmul(&adapter.b.transpose()?)?;
    let s = S::cast(scale);
    let data = w
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&p, &d)| p + s * d)
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Adapters for every targeted linear of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet<S> {
    pub config: LoraConfig,
    pub adapters: BTreeMap<(usize, LinearKind), LoraAdapter<S>>,
}

impl<S: Scalar> LoraSet<S> {
    pub fn init(model: &ModelConfig, config: &LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config(vec!["LoRA rank must be at least 1".into()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, config.init_std).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut adapters = BTreeMap::new();
        for layer in 0..model.n_layers {
            for kind in LinearKind::ALL {
                let (din, dout) = kind.dims(model);
                let a = (0..config.rank * din)
                    .map(|_| S::cast(normal.sample(&mut rng)))
                    .collect();
                let adapter = LoraAdapter {
                    a: Tensor::new([config.rank, din], a)?,
                    b: Tensor::zeros([dout, config.rank]),
                };
                adapters.insert((layer, kind), adapter);
            }
        }
        Ok(Self {
            config: config.clone(),
            adapters,
        })
    }

    /// Rebuilds a set from tensors in [`LoraSet::tensors`] order.
    pub fn from_tensors(
        model: &ModelConfig,
        config: &LoraConfig,
        tensors: Vec<Tensor<S>>,
    ) -> Result<Self> {
        let template = Self::init(model, config, 0)?;
        if tensors.len() != 2 * template.adapters.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} LoRA tensors, found {}",
                2 * template.adapters.len(),
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut adapters = BTreeMap::new();
        for (key, t) in template.adapters {
            let (a, b) = (it.next().unwrap(), it.next().unwrap());
            if a.shape() != t.a.shape() || b.shape() != t.b.shape() {
                return Err(Error::shape("lora tensors", a.shape(), t.a.shape()));
            }
            adapters.insert(key, LoraAdapter { a, b });
        }
        Ok(Self {
            config: config.clone(),
            adapters,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.adapters.values().flat_map(|a| [&a.a, &a.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.adapters
            .values_mut()
            .flat_map(|a| [&mut a.a, &mut a.b])
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.adapters
            .keys()
            .flat_map(|(l, k)| {
                let base = format!("layers.{l}.{}", k.name());
                [format!("{base}.lora_a"), format!("{base}.lora_b")]
            })
            .collect()
    }

    /// Base params with every adapter folded into its weight.
    pub fn merge(&self, params: &ModelParams<S>) -> Result<ModelParams<S>> {
        let mut out = params.clone();
        let scale = self.config.scale();
        for (&(layer, kind), adapter) in &self.adapters {
            let l = out
                .layers
                .get_mut(layer)
                .ok_or_else(|| Error::Input(format!("adapter for missing layer {layer}")))?;
            let merged = lora_merge(l.linear(kind), adapter, scale)?;
            *l.linear_mut(kind) = merged;
        }
        Ok(out)
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, S>, trainable: bool) -> BoundLora<S> {
        let adapters = self
            .adapters
            .iter()
            .map(|(&key, ad)| {
                let (a, b) = if trainable {
                    (g.param(&ad.a), g.param(&ad.b))
                } else {
                    (g.constant(&ad.a), g.constant(&ad.b))
                };
                (key, (a, b))
            })
            .collect();
        BoundLora {
            scale: S::cast(self.config.scale()),
            adapters,
        }
    }
}

/// Graph handles of a [`LoraSet`], iterated in the same key order.
#[derive(Clone, Debug)]
pub struct BoundLora<S> {
    pub scale: S,
    pub adapters: BTreeMap<(usize, LinearKind), (Var, Var)>,
}

impl<S: Scalar> BoundLora<S> {
    pub fn get(&self, layer: usize, kind: LinearKind) -> Option<(Var, Var)> {
        self.adapters.get(&(layer, kind)).copied()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.adapters.values().flat_map(|&(a, b)| [a, b]).collect()
    }

    pub fn grads(&self, g: &Graph<'_, S>) -> Vec<Tensor<S>> {
        self.vars()
            .into_iter()
            .map(|v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect()
    }
}
