use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectural hyperparameters of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sliding_window: Option<usize>,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub use_bias: bool,
    /// Standard deviation of the truncated-normal weight init.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// The 1.8B first-generation shape: 16k context, 4096-token sliding window.
    pub fn danube_1_8b() -> Self {
        Self {
            hidden_size: 2560,
            intermediate_size: 6912,
            n_layers: 24,
            n_heads: 32,
            n_kv_heads: 8,
            vocab_size: 32_000,
            max_context: 16_384,
            sliding_window: Some(4096),
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            tie_embeddings: false,
            use_bias: false,
            init_std: default_init_std(),
        }
    }

    /// Second generation: same shape, no sliding window, 8192 context.
    pub fn danube2_1_8b() -> Self {
        Self {
            max_context: 8192,
            sliding_window: None,
            ..Self::danube_1_8b()
        }
    }

    /// Small shape for tests and demos.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            hidden_size: 32,
            intermediate_size: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            vocab_size,
            max_context: 64,
            sliding_window: None,
            rope_theta: default_rope_theta(),
            norm_eps: default_norm_eps(),
            tie_embeddings: false,
            use_bias: false,
            init_std: default_init_std(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.hidden_size * self.n_kv_heads / self.n_heads
    }

    /// Query heads sharing each key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Every violated invariant, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.n_kv_heads > 0 && !self.n_heads.is_multiple_of(self.n_kv_heads) {
            errs.push(format!(
                "n_heads ({}) must be a multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.n_heads > 0 && !self.hidden_size.is_multiple_of(self.n_heads) {
            errs.push(format!(
                "hidden_size ({}) must be a multiple of n_heads ({})",
                self.hidden_size, self.n_heads
            ));
        } else if self.n_heads > 0 && !self.head_dim().is_multiple_of(2) {
            errs.push(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            ));
        }
        match self.sliding_window {
            Some(0) => errs.push("sliding_window must be positive when present".into()),
            Some(w) if w > self.max_context => errs.push(format!(
                "sliding_window ({w}) must not exceed max_context ({})",
                self.max_context
            )),
            _ => {}
        }
        if !(self.rope_theta > 0.0) {
            errs.push(format!(
                "rope_theta must be positive, got {}",
                self.rope_theta
            ));
        }
        if !(self.norm_eps > 0.0) {
            errs.push(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if !(self.init_std > 0.0) {
            errs.push(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.tie_embeddings {
            errs.push("tied embeddings are not supported; the head is a separate matrix".into());
        }
        if self.use_bias {
            errs.push("linear biases are not supported".into());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Closed-form parameter count: embeddings, head (unless tied), per-layer
/// attention, gated MLP and two norms, and the final norm.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let h = cfg.hidden_size as u64;
    let v = cfg.vocab_size as u64;
    let kv = h * cfg.n_kv_heads as u64 / cfg.n_heads as u64;
    let per_layer = h * h + 2 * h * kv + h * h + 3 * h * cfg.intermediate_size as u64 + 2 * h;
    let head = if cfg.tie_embeddings { 0 } else { v * h };
    v * h + head + cfg.n_layers as u64 * per_layer + h
}
