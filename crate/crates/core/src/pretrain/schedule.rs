use serde::{Deserialize, Serialize};

/// Token-denominated learning-rate schedule: linear warmup to `peak_lr`,
/// cosine decay to `min_lr` at `total_tokens`, flat afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_tokens: u64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub total_tokens: u64,
}

impl LrSchedule {
    /// 1T-token base pre-training schedule.
    pub fn danube() -> Self {
        Self {
            warmup_tokens: 2_360_000_000,
            peak_lr: 2e-4,
            min_lr: 1e-5,
            total_tokens: 1_000_000_000_000,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            errs.push(format!(
                "schedule needs 0 < min_lr <= peak_lr (got {} and {})",
                self.min_lr, self.peak_lr
            ));
        }
        if !(self.warmup_tokens > 0 && self.warmup_tokens < self.total_tokens) {
            errs.push(format!(
                "schedule needs 0 < warmup_tokens < total_tokens (got {} and {})",
                self.warmup_tokens, self.total_tokens
            ));
        }
        errs
    }
}

pub fn cosine_lr(tokens_seen: u64, schedule: &LrSchedule) -> f64 {
    let LrSchedule {
        warmup_tokens,
        peak_lr,
        min_lr,
        total_tokens,
    } = *schedule;
    if tokens_seen <= warmup_tokens {
        return peak_lr * (tokens_seen as f64 / warmup_tokens as f64);
    }
    if tokens_seen >= total_tokens {
        return min_lr;
    }
    let s = (tokens_seen - warmup_tokens) as f64 / (total_tokens - warmup_tokens) as f64;
    min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + (std::f64::consts::PI * s).cos())
}
