use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::infer::KvCache;
use crate::model::{ForwardOptions, Model};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub max_new: usize,
    /// 0 selects strict argmax.
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub seed: u64,
    /// Generation stops after emitting this token.
    pub eos: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            max_new: 64,
            temperature: 0.0,
            repetition_penalty: 1.1,
            seed: 0,
            eos: None,
        }
    }
}

/// CTRL-style penalty: for every previously seen id, `z / p` when `z > 0`,
/// `z * p` otherwise.
pub fn apply_repetition_penalty(logits: &mut [f64], seen: &[bool], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    for (z, &s) in logits.iter_mut().zip(seen) {
        if s {
            *z = if *z > 0.0 { *z / penalty } else { *z * penalty };
        }
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive decoding with KV reuse. Returns only the new tokens.
pub fn generate<S: Scalar>(
    model: &Model<S>,
    prompt: &[usize],
    cfg: &GenerateConfig,
    opts: &ForwardOptions,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Input("generate needs a non-empty prompt".into()));
    }
    if !(cfg.temperature >= 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::Input(format!(
            "temperature must be finite and >= 0, got {}",
            cfg.temperature
        )));
    }
    if !(cfg.repetition_penalty > 0.0 && cfg.repetition_penalty.is_finite()) {
        return Err(Error::Input(format!(
            "repetition_penalty must be finite and > 0, got {}",
            cfg.repetition_penalty
        )));
    }
    let max_ctx = model.config.max_context;
    if prompt.len() > max_ctx {
        return Err(Error::Input(format!(
            "prompt of {} tokens exceeds the context of {max_ctx}",
            prompt.len()
        )));
    }
    let vocab = model.config.vocab_size;
    let mut seen = vec![false; vocab];
    for &t in prompt {
        if t >= vocab {
            return Err(Error::TokenRange { id: t, size: vocab });
        }
        seen[t] = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache = KvCache::new(&model.config);
    let logits = model.forward_cached(&mut cache, prompt, opts)?;
    let mut last: Vec<f64> = logits
        .row(prompt.len() - 1)
        .iter()
        .map(|x| x.as_f64())
        .collect();
    let mut out = Vec::new();
    while out.len() < cfg.max_new {
        apply_repetition_penalty(&mut last, &seen, cfg.repetition_penalty);
        let next = if cfg.temperature == 0.0 {
            argmax(&last)
        } else {
            let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = last
                .iter()
                .map(|z| ((z - max) / cfg.temperature).exp())
                .collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| Error::Input(format!("sampling failed: {e}")))?;
            dist.sample(&mut rng)
        };
        out.push(next);
        seen[next] = true;
        if Some(next) == cfg.eos || cache.len() >= max_ctx {
            break;
        }
        let logits = model.forward_cached(&mut cache, &[next], opts)?;
        last = logits.row(0).iter().map(|x| x.as_f64()).collect();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model<f64> {
        let mut cfg = ModelConfig::tiny(48);
        cfg.init_std = 0.3;
        Model::init(cfg, 4).unwrap()
    }

    #[test]
    fn penalty_convention() {
        let mut z = vec![2.0, -2.0, 3.0];
        apply_repetition_penalty(&mut z, &[true, true, false], 1.1);
        assert!((z[0] - 2.0 / 1.1).abs() < 1e-15);
        assert!((z[0] - 1.8182).abs() < 1e-4);
        assert!((z[1] + 2.2).abs() < 1e-12);
        assert_eq!(z[2], 3.0);
        let mut w = vec![2.0, -2.0];
        apply_repetition_penalty(&mut w, &[true, true], 1.0);
        assert_eq!(w, vec![2.0, -2.0]);
    }

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }

    #[test]
    fn greedy_matches_full_reforward() {
        let m = model();
        let opts = ForwardOptions::default();
        let cfg = GenerateConfig {
            max_new: 20,
            ..GenerateConfig::default()
        };
        let prompt = [1, 5, 9];
        let fast = generate(&m, &prompt, &cfg, &opts).unwrap();

        let mut seq = prompt.to_vec();
        let mut seen = vec![false; 48];
        prompt.iter().for_each(|&t| seen[t] = true);
        for _ in 0..20 {
            let logits = m.forward(&seq, &opts).unwrap();
            let mut last: Vec<f64> = logits.row(seq.len() - 1).to_vec();
            apply_repetition_penalty(&mut last, &seen, 1.1);
            let next = argmax(&last);
            seen[next] = true;
            seq.push(next);
        }
        assert_eq!(fast, seq[3..]);
        assert_eq!(fast, generate(&m, &prompt, &cfg, &opts).unwrap());
    }

    #[test]
    fn sampling_is_seeded_and_stops_at_eos_or_context() {
        let m = model();
        let opts = ForwardOptions::default();
        let cfg = GenerateConfig {
            max_new: 30,
            temperature: 1.0,
            seed: 11,
            ..GenerateConfig::default()
        };
        let a = generate(&m, &[2, 3], &cfg, &opts).unwrap();
        assert_eq!(a, generate(&m, &[2, 3], &cfg, &opts).unwrap());
        assert_eq!(a.len(), 30);
        let stop = GenerateConfig {
            eos: Some(a[4]),
            ..cfg.clone()
        };
        let b = generate(&m, &[2, 3], &stop, &opts).unwrap();
        assert!(b.len() <= 5 && *b.last().unwrap() == a[4]);
        let long = generate(
            &m,
            &[1; 60],
            &GenerateConfig {
                max_new: 100,
                ..cfg
            },
            &opts,
        )
        .unwrap();
        assert_eq!(long.len(), 5);
    }
}
