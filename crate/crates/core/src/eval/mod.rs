//! Evaluation: perplexity, log-likelihood multiple choice (acc / acc_norm),
//! few-shot prompt assembly, exact match, and cached greedy/sampled
//! generation with a repetition penalty.

mod generate;
mod tasks;

pub use generate::{apply_repetition_penalty, generate, GenerateConfig};
pub use tasks::{
    evaluate_tasks, exact_match, few_shot_render, mc_score, normalize_answer, pick_choices,
    read_tasks, Aggregate, EmTask, EvalSettings, Exemplar, McPicks, McTask, Task, TaskResult,
    DEFAULT_DELIMITER,
};

use crate::data::split_window;
use crate::error::{Error, Result};
use crate::model::infer::KvCache;
use crate::model::{ForwardOptions, Model};
use crate::tensor::{kernels, Scalar, Tensor};

/// Summed negative log-likelihood and the number of scored positions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NllStats {
    pub sum: f64,
    pub count: usize,
}

impl NllStats {
    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean().exp()
    }

    pub fn combine(self, other: NllStats) -> NllStats {
        NllStats {
            sum: self.sum + other.sum,
            count: self.count + other.count,
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Full-sequence logits through the cache path (no graph).
    pub fn logits(&self, tokens: &[usize], opts: &ForwardOptions) -> Result<Tensor<S>> {
        let mut cache = KvCache::new(&self.config);
        self.forward_cached(&mut cache, tokens, opts)
    }
}

fn log_prob_of<S: Scalar>(row: &[S], token: usize) -> f64 {
    (row[token] - kernels::logsumexp(row)).as_f64()
}

/// Next-token NLL over packed windows.
pub fn mean_nll<S: Scalar>(
    model: &Model<S>,
    windows: &[Vec<usize>],
    opts: &ForwardOptions,
) -> Result<NllStats> {
    let mut stats = NllStats::default();
    for w in windows {
        if w.len() < 2 {
            return Err(Error::Input("windows need at least two tokens".into()));
        }
        let (input, target) = split_window(w);
        let logits = model.logits(input, opts)?;
        for (pos, &t) in target.iter().enumerate() {
            stats.sum -= log_prob_of(logits.row(pos), t);
        }
        stats.count += target.len();
    }
    Ok(stats)
}

/// `exp(mean NLL)` over the corpus packed into `seq_len` windows like
/// training data.
pub fn perplexity<S: Scalar>(
    model: &Model<S>,
    docs: &[Vec<usize>],
    seq_len: usize,
    eos: usize,
    opts: &ForwardOptions,
) -> Result<f64> {
    if seq_len > model.config.max_context + 1 {
        return Err(Error::Input(format!(
            "seq_len {seq_len} exceeds the context of {}",
            model.config.max_context
        )));
    }
    let windows = crate::data::pack_sequences(docs, seq_len, eos);
    if windows.is_empty() {
        return Err(Error::Input(
            "corpus is empty or shorter than one window".into(),
        ));
    }
    Ok(mean_nll(model, &windows, opts)?.perplexity())
}

/// Sum of `log p(response_t | prompt, response_<t)`.
pub fn sequence_logprob<S: Scalar>(
    model: &Model<S>,
    prompt: &[usize],
    response: &[usize],
    opts: &ForwardOptions,
) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::Input(
            "sequence_logprob needs a non-empty prompt".into(),
        ));
    }
    let total = prompt.len() + response.len();
    if total > model.config.max_context {
        return Err(Error::Input(format!(
            "prompt plus response ({total} tokens) exceeds the context of {}",
            model.config.max_context
        )));
    }
    if response.is_empty() {
        return Ok(0.0);
    }
    let seq: Vec<usize> = prompt
        .iter()
        .chain(&response[..response.len() - 1])
        .copied()
        .collect();
    let logits = model.logits(&seq, opts)?;
    Ok(response
        .iter()
        .enumerate()
        .map(|(i, &t)| log_prob_of(logits.row(prompt.len() - 1 + i), t))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    /// All weights zero: every position produces all-zero logits.
    fn uniform_model(vocab: usize) -> Model<f64> {
        let cfg = ModelConfig::tiny(vocab);
        let params = ModelParams::zeros(&cfg).unwrap();
        Model::new(cfg, params).unwrap()
    }

    #[test]
    fn uniform_model_perplexity_is_vocab() {
        let m = uniform_model(256);
        let docs: Vec<Vec<usize>> = (0..5)
            .map(|i| (0..30).map(|j| (i * 31 + j) % 256).collect())
            .collect();
        let ppl = perplexity(&m, &docs, 16, 255, &ForwardOptions::default()).unwrap();
        assert!((ppl - 256.0).abs() < 1e-9);
        assert!(perplexity(&m, &[], 16, 255, &ForwardOptions::default()).is_err());
    }

    #[test]
    fn uniform_model_sequence_logprob() {
        let m = uniform_model(64);
        let lp = sequence_logprob(&m, &[1, 2], &[3, 4, 5], &ForwardOptions::default()).unwrap();
        assert!((lp + 3.0 * 64f64.ln()).abs() < 1e-12);
        assert_eq!(
            sequence_logprob(&m, &[1], &[], &ForwardOptions::default()).unwrap(),
            0.0
        );
        assert!(sequence_logprob(&m, &[], &[1], &ForwardOptions::default()).is_err());
        assert!(sequence_logprob(&m, &vec![1; 60], &[1; 5], &ForwardOptions::default()).is_err());
    }

    #[test]
    fn shard_nll_is_additive() {
        let m = Model::<f64>::init(ModelConfig::tiny(32), 9).unwrap();
        let windows: Vec<Vec<usize>> = (0..6)
            .map(|i| (0..9).map(|j| (i * 7 + j * 3) % 32).collect())
            .collect();
        let opts = ForwardOptions::default();
        let all = mean_nll(&m, &windows, &opts).unwrap();
        let a = mean_nll(&m, &windows[..3], &opts).unwrap();
        let b = mean_nll(&m, &windows[3..], &opts).unwrap();
        assert!((all.mean() - (a.mean() + b.mean()) / 2.0).abs() < 1e-10);
        assert!((a.combine(b).mean() - all.mean()).abs() < 1e-12);
    }
}
