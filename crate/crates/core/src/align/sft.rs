use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chat::{render_chat, Conversation};
use crate::error::{Error, Result};
use crate::model::{forward_graph, ForwardOptions, Model};
use crate::pretrain::{
    adamw_step, clip_grad_norm, cosine_lr, LrSchedule, OptimHyper, OptimizerState,
};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::tokenizer::Vocab;

/// A rendered conversation: token ids and the loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SftExample {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl SftExample {
    /// Renders and truncates to `max_context + 1` tokens (the model sees at
    /// most `max_context` inputs).
    pub fn render(conv: &Conversation, vocab: &Vocab, max_context: usize) -> Result<Self> {
        let (mut ids, mut mask) = render_chat(conv, vocab)?;
        ids.truncate(max_context + 1);
        mask.truncate(max_context + 1);
        Ok(Self { ids, mask })
    }

    /// Next-token targets; `None` where the predicted token is masked out.
    fn targets(&self) -> Vec<Option<usize>> {
        (1..self.ids.len())
            .map(|i| self.mask[i].then_some(self.ids[i]))
            .collect()
    }

    pub fn scored(&self) -> usize {
        self.mask.iter().skip(1).filter(|&&m| m).count()
    }
}

/// Token-mean cross-entropy over mask-on targets of the whole batch and
/// its gradients, or `None` when nothing in the batch is scored.
pub fn sft_loss_and_grads<S: Scalar>(
    model: &Model<S>,
    batch: &[SftExample],
    opts: &ForwardOptions,
) -> Result<Option<(f64, Vec<Tensor<S>>)>> {
    let count: usize = batch.iter().map(SftExample::scored).sum();
    if count == 0 {
        return Ok(None);
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let mut total = None;
    for ex in batch {
        if ex.ids.len() != ex.mask.len() {
            return Err(Error::shape("sft mask", &[ex.ids.len()], &[ex.mask.len()]));
        }
        if ex.scored() == 0 {
            continue;
        }
        let logits = forward_graph(
            &mut g,
            &model.config,
            &bound,
            &ex.ids[..ex.ids.len() - 1],
            opts,
            None,
        )?;
        let lp = g.pick_log_softmax(logits, &ex.targets())?;
        let s = g.sum(lp);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let loss = g.scale(total.expect("count > 0"), -S::one() / S::cast(count as f64));
    g.backward(loss)?;
    Ok(Some((g.value(loss).item().as_f64(), bound.grads(&g))))
}

pub fn sft_loss<S: Scalar>(
    model: &Model<S>,
    batch: &[SftExample],
    opts: &ForwardOptions,
) -> Result<Option<f64>> {
    Ok(sft_loss_and_grads(model, batch, opts)?.map(|(l, _)| l))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftPlan {
    pub lr: f64,
    /// Cosine floor as a fraction of `lr`.
    pub min_lr_ratio: f64,
    /// Warmup length as a fraction of all optimizer steps.
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optim: OptimHyper,
}

impl Default for SftPlan {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            min_lr_ratio: 0.1,
            warmup_fraction: 0.03,
            batch_size: 8,
            epochs: 1,
            optim: OptimHyper::default(),
        }
    }
}

impl SftPlan {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = self.optim.validate();
        if !(self.lr > 0.0) {
            errs.push(format!("sft lr must be positive, got {}", self.lr));
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0) {
            errs.push(format!(
                "min_lr_ratio must lie in (0, 1], got {}",
                self.min_lr_ratio
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            errs.push(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            errs.push("sft batch_size and epochs must be positive".into());
        }
        errs
    }

    /// Learning rate for 1-based `step` out of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let warmup = ((self.warmup_fraction * total as f64).ceil() as u64).max(1);
        if total <= warmup {
            return self.lr;
        }
        let sched = LrSchedule {
            warmup_tokens: warmup,
            peak_lr: self.lr,
            min_lr: self.lr * self.min_lr_ratio,
            total_tokens: total,
        };
        cosine_lr(step, &sched)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub step: u64,
    pub lr: f64,
    /// `None` for a skipped batch with no scored tokens.
    pub loss: Option<f64>,
}

/// Shuffled mini-batches over `epochs` passes; every batch is one AdamW
/// step on all model weights.
pub fn sft_train<S: Scalar>(
    model: &mut Model<S>,
    examples: &[SftExample],
    plan: &SftPlan,
    seed: u64,
    opts: &ForwardOptions,
    mut on_step: impl FnMut(&SftRecord) -> Result<()>,
) -> Result<Vec<SftRecord>> {
    let errs = plan.violations();
    if !errs.is_empty() {
        return Err(Error::RunConfig(errs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_epoch = examples.len().div_ceil(plan.batch_size) as u64;
    let total = per_epoch * plan.epochs as u64;
    let mut state = OptimizerState::new(model.params.tensors());
    let decay = model.params.decay_mask();
    let mut logs = Vec::new();
    let mut step = 0u64;
    for _ in 0..plan.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(plan.batch_size) {
            step += 1;
            let lr = plan.lr_at(step, total);
            let batch: Vec<SftExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let loss = match sft_loss_and_grads(model, &batch, opts)? {
                None => {
                    log::warn!("sft step {step}: batch has no assistant tokens, skipped");
                    None
                }
                Some((loss, mut grads)) => {
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            loss,
                            step,
                            tokens_seen: state.tokens_seen,
                        });
                    }
                    clip_grad_norm(&mut grads, plan.optim.clip_norm)?;
                    adamw_step(
                        &mut model.params.tensors_mut(),
                        &grads,
                        &decay,
                        &mut state,
                        &plan.optim,
                        lr,
                    )?;
                    state.tokens_seen += batch.iter().map(|e| e.ids.len() as u64).sum::<u64>();
                    Some(loss)
                }
            };
            let rec = SftRecord { step, lr, loss };
            on_step(&rec)?;
            logs.push(rec);
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model<f64> {
        Model::init(ModelConfig::tiny(20), 3).unwrap()
    }

    #[test]
    fn five_token_example_matches_hand_nll() {
        let m = model();
        let ex = SftExample {
            ids: vec![1, 4, 7, 2, 9],
            mask: vec![false, false, false, true, true],
        };
        let loss = sft_loss(&m, std::slice::from_ref(&ex), &ForwardOptions::default())
            .unwrap()
            .unwrap();
        let logits = m.forward(&ex.ids[..4], &ForwardOptions::default()).unwrap();
        let nll = |row: &[f64], t: usize| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - row[t]
        };
        let hand = (nll(logits.row(2), 2) + nll(logits.row(3), 9)) / 2.0;
        assert!((loss - hand).abs() < 1e-12, "{loss} vs {hand}");
    }

    #[test]
    fn all_ones_mask_is_plain_cross_entropy() {
        let m = model();
        let ids = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let ex = SftExample {
            mask: vec![true; ids.len()],
            ids: ids.clone(),
        };
        let loss = sft_loss(&m, &[ex], &ForwardOptions::default())
            .unwrap()
            .unwrap();
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, false);
        let logits = forward_graph(
            &mut g,
            &m.config,
            &b,
            &ids[..7],
            &ForwardOptions::default(),
            None,
        )
        .unwrap();
        let ce = g.cross_entropy(logits, &ids[1..], usize::MAX).unwrap();
        assert!((loss - g.value(ce).item()).abs() < 1e-14);
    }

    #[test]
    fn unscored_batch_is_skipped() {
        let m = model();
        let ex = SftExample {
            ids: vec![1, 2, 3],
            mask: vec![true, false, false],
        };
        assert!(sft_loss(&m, &[ex], &ForwardOptions::default())
            .unwrap()
            .is_none());
    }

    #[test]
    fn lr_warms_up_then_decays() {
        let p = SftPlan::default();
        assert!((p.lr_at(3, 100) - 1e-5).abs() < 1e-20);
        assert!(p.lr_at(1, 100) < p.lr_at(2, 100));
        assert!((p.lr_at(100, 100) - 1e-6).abs() < 1e-20);
        assert_eq!(p.lr_at(1, 1), 1e-5);
    }
}
