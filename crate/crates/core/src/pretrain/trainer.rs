use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{adamw_step, clip_grad_norm, cosine_lr, LrSchedule, OptimHyper, OptimizerState};
use crate::data::{curriculum_schedule, split_window, DataStage, MixSampler, Packer};
use crate::error::{Error, Result};
use crate::eval::mean_nll;
use crate::model::{forward_graph, ForwardOptions, Model};
use crate::tensor::{Graph, Scalar, Tensor};

/// Optimizer, schedule, curriculum and batch geometry, all in tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    #[serde(default)]
    pub optim: OptimHyper,
    pub schedule: LrSchedule,
    pub stages: Vec<DataStage>,
    /// Tokens per optimizer step; each step packs `batch_tokens / seq_len`
    /// windows (at least one).
    pub batch_tokens: u64,
    /// Validation loss is computed every this many steps (0 disables it).
    #[serde(default)]
    pub eval_every: u64,
    /// Upper bound on held-out windows scored per validation pass.
    #[serde(default = "default_val_windows")]
    pub val_windows: usize,
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn default_val_windows() -> usize {
    8
}

impl TrainPlan {
    pub fn sequences_per_batch(&self, seq_len: usize) -> usize {
        ((self.batch_tokens / seq_len as u64) as usize).max(1)
    }

    pub fn total_tokens(&self) -> u64 {
        self.stages.iter().map(|s| s.token_budget).sum()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = self.optim.validate();
        errs.extend(self.schedule.validate());
        if self.stages.is_empty() {
            errs.push("training plan needs at least one data stage".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            errs.extend(
                s.violations()
                    .into_iter()
                    .map(|e| format!("stage {i}: {e}")),
            );
        }
        if self.batch_tokens == 0 {
            errs.push("batch_tokens must be positive".into());
        }
        errs
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub lr: f64,
    pub seq_len: usize,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// Mean next-token loss over every window of `batch` and its gradient for
/// each parameter (canonical order).
pub fn batch_loss_and_grads<S: Scalar>(
    model: &Model<S>,
    batch: &[Vec<usize>],
    opts: &ForwardOptions,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, true);
    let mut total = None;
    let mut count = 0usize;
    for window in batch {
        if window.len() < 2 {
            return Err(Error::Input(
                "training windows need at least two tokens".into(),
            ));
        }
        let (input, target) = split_window(window);
        let logits = forward_graph(&mut g, &model.config, &bound, input, opts, None)?;
        let targets: Vec<Option<usize>> = target.iter().map(|&t| Some(t)).collect();
        let lp = g.pick_log_softmax(logits, &targets)?;
        let s = g.sum(lp);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
        count += target.len();
    }
    let total = total.ok_or(Error::EmptyLoss)?;
    let loss = g.scale(total, -S::one() / S::cast(count as f64));
    g.backward(loss)?;
    Ok((g.value(loss).item().as_f64(), bound.grads(&g)))
}

/// Forward, backward, clip, schedule, AdamW. The learning rate is evaluated
/// at the token count reached after this batch.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    batch: &[Vec<usize>],
    state: &mut OptimizerState<S>,
    plan: &TrainPlan,
    opts: &ForwardOptions,
) -> Result<LogRecord> {
    let batch_tokens: u64 = batch.iter().map(|w| w.len() as u64).sum();
    let (loss, mut grads) = batch_loss_and_grads(model, batch, opts)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss,
            step: state.step + 1,
            tokens_seen: state.tokens_seen,
        });
    }
    clip_grad_norm(&mut grads, plan.optim.clip_norm)?;
    let lr = cosine_lr(state.tokens_seen + batch_tokens, &plan.schedule);
    let decay = model.params.decay_mask();
    adamw_step(
        &mut model.params.tensors_mut(),
        &grads,
        &decay,
        state,
        &plan.optim,
        lr,
    )?;
    state.tokens_seen += batch_tokens;
    Ok(LogRecord {
        step: state.step,
        tokens_seen: state.tokens_seen,
        lr,
        seq_len: batch.first().map_or(0, Vec::len),
        train_loss: loss,
        val_loss: None,
    })
}

/// Data-parallel check: splits `batch` into `k` equal shards, computes the
/// shard gradients on separate threads, averages them and returns the
/// largest absolute deviation from the whole-batch gradient.
pub fn shard_gradients_equivalence<S: Scalar>(
    model: &Model<S>,
    batch: &[Vec<usize>],
    k: usize,
    opts: &ForwardOptions,
) -> Result<f64> {
    if k == 0 || batch.is_empty() || !batch.len().is_multiple_of(k) {
        return Err(Error::Input(format!(
            "cannot split {} sequences into {k} equal shards",
            batch.len()
        )));
    }
    let (_, whole) = batch_loss_and_grads(model, batch, opts)?;
    let per = batch.len() / k;
    let shards: Vec<Result<Vec<Tensor<S>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(per)
            .map(|shard| {
                scope.spawn(move || batch_loss_and_grads(model, shard, opts).map(|(_, g)| g))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("shard worker panicked"))
            .collect()
    });
    let shards = shards.into_iter().collect::<Result<Vec<_>>>()?;
    let inv_k = 1.0 / k as f64;
    let mut worst = 0.0f64;
    for (i, w) in whole.iter().enumerate() {
        for (j, &full) in w.data().iter().enumerate() {
            let mean: f64 = shards.iter().map(|s| s[i].data()[j].as_f64()).sum::<f64>() * inv_k;
            worst = worst.max((mean - full.as_f64()).abs());
        }
    }
    Ok(worst)
}

/// Per-source tokenized documents.
pub type TokenizedSources = BTreeMap<String, Vec<Vec<usize>>>;

/// Runs the curriculum until the plan's token budget (or `max_steps`) is
/// exhausted. Each stage draws documents through its own seeded mix sampler
/// and packs them at the stage's sequence length; a partially filled window
/// is discarded at a stage switch. `on_step` sees every log record after the
/// update is applied.
#[allow(clippy::too_many_arguments)]
pub fn pretrain<S: Scalar>(
    model: &mut Model<S>,
    state: &mut OptimizerState<S>,
    plan: &TrainPlan,
    sources: &TokenizedSources,
    validation: &[Vec<usize>],
    eos: usize,
    seed: u64,
    opts: &ForwardOptions,
    mut on_step: impl FnMut(&LogRecord, &Model<S>, &OptimizerState<S>) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    let errs = plan.violations();
    if !errs.is_empty() {
        return Err(Error::RunConfig(errs));
    }
    let total = plan.total_tokens();
    let mut logs = Vec::new();
    let mut active: Option<(usize, MixSampler<'_, Vec<usize>>, Packer)> = None;
    let mut steps = 0u64;

    while state.tokens_seen < total && plan.max_steps.is_none_or(|m| steps < m) {
        let (stage_idx, stage) = curriculum_schedule(state.tokens_seen, &plan.stages);
        if active.as_ref().is_none_or(|(i, _, _)| *i != stage_idx) {
            let sampler =
                MixSampler::new(&stage.mix, sources, seed.wrapping_add(stage_idx as u64))?;
            active = Some((stage_idx, sampler, Packer::new(stage.seq_len, eos)));
        }
        let (_, sampler, packer) = active.as_mut().unwrap();
        let want = plan.sequences_per_batch(stage.seq_len);
        let mut batch = Vec::with_capacity(want);
        while batch.len() < want {
            let (_, doc) = sampler.next().expect("sampler is endless");
            batch.extend(packer.push(doc));
        }
        batch.truncate(want);

        let mut rec = train_step(model, &batch, state, plan, opts)?;
        steps += 1;
        if plan.eval_every > 0
            && (steps.is_multiple_of(plan.eval_every) || state.tokens_seen >= total)
        {
            rec.val_loss = validation_loss(
                model,
                validation,
                stage.seq_len,
                plan.val_windows,
                eos,
                opts,
            )?;
        }
        log::debug!(
            "step {} tokens {} lr {:.3e} seq {} loss {:.4}",
            rec.step,
            rec.tokens_seen,
            rec.lr,
            rec.seq_len,
            rec.train_loss
        );
        on_step(&rec, model, state)?;
        logs.push(rec);
    }
    Ok(logs)
}

/// Mean next-token loss on held-out documents packed at `seq_len`, or
/// `None` when they do not fill a single window.
pub fn validation_loss<S: Scalar>(
    model: &Model<S>,
    docs: &[Vec<usize>],
    seq_len: usize,
    max_windows: usize,
    eos: usize,
    opts: &ForwardOptions,
) -> Result<Option<f64>> {
    let mut windows = crate::data::pack_sequences(docs, seq_len, eos);
    windows.truncate(max_windows);
    if windows.is_empty() {
        return Ok(None);
    }
    Ok(Some(mean_nll(model, &windows, opts)?.mean()))
}
