use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chat::{render_prompt, render_response};
use super::lora::{BoundLora, LoraSet};
use super::prefs::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{forward_graph, BoundParams, ForwardOptions, Model};
use crate::pretrain::{adamw_step, clip_grad_norm, OptimHyper, OptimizerState};
use crate::tensor::{kernels, Graph, Scalar, Tensor, Var};
use crate::tokenizer::Vocab;

/// `-log σ(β·[(π_c − ref_c) − (π_r − ref_r)])` for one pair.
pub fn dpo_pair_loss(policy_c: f64, policy_r: f64, ref_c: f64, ref_r: f64, beta: f64) -> f64 {
    -kernels::log_sigmoid(beta * ((policy_c - ref_c) - (policy_r - ref_r)))
}

/// Batch mean of [`dpo_pair_loss`]; each slice holds one value per pair.
pub fn dpo_loss(
    policy_c: &[f64],
    policy_r: &[f64],
    ref_c: &[f64],
    ref_r: &[f64],
    beta: f64,
) -> Result<f64> {
    let n = policy_c.len();
    if n == 0 || policy_r.len() != n || ref_c.len() != n || ref_r.len() != n {
        return Err(Error::Input(
            "dpo_loss needs four equal-length, non-empty slices".into(),
        ));
    }
    Ok((0..n)
        .map(|i| dpo_pair_loss(policy_c[i], policy_r[i], ref_c[i], ref_r[i], beta))
        .sum::<f64>()
        / n as f64)
}

/// Tokenized preference pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

impl EncodedPair {
    pub fn encode(pair: &PreferencePair, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            prompt: render_prompt(&pair.prompt_turns, vocab)?,
            chosen: render_response(&pair.chosen, vocab)?,
            rejected: render_response(&pair.rejected, vocab)?,
        })
    }
}

/// Summed response log-prob as a graph scalar.
pub fn graph_sequence_logprob<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &Model<S>,
    params: &BoundParams,
    lora: Option<&BoundLora<S>>,
    prompt: &[usize],
    response: &[usize],
    opts: &ForwardOptions,
) -> Result<Var> {
    if prompt.is_empty() || response.is_empty() {
        return Err(Error::Input(
            "prompt and response must both be non-empty".into(),
        ));
    }
    let total = prompt.len() + response.len();
    if total > model.config.max_context {
        return Err(Error::Input(format!(
            "prompt plus response ({total} tokens) exceeds the context of {}",
            model.config.max_context
        )));
    }
    let seq: Vec<usize> = prompt
        .iter()
        .chain(&response[..response.len() - 1])
        .copied()
        .collect();
    let logits = forward_graph(g, &model.config, params, &seq, opts, lora)?;
    let mut targets = vec![None; prompt.len() - 1];
    targets.extend(response.iter().map(|&t| Some(t)));
    let lp = g.pick_log_softmax(logits, &targets)?;
    Ok(g.sum(lp))
}

/// `(log p(chosen), log p(rejected))` under `model` with an optional
/// adapter, through the same graph path used for training.
pub fn pair_logprobs<S: Scalar>(
    model: &Model<S>,
    lora: Option<&LoraSet<S>>,
    pair: &EncodedPair,
    opts: &ForwardOptions,
) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let bl = lora.map(|l| l.bind(&mut g, false));
    let c = graph_sequence_logprob(
        &mut g,
        model,
        &bound,
        bl.as_ref(),
        &pair.prompt,
        &pair.chosen,
        opts,
    )?;
    let r = graph_sequence_logprob(
        &mut g,
        model,
        &bound,
        bl.as_ref(),
        &pair.prompt,
        &pair.rejected,
        opts,
    )?;
    Ok((g.value(c).item().as_f64(), g.value(r).item().as_f64()))
}

/// Reference log-probs for every pair, computed once (pairs are scored on
/// scoped threads; results keep pair order).
pub fn reference_logprobs<S: Scalar>(
    reference: &Model<S>,
    pairs: &[EncodedPair],
    opts: &ForwardOptions,
    threads: usize,
) -> Result<Vec<(f64, f64)>> {
    let chunk = pairs.len().div_ceil(threads.max(1)).max(1);
    let parts: Vec<Result<Vec<(f64, f64)>>> = std::thread::scope(|s| {
        let hs: Vec<_> = pairs
            .chunks(chunk)
            .map(|c| {
                s.spawn(move || {
                    c.iter()
                        .map(|p| pair_logprobs(reference, None, p, opts))
                        .collect()
                })
            })
            .collect();
        hs.into_iter()
            .map(|h| h.join().expect("reference worker panicked"))
            .collect()
    });
    Ok(parts.into_iter().collect::<Result<Vec<_>>>()?.concat())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoHyper {
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optim: OptimHyper,
}

impl Default for DpoHyper {
    fn default() -> Self {
        Self {
            beta: 0.2,
            lr: 1e-5,
            batch_size: 2,
            epochs: 1,
            optim: OptimHyper {
                weight_decay: 0.0,
                ..OptimHyper::default()
            },
        }
    }
}

impl DpoHyper {
    /// Second-stage settings: same as the first with a lower learning rate.
    pub fn second_stage() -> Self {
        Self {
            lr: 3e-6,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = self.optim.validate();
        if !(self.beta > 0.0) {
            errs.push(format!("dpo beta must be positive, got {}", self.beta));
        }
        if !(self.lr > 0.0) {
            errs.push(format!("dpo lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            errs.push("dpo batch_size and epochs must be positive".into());
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub stage: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Mean of `(π_c − ref_c) − (π_r − ref_r)` over the batch, before the update.
    pub margin: f64,
}

/// Batch loss and adapter gradients; `refs` holds the cached reference
/// log-probs aligned with `batch`.
pub fn dpo_loss_and_grads<S: Scalar>(
    model: &Model<S>,
    lora: &LoraSet<S>,
    batch: &[&EncodedPair],
    refs: &[(f64, f64)],
    beta: f64,
    opts: &ForwardOptions,
) -> Result<(f64, f64, Vec<Tensor<S>>)> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let bl = lora.bind(&mut g, true);
    let mut total = None;
    let mut margin = 0.0;
    for (pair, &(ref_c, ref_r)) in batch.iter().zip(refs) {
        let c = graph_sequence_logprob(
            &mut g,
            model,
            &bound,
            Some(&bl),
            &pair.prompt,
            &pair.chosen,
            opts,
        )?;
        let r = graph_sequence_logprob(
            &mut g,
            model,
            &bound,
            Some(&bl),
            &pair.prompt,
            &pair.rejected,
            opts,
        )?;
        let diff = g.sub(c, r)?;
        let shift = Tensor::scalar(S::cast(-(ref_c - ref_r)));
        let m = g.add_const(diff, &shift)?;
        margin += g.value(m).item().as_f64();
        let z = g.scale(m, S::cast(beta));
        let ls = g.log_sigmoid(z);
        total = Some(match total {
            None => ls,
            Some(acc) => g.add(acc, ls)?,
        });
    }
    let total = total.ok_or(Error::EmptyLoss)?;
    let n = batch.len() as f64;
    let loss = g.scale(total, S::cast(-1.0 / n));
    g.backward(loss)?;
    Ok((g.value(loss).item().as_f64(), margin / n, bl.grads(&g)))
}

/// One DPO stage: only adapter weights move; `reference` stays frozen and
/// its log-probs are computed once up front.
#[allow(clippy::too_many_arguments)]
pub fn dpo_train<S: Scalar>(
    model: &Model<S>,
    lora: &mut LoraSet<S>,
    reference: &Model<S>,
    pairs: &[EncodedPair],
    hyper: &DpoHyper,
    stage: usize,
    seed: u64,
    opts: &ForwardOptions,
    mut on_step: impl FnMut(&DpoRecord) -> Result<()>,
) -> Result<Vec<DpoRecord>> {
    let errs = hyper.violations();
    if !errs.is_empty() {
        return Err(Error::RunConfig(errs));
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let refs = reference_logprobs(reference, pairs, opts, threads)?;
    let mut state = OptimizerState::new(lora.tensors());
    let decay = vec![true; lora.tensors().len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logs = Vec::new();
    for _ in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let r: Vec<(f64, f64)> = chunk.iter().map(|&i| refs[i]).collect();
            let (loss, margin, mut grads) =
                dpo_loss_and_grads(model, lora, &batch, &r, hyper.beta, opts)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss,
                    step: state.step + 1,
                    tokens_seen: 0,
                });
            }
            clip_grad_norm(&mut grads, hyper.optim.clip_norm)?;
            adamw_step(
                &mut lora.tensors_mut(),
                &grads,
                &decay,
                &mut state,
                &hyper.optim,
                hyper.lr,
            )?;
            let rec = DpoRecord {
                stage,
                step: state.step,
                lr: hyper.lr,
                loss,
                margin,
            };
            on_step(&rec)?;
            logs.push(rec);
        }
    }
    Ok(logs)
}

/// Runs the stages in order, continuing one adapter. Each stage's frozen
/// reference is the policy as it stood when the stage began (the base model
/// for the first stage).
pub fn dpo_stages<S: Scalar>(
    model: &Model<S>,
    lora: &mut LoraSet<S>,
    stages: &[(Vec<EncodedPair>, DpoHyper)],
    seed: u64,
    opts: &ForwardOptions,
    mut on_step: impl FnMut(&DpoRecord) -> Result<()>,
) -> Result<Vec<DpoRecord>> {
    let mut logs = Vec::new();
    for (i, (pairs, hyper)) in stages.iter().enumerate() {
        let reference = Model {
            config: model.config.clone(),
            params: lora.merge(&model.params)?,
        };
        logs.extend(dpo_train(
            model,
            lora,
            &reference,
            pairs,
            hyper,
            i,
            seed.wrapping_add(i as u64),
            opts,
            &mut on_step,
        )?);
    }
    Ok(logs)
}
