//! Optimizer, schedule, data mixing and checkpoint/resume properties.

mod oracle;

use std::collections::BTreeMap;

use danube::checkpoint::Checkpoint;
use danube::data::{DataStage, MixSampler};
use danube::model::{ForwardOptions, Model, ModelConfig};
use danube::pretrain::{
    adamw_step, clip_grad_norm, cosine_lr, global_norm, pretrain, train_step, LrSchedule,
    OptimHyper, OptimizerState, TrainPlan,
};
use danube::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

const OPTS: ForwardOptions = ForwardOptions { fp8: false };

fn tiny() -> Model<f64> {
    Model::init(ModelConfig::tiny(40), 3).unwrap()
}

fn windows(n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = oracle::rng(seed);
    (0..n)
        .map(|_| (0..len).map(|_| r.random_range(0..40)).collect())
        .collect()
}

fn plan(total: u64) -> TrainPlan {
    TrainPlan {
        optim: OptimHyper::default(),
        schedule: LrSchedule {
            warmup_tokens: 64,
            peak_lr: 3e-3,
            min_lr: 3e-4,
            total_tokens: total,
        },
        stages: vec![DataStage::single_source(total, 16, "web")],
        batch_tokens: 64,
        eval_every: 2,
        val_windows: 2,
        max_steps: None,
    }
}

#[test]
fn adam_without_decay_matches_reference() {
    let n = 10;
    let hyper = OptimHyper {
        weight_decay: 0.0,
        ..OptimHyper::default()
    };
    let mut r = oracle::rng(5);
    let init: Vec<f64> = (0..n).map(|_| oracle::randn(&mut r)).collect();
    let mut p = Tensor::from_f64([n], &init).unwrap();
    let mut state = OptimizerState::new(std::iter::once(&p));
    let mut reference = oracle::RefAdamW::new(n);
    let mut x = init.clone();
    for step in 0..200 {
        let g: Vec<f64> = (0..n).map(|_| oracle::randn(&mut r)).collect();
        let lr = 1e-2 / (1.0 + step as f64);
        adamw_step(
            &mut [&mut p],
            &[Tensor::from_f64([n], &g).unwrap()],
            &[true],
            &mut state,
            &hyper,
            lr,
        )
        .unwrap();
        reference.step(
            &mut x,
            &g,
            lr,
            hyper.beta1,
            hyper.beta2,
            hyper.eps,
            0.0,
            true,
        );
        for (a, b) in p.data().iter().zip(&x) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_never_exceeds_the_limit(
        data in prop::collection::vec(-1e3f64..1e3, 1..40),
        max_norm in 1e-3f64..10.0,
    ) {
        let mut grads = vec![Tensor::<f64>::from_f64([data.len()], &data).unwrap()];
        clip_grad_norm(&mut grads, max_norm).unwrap();
        prop_assert!(global_norm(&grads) <= max_norm + 1e-12);
    }

    #[test]
    fn cosine_is_continuous_at_warmup_and_non_increasing_after(
        warmup in 1u64..10_000,
        span in 2u64..100_000,
        peak in 1e-5f64..1e-1,
        ratio in 0.01f64..1.0,
    ) {
        let s = LrSchedule { warmup_tokens: warmup, peak_lr: peak, min_lr: peak * ratio, total_tokens: warmup + span };
        let at = cosine_lr(warmup, &s);
        let after = cosine_lr(warmup + 1, &s);
        prop_assert!(at == peak);
        // One token past warmup the cosine has moved by O((pi/span)^2).
        let pi_over_span = std::f64::consts::PI / span as f64;
        prop_assert!((at - after).abs() <= peak * pi_over_span * pi_over_span);
        let mut prev = at;
        let step = (span / 97).max(1);
        let mut t = warmup;
        while t <= warmup + span + step {
            let lr = cosine_lr(t, &s);
            prop_assert!(lr <= prev);
            prev = lr;
            t += step;
        }
    }
}

#[test]
fn mix_fractions_within_four_sigma() {
    let mix = BTreeMap::from([
        ("a".to_string(), 0.5),
        ("b".to_string(), 0.3),
        ("c".to_string(), 0.2),
    ]);
    let sources: BTreeMap<String, Vec<u32>> = ["a", "b", "c"]
        .iter()
        .map(|s| (s.to_string(), vec![0]))
        .collect();
    let n = 200_000;
    let sampler = MixSampler::new(&mix, &sources, 77).unwrap();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, _) in sampler.take(n) {
        *counts.entry(name).or_default() += 1;
    }
    for (name, &p) in &mix {
        let frac = counts[name.as_str()] as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((frac - p).abs() <= 4.0 * sigma, "{name}: {frac} vs {p}");
    }
}

#[test]
fn training_is_a_pure_function_of_inputs_and_seed() {
    let docs: Vec<Vec<usize>> = windows(30, 20, 9);
    let sources = BTreeMap::from([("web".to_string(), docs)]);
    let val = windows(4, 40, 10);
    let p = plan(64 * 6);
    let run = || {
        let mut m = tiny();
        let mut st = OptimizerState::new(m.params.tensors());
        let logs = pretrain(
            &mut m,
            &mut st,
            &p,
            &sources,
            &val,
            39,
            11,
            &OPTS,
            |_, _, _| Ok(()),
        )
        .unwrap();
        (logs, m)
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    assert_eq!(la, lb);
    assert_eq!(ma, mb);
    assert_eq!(la.len(), 6);
    assert!(la.iter().filter(|r| r.val_loss.is_some()).count() == 3);
}

#[test]
fn checkpoint_round_trip_and_resume_are_bitwise() {
    let p = plan(64 * 8);
    let batches: Vec<Vec<Vec<usize>>> = (0..4).map(|i| windows(4, 16, 20 + i)).collect();

    let mut straight = tiny();
    let mut st = OptimizerState::new(straight.params.tensors());
    for b in &batches {
        train_step(&mut straight, b, &mut st, &p, &OPTS).unwrap();
    }

    let mut first = tiny();
    let mut st1 = OptimizerState::new(first.params.tensors());
    for b in &batches[..2] {
        train_step(&mut first, b, &mut st1, &p, &OPTS).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.bin");
    Checkpoint::from_model(&first, Some(&st1))
        .save(&path)
        .unwrap();
    let loaded = Checkpoint::<f64>::load(&path).unwrap();
    let mut resumed = loaded.model().unwrap();
    let mut st2 = loaded.optimizer_state().unwrap().expect("optimizer saved");
    assert_eq!(resumed, first);
    assert_eq!((st2.step, st2.tokens_seen), (st1.step, st1.tokens_seen));
    for (a, b) in st2.m.iter().chain(&st2.v).zip(st1.m.iter().chain(&st1.v)) {
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for b in &batches[2..] {
        train_step(&mut resumed, b, &mut st2, &p, &OPTS).unwrap();
    }
    assert_eq!(resumed, straight);
    assert_eq!(st2.m, st.m);
    assert_eq!(st2.v, st.v);
}
