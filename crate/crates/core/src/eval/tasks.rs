use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{generate, GenerateConfig};
use super::sequence_logprob;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::tensor::Scalar;
use crate::tokenizer::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exemplar {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McTask {
    pub question: String,
    pub choices: Vec<String>,
    pub gold: usize,
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmTask {
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
}

/// One line of a task file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Task {
    Mc(McTask),
    Em(EmTask),
}

impl Task {
    pub fn question(&self) -> &str {
        match self {
            Task::Mc(t) => &t.question,
            Task::Em(t) => &t.question,
        }
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        match self {
            Task::Mc(t) => &t.exemplars,
            Task::Em(t) => &t.exemplars,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Task::Mc(t) if t.choices.len() < 2 => Err(Error::Input(
                "a multiple-choice task needs >= 2 choices".into(),
            )),
            Task::Mc(t) if t.gold >= t.choices.len() => Err(Error::Input(format!(
                "gold index {} out of range for {} choices",
                t.gold,
                t.choices.len()
            ))),
            Task::Em(t) if t.answers.is_empty() => {
                Err(Error::Input("an exact-match task needs >= 1 answer".into()))
            }
            _ => Ok(()),
        }
    }
}

pub fn read_tasks(path: &Path) -> Result<Vec<Task>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        task.validate()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(task);
    }
    Ok(out)
}

pub const DEFAULT_DELIMITER: &str = "\n\n";

fn block(question: &str, answer: Option<&str>) -> String {
    match answer {
        Some(a) => format!("Question: {question}\nAnswer: {a}"),
        None => format!("Question: {question}\nAnswer:"),
    }
}

/// `k` exemplars, in an order fixed by `seed`, each joined by `delimiter`,
/// followed by the query block (ending in `"Answer:"`).
pub fn few_shot_render(
    question: &str,
    exemplars: &[Exemplar],
    k: usize,
    delimiter: &str,
    seed: u64,
) -> Result<String> {
    if k > exemplars.len() {
        return Err(Error::Input(format!(
            "{k}-shot requested but only {} exemplars available",
            exemplars.len()
        )));
    }
    let mut order: Vec<usize> = (0..exemplars.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts: Vec<String> = order[..k]
        .iter()
        .map(|&i| block(&exemplars[i].question, Some(&exemplars[i].answer)))
        .collect();
    parts.push(block(question, None));
    Ok(parts.join(delimiter))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McPicks {
    pub acc_pick: usize,
    pub acc_norm_pick: usize,
}

/// Argmax of raw and byte-normalized log-probs; ties go to the earliest
/// choice.
pub fn pick_choices(logprobs: &[f64], byte_lens: &[usize]) -> McPicks {
    let first_max = |score: &dyn Fn(usize) -> f64| {
        let mut best = 0;
        for i in 1..logprobs.len() {
            if score(i) > score(best) {
                best = i;
            }
        }
        best
    };
    McPicks {
        acc_pick: first_max(&|i| logprobs[i]),
        acc_norm_pick: first_max(&|i| logprobs[i] / byte_lens[i].max(1) as f64),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub k_shot: usize,
    pub delimiter: String,
    pub seed: u64,
    /// Used for exact-match tasks; the answer is cut at the first newline.
    pub generation: GenerateConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k_shot: 0,
            delimiter: DEFAULT_DELIMITER.into(),
            seed: 0,
            generation: GenerateConfig {
                max_new: 32,
                ..GenerateConfig::default()
            },
        }
    }
}

fn encode_prompt(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.encode_str(text)?);
    Ok(ids)
}

/// Scores each choice as the continuation `" " + choice` of the rendered
/// prompt. Returns the picks and the per-choice log-probs.
pub fn mc_score<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    task: &McTask,
    settings: &EvalSettings,
    opts: &ForwardOptions,
) -> Result<(McPicks, Vec<f64>)> {
    let text = few_shot_render(
        &task.question,
        &task.exemplars,
        settings.k_shot,
        &settings.delimiter,
        settings.seed,
    )?;
    let prompt = encode_prompt(vocab, &text)?;
    let mut logprobs = Vec::with_capacity(task.choices.len());
    for choice in &task.choices {
        let cont = vocab.encode_str(&format!(" {choice}"))?;
        logprobs.push(sequence_logprob(model, &prompt, &cont, opts)?);
    }
    let lens: Vec<usize> = task.choices.iter().map(|c| c.len()).collect();
    Ok((pick_choices(&logprobs, &lens), logprobs))
}

/// Lowercase, drop ASCII punctuation, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(prediction: &str, aliases: &[String]) -> bool {
    let p = normalize_answer(prediction);
    aliases.iter().any(|a| normalize_answer(a) == p)
}

/// One line of the results file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picks: Option<McPicks>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_norm: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_mc: usize,
    pub acc: Option<f64>,
    pub acc_norm: Option<f64>,
    pub n_em: usize,
    pub em: Option<f64>,
}

impl Aggregate {
    pub fn from_results(results: &[TaskResult]) -> Self {
        let frac = |flags: Vec<bool>| {
            (!flags.is_empty())
                .then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
        };
        let acc: Vec<bool> = results.iter().filter_map(|r| r.acc).collect();
        let acc_norm: Vec<bool> = results.iter().filter_map(|r| r.acc_norm).collect();
        let em: Vec<bool> = results.iter().filter_map(|r| r.em).collect();
        Aggregate {
            n_mc: acc.len(),
            n_em: em.len(),
            acc: frac(acc),
            acc_norm: frac(acc_norm),
            em: frac(em),
        }
    }
}

fn evaluate_one<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    index: usize,
    task: &Task,
    settings: &EvalSettings,
    opts: &ForwardOptions,
) -> Result<TaskResult> {
    task.validate()?;
    let mut r = TaskResult {
        index,
        gold: None,
        picks: None,
        acc: None,
        acc_norm: None,
        logprobs: None,
        prediction: None,
        em: None,
    };
    match task {
        Task::Mc(t) => {
            let (picks, lps) = mc_score(model, vocab, t, settings, opts)?;
            r.gold = Some(t.gold);
            r.acc = Some(picks.acc_pick == t.gold);
            r.acc_norm = Some(picks.acc_norm_pick == t.gold);
            r.picks = Some(picks);
            r.logprobs = Some(lps);
        }
        Task::Em(t) => {
            let text = few_shot_render(
                &t.question,
                &t.exemplars,
                settings.k_shot,
                &settings.delimiter,
                settings.seed,
            )?;
            let prompt = encode_prompt(vocab, &text)?;
            let gen = GenerateConfig {
                eos: Some(vocab.eos()),
                ..settings.generation.clone()
            };
            let mut ids = generate(model, &prompt, &gen, opts)?;
            if ids.last() == Some(&vocab.eos()) {
                ids.pop();
            }
            let full = vocab.decode_lossy(&ids)?;
            let answer = full.split('\n').next().unwrap_or("").trim().to_string();
            r.em = Some(exact_match(&answer, &t.answers));
            r.prediction = Some(answer);
        }
    }
    Ok(r)
}

/// Scores every task, spreading work over `threads` scoped threads.
/// Results come back in task order regardless of scheduling.
pub fn evaluate_tasks<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    tasks: &[Task],
    settings: &EvalSettings,
    opts: &ForwardOptions,
    threads: usize,
) -> Result<(Vec<TaskResult>, Aggregate)> {
    let threads = threads.max(1).min(tasks.len().max(1));
    let chunk = tasks.len().div_ceil(threads).max(1);
    let results: Vec<Result<TaskResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, t)| evaluate_one(model, vocab, c * chunk + i, t, settings, opts))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let agg = Aggregate::from_results(&results);
    Ok((results, agg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(n: usize) -> Vec<Exemplar> {
        (0..n)
            .map(|i| Exemplar {
                question: format!("q{i}"),
                answer: format!("a{i}"),
            })
            .collect()
    }

    #[test]
    fn render_counts_blocks() {
        assert_eq!(
            few_shot_render("Q", &ex(3), 0, "\n\n", 1).unwrap(),
            "Question: Q\nAnswer:"
        );
        let two = few_shot_render("Q", &ex(3), 2, "\n\n", 1).unwrap();
        assert_eq!(two.matches("Question:").count(), 3);
        assert!(two.ends_with("\n\nQuestion: Q\nAnswer:"));
        assert_eq!(two, few_shot_render("Q", &ex(3), 2, "\n\n", 1).unwrap());
        assert!(few_shot_render("Q", &ex(3), 4, "\n\n", 1).is_err());
    }

    #[test]
    fn byte_normalized_pick() {
        let p = pick_choices(&[-1.0, -2.0], &[1, 4]);
        assert_eq!(
            p,
            McPicks {
                acc_pick: 0,
                acc_norm_pick: 1
            }
        );
        let tie = pick_choices(&[-3.0, -3.0, -3.0], &[2, 2, 2]);
        assert_eq!(
            tie,
            McPicks {
                acc_pick: 0,
                acc_norm_pick: 0
            }
        );
    }

    #[test]
    fn exact_match_normalization() {
        assert!(exact_match(
            "  The Beatles! ",
            &["beatles".into(), "the beatles".into()]
        ));
        assert!(!exact_match("Beatle", &["beatles".into()]));
        assert_eq!(normalize_answer("Hello,\tWORLD."), "hello world");
    }

    #[test]
    fn task_lines_parse_both_kinds() {
        let mc: Task =
            serde_json::from_str(r#"{"question":"2+2?","choices":["3","4"],"gold":1}"#).unwrap();
        assert!(matches!(mc, Task::Mc(_)));
        let em: Task =
            serde_json::from_str(r#"{"question":"capital?","answers":["Paris"]}"#).unwrap();
        assert!(matches!(em, Task::Em(_)));
        let bad: Task =
            serde_json::from_str(r#"{"question":"x","choices":["a","b"],"gold":2}"#).unwrap();
        assert!(bad.validate().is_err());
    }
}
