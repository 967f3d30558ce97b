//! Token-stream construction: quality filtering, per-stage source mixing,
//! packing into fixed-length windows, and the token-budget curriculum.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One corpus record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    pub source: String,
}

/// Reads one JSON record per line, skipping blank lines. Errors name the
/// file and line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads newline-delimited `{"text": ..., "source": ...}` records.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    read_jsonl(path)
}

/// Groups documents by their `source` field, preserving order.
pub fn by_source(docs: Vec<Document>) -> BTreeMap<String, Vec<Document>> {
    let mut out: BTreeMap<String, Vec<Document>> = BTreeMap::new();
    for d in docs {
        out.entry(d.source.clone()).or_default().push(d);
    }
    out
}

pub trait DocumentScorer {
    /// Deterministic quality score in `[0, 1]`.
    fn score(&self, doc: &Document) -> f64;
}

impl<F: Fn(&Document) -> f64> DocumentScorer for F {
    fn score(&self, doc: &Document) -> f64 {
        self(doc)
    }
}

/// A scorer and the acceptance threshold, clamped to `[0, 1]`.
pub struct QualityScorer<D> {
    scorer: D,
    threshold: f64,
}

impl<D: DocumentScorer> QualityScorer<D> {
    pub fn new(scorer: D, threshold: f64) -> Self {
        Self {
            scorer,
            threshold: threshold.clamp(0.0, 1.0),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn score(&self, doc: &Document) -> f64 {
        self.scorer.score(doc)
    }

    pub fn passes(&self, doc: &Document) -> bool {
        self.scorer.score(doc) >= self.threshold
    }
}

/// Documents scoring at least the threshold, in their original order.
pub fn quality_filter<'a, D: DocumentScorer>(
    docs: impl IntoIterator<Item = Document> + 'a,
    scorer: &'a QualityScorer<D>,
) -> impl Iterator<Item = Document> + 'a {
    docs.into_iter().filter(move |d| scorer.passes(d))
}

/// Reference scorer: the mean of the alphabetic-character fraction,
/// one minus the repeated character-8-gram ratio, and a length-in-range flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeuristicScorer {
    /// Inclusive bounds on the document length in characters.
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for HeuristicScorer {
    fn default() -> Self {
        Self {
            min_chars: 16,
            max_chars: 100_000,
        }
    }
}

impl HeuristicScorer {
    pub fn alpha_fraction(text: &str) -> f64 {
        let total = text.chars().count();
        if total == 0 {
            return 0.0;
        }
        text.chars().filter(|c| c.is_alphabetic()).count() as f64 / total as f64
    }

    /// Share of character 8-gram occurrences that repeat an earlier one.
    pub fn repetition_ratio(text: &str) -> f64 {
        let chars: Vec<char> = text.chars().collect();
        if chars.len() < 8 {
            return 0.0;
        }
        let grams: Vec<&[char]> = chars.windows(8).collect();
        let distinct: std::collections::HashSet<&[char]> = grams.iter().copied().collect();
        1.0 - distinct.len() as f64 / grams.len() as f64
    }

    pub fn length_ok(&self, text: &str) -> bool {
        (self.min_chars..=self.max_chars).contains(&text.chars().count())
    }
}

impl DocumentScorer for HeuristicScorer {
    fn score(&self, doc: &Document) -> f64 {
        let t = &doc.text;
        let flag = if self.length_ok(t) { 1.0 } else { 0.0 };
        (Self::alpha_fraction(t) + (1.0 - Self::repetition_ratio(t)) + flag) / 3.0
    }
}

/// One data stage: a token budget, a source mix and a sequence length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataStage {
    pub token_budget: u64,
    pub seq_len: usize,
    pub mix: BTreeMap<String, f64>,
}

impl DataStage {
    pub fn single_source(token_budget: u64, seq_len: usize, source: &str) -> Self {
        Self {
            token_budget,
            seq_len,
            mix: BTreeMap::from([(source.to_string(), 1.0)]),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.token_budget == 0 {
            errs.push("stage token_budget must be positive".into());
        }
        if self.seq_len < 2 {
            errs.push(format!(
                "stage seq_len must be at least 2, got {}",
                self.seq_len
            ));
        }
        if self.mix.is_empty() {
            errs.push("stage mix is empty".into());
        }
        if let Some((k, p)) = self.mix.iter().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            errs.push(format!(
                "mix proportion for {k} must lie in [0, 1], got {p}"
            ));
        }
        let total: f64 = self.mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            errs.push(format!("mix proportions sum to {total}, not 1"));
        }
        errs
    }
}

/// Four sequence-length stages over 1T tokens, single-source.
pub fn danube_curriculum() -> Vec<DataStage> {
    [(700, 2048), (100, 4096), (100, 8192), (100, 16_384)]
        .into_iter()
        .map(|(b, s)| DataStage::single_source(b * 1_000_000_000, s, "web"))
        .collect()
}

/// Three data-mix stages at 8192 context, web share falling per stage; the
/// remainder is one "other" bucket.
pub fn danube2_stages() -> Vec<DataStage> {
    [(1_000, 0.845), (950, 0.728), (50, 0.555)]
        .into_iter()
        .map(|(b, web)| DataStage {
            token_budget: b * 1_000_000_000,
            seq_len: 8192,
            mix: BTreeMap::from([("web".to_string(), web), ("other".to_string(), 1.0 - web)]),
        })
        .collect()
}

/// The stage whose half-open cumulative interval `[start, end)` contains
/// `tokens_seen`; the final stage stays active past the total budget.
pub fn curriculum_schedule(tokens_seen: u64, stages: &[DataStage]) -> (usize, &DataStage) {
    assert!(!stages.is_empty(), "curriculum needs at least one stage");
    let mut end = 0u64;
    for (i, s) in stages.iter().enumerate() {
        end += s.token_budget;
        if tokens_seen < end {
            return (i, s);
        }
    }
    (stages.len() - 1, stages.last().unwrap())
}

/// Draws source names i.i.d. from a mix and yields the next item of that
/// source, cycling each source from its start once exhausted.
pub struct MixSampler<'a, T> {
    names: Vec<&'a str>,
    cumulative: Vec<f64>,
    streams: Vec<&'a [T]>,
    cursors: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a, T> MixSampler<'a, T> {
    pub fn new(
        mix: &'a BTreeMap<String, f64>,
        sources: &'a BTreeMap<String, Vec<T>>,
        seed: u64,
    ) -> Result<Self> {
        let mut names = Vec::new();
        let mut cumulative = Vec::new();
        let mut streams = Vec::new();
        let mut acc = 0.0;
        for (name, &p) in mix {
            let stream = sources.get(name).ok_or_else(|| {
                Error::Data(format!(
                    "mix names source {name:?} but no documents carry it"
                ))
            })?;
            if p > 0.0 && stream.is_empty() {
                return Err(Error::Data(format!(
                    "source {name:?} has weight {p} but no usable documents"
                )));
            }
            if p <= 0.0 {
                continue;
            }
            acc += p;
            names.push(name.as_str());
            cumulative.push(acc);
            streams.push(stream.as_slice());
        }
        if names.is_empty() {
            return Err(Error::Data("mix has no source with positive weight".into()));
        }
        let n = names.len();
        Ok(Self {
            names,
            cumulative,
            streams,
            cursors: vec![0; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Index into the positive-weight sources for one uniform draw.
    fn pick(&mut self) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u: f64 = self.rng.random::<f64>() * total;
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

impl<'a, T> Iterator for MixSampler<'a, T> {
    type Item = (&'a str, &'a T);

    fn next(&mut self) -> Option<Self::Item> {
        let i = self.pick();
        let stream = self.streams[i];
        let item = &stream[self.cursors[i] % stream.len()];
        self.cursors[i] += 1;
        Some((self.names[i], item))
    }
}

/// Streaming packer: documents are concatenated, each followed by `eos`,
/// and cut into contiguous windows of exactly `seq_len` tokens.
#[derive(Clone, Debug)]
pub struct Packer {
    seq_len: usize,
    eos: usize,
    buffer: Vec<usize>,
}

impl Packer {
    pub fn new(seq_len: usize, eos: usize) -> Self {
        assert!(seq_len >= 2, "packed windows need at least two tokens");
        Self {
            seq_len,
            eos,
            buffer: Vec::with_capacity(seq_len),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Tokens waiting for a window to fill; dropped if the stream ends.
    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    pub fn push(&mut self, doc: &[usize]) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for &t in doc.iter().chain(std::iter::once(&self.eos)) {
            self.buffer.push(t);
            if self.buffer.len() == self.seq_len {
                out.push(std::mem::replace(
                    &mut self.buffer,
                    Vec::with_capacity(self.seq_len),
                ));
            }
        }
        out
    }
}

pub fn pack_sequences<D: AsRef<[usize]>>(
    docs: impl IntoIterator<Item = D>,
    seq_len: usize,
    eos: usize,
) -> Vec<Vec<usize>> {
    let mut p = Packer::new(seq_len, eos);
    docs.into_iter().flat_map(|d| p.push(d.as_ref())).collect()
}

/// Model input and next-token targets of a packed window.
pub fn split_window(window: &[usize]) -> (&[usize], &[usize]) {
    (&window[..window.len() - 1], &window[1..])
}
