//! Stage orchestration. Every stage writes under `<run_dir>/<stage>/`:
//!
//! | stage    | outputs                                              |
//! |----------|------------------------------------------------------|
//! | pretrain | `log.jsonl`, `ckpt-<step>.bin`, `final.bin`          |
//! | sft      | `log.jsonl`, `final.bin`                             |
//! | dpo      | `log.jsonl`, `adapter.bin`, `final.bin` (merged)     |
//! | remap    | `final.bin`, `vocab.txt`, `merges.txt`               |
//! | eval     | `results.jsonl`, `summary.json`                      |
//! | generate | `output.json`, `output.txt`                          |
//!
//! The run directory is held through a `.lock` file for the duration of a
//! stage.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{
    build_preference_pairs, dpo_stages, sft_train, Conversation, EncodedPair, LoraSet,
    RankedRecord, Role, SftExample, Turn,
};
use crate::checkpoint::{read_header, Checkpoint};
use crate::config::{DTypeChoice, RunConfig};
use crate::data::{quality_filter, read_corpus, read_jsonl, HeuristicScorer, QualityScorer};
use crate::eval::{evaluate_tasks, generate, perplexity, read_tasks, Aggregate};
use crate::model::{count_params, ForwardOptions, Model};
use crate::pretrain::{pretrain, OptimizerState, TokenizedSources};
use crate::tensor::Scalar;
use crate::tokenizer::{remap_embeddings, SpecialTokens, Vocab};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Sft,
    Dpo,
    Remap,
    Eval,
    Generate,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
            Stage::Remap => "remap",
            Stage::Eval => "eval",
            Stage::Generate => "generate",
        }
    }
}

/// Exclusive hold on a run directory; released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir)?;
        let path = run_dir.join(".lock");
        match File::options().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Input(format!(
                "run directory {} is locked by another process ({} exists)",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Runs one stage and returns its output directory.
pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<PathBuf> {
    let errs = cfg.violations();
    if !errs.is_empty() {
        return Err(Error::RunConfig(errs));
    }
    let _lock = RunLock::acquire(&cfg.run_dir)?;
    let dir = cfg.run_dir.join(stage.dir_name());
    std::fs::create_dir_all(&dir)?;
    match cfg.dtype {
        DTypeChoice::F32 => run_typed::<f32>(cfg, stage, &dir)?,
        DTypeChoice::F64 => run_typed::<f64>(cfg, stage, &dir)?,
    }
    Ok(dir)
}

fn run_typed<S: Scalar>(cfg: &RunConfig, stage: Stage, dir: &Path) -> Result<()> {
    match stage {
        Stage::Pretrain => run_pretrain::<S>(cfg, dir),
        Stage::Sft => run_sft::<S>(cfg, dir),
        Stage::Dpo => run_dpo::<S>(cfg, dir),
        Stage::Remap => run_remap::<S>(cfg, dir),
        Stage::Eval => run_eval::<S>(cfg, dir),
        Stage::Generate => run_generate::<S>(cfg, dir),
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref().ok_or_else(|| {
        Error::RunConfig(vec![format!(
            "the [{name}] section is required for this stage"
        )])
    })
}

fn opts(cfg: &RunConfig) -> ForwardOptions {
    ForwardOptions { fp8: cfg.fp8 }
}

fn threads(cfg: &RunConfig) -> usize {
    match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
}

/// Per-purpose seed derived from the run seed.
fn seed_for(cfg: &RunConfig, purpose: u64) -> u64 {
    cfg.seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(purpose)
}

fn config_vocab(cfg: &RunConfig) -> Result<Vocab> {
    match &cfg.tokenizer.vocab {
        None => Ok(Vocab::byte_level()),
        Some(v) => Vocab::load(v, cfg.tokenizer.merges.as_deref(), &cfg.tokenizer.special()),
    }
}

/// Tokenizer attached to a checkpoint (written by `remap`), else the
/// configured one.
fn vocab_for<S>(cfg: &RunConfig, ckpt_path: &Path, ckpt: &Checkpoint<S>) -> Result<Vocab> {
    let Some(tok) = ckpt.meta.get("tokenizer") else {
        return config_vocab(cfg);
    };
    let files: TokenizerFiles = serde_json::from_value(tok.clone())
        .map_err(|e| Error::Checkpoint(format!("bad tokenizer metadata: {e}")))?;
    let base = ckpt_path.parent().unwrap_or(Path::new("."));
    let merges = files.merges.map(|m| base.join(m));
    Vocab::load(
        &base.join(files.vocab),
        merges.as_deref(),
        &cfg.tokenizer.special(),
    )
}

#[derive(Serialize, Deserialize)]
struct TokenizerFiles {
    vocab: String,
    merges: Option<String>,
}

fn check_vocab(vocab: &Vocab, model_vocab: usize) -> Result<()> {
    if vocab.len() != model_vocab {
        return Err(Error::Vocab(format!(
            "tokenizer has {} tokens but the model expects {model_vocab}",
            vocab.len()
        )));
    }
    Ok(())
}

fn load_model<S: Scalar>(cfg: &RunConfig, path: &Path) -> Result<(Model<S>, Vocab)> {
    if !path.is_file() {
        return Err(Error::Input(format!(
            "input checkpoint {} not found (run the earlier stage or set init)",
            path.display()
        )));
    }
    let ck = Checkpoint::<S>::load(path)?;
    let model = ck.model()?;
    let vocab = vocab_for(cfg, path, &ck)?;
    check_vocab(&vocab, model.config.vocab_size)?;
    Ok((model, vocab))
}

fn default_init(cfg: &RunConfig, explicit: &Option<PathBuf>, stages: &[Stage]) -> PathBuf {
    if let Some(p) = explicit {
        return p.clone();
    }
    let candidates: Vec<PathBuf> = stages
        .iter()
        .map(|s| cfg.run_dir.join(s.dir_name()).join("final.bin"))
        .collect();
    candidates
        .iter()
        .find(|p| p.is_file())
        .unwrap_or(&candidates[0])
        .clone()
}

struct JsonlWriter(BufWriter<File>);

impl JsonlWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(path)?)))
    }

    fn write<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, rec)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

fn tokenize_docs(vocab: &Vocab, docs: impl IntoIterator<Item = String>) -> Result<Vec<Vec<usize>>> {
    docs.into_iter()
        .map(|t| vocab.encode_str(&t))
        .filter(|r| r.as_ref().map_or(true, |ids| !ids.is_empty()))
        .collect()
}

fn run_pretrain<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let pre = section(&cfg.pretrain, "pretrain")?;
    let data = section(&cfg.data, "data")?;
    let vocab = config_vocab(cfg)?;
    check_vocab(&vocab, cfg.model.vocab_size)?;

    let mut docs = read_corpus(&data.corpus)?;
    if let Some(th) = data.quality_threshold {
        let scorer = QualityScorer::new(HeuristicScorer::default(), th);
        let before = docs.len();
        docs = quality_filter(docs, &scorer).collect();
        log::info!("quality filter kept {} of {before} documents", docs.len());
    }
    let mut sources: TokenizedSources = BTreeMap::new();
    for d in docs {
        let ids = vocab.encode_str(&d.text)?;
        if !ids.is_empty() {
            sources.entry(d.source).or_default().push(ids);
        }
    }
    let validation = match &data.validation {
        Some(p) => tokenize_docs(&vocab, read_corpus(p)?.into_iter().map(|d| d.text))?,
        None => Vec::new(),
    };

    let mut model = Model::<S>::init(cfg.model.clone(), seed_for(cfg, 1))?;
    let mut state = OptimizerState::new(model.params.tensors());
    let mut log = JsonlWriter::create(&dir.join("log.jsonl"))?;
    let every = pre.checkpoint_every;
    pretrain(
        &mut model,
        &mut state,
        &pre.plan,
        &sources,
        &validation,
        vocab.eos(),
        seed_for(cfg, 2),
        &opts(cfg),
        |rec, m, st| {
            log.write(rec)?;
            if every > 0 && rec.step % every == 0 {
                Checkpoint::from_model(m, Some(st))
                    .save(&dir.join(format!("ckpt-{}.bin", rec.step)))?;
            }
            Ok(())
        },
    )?;
    Checkpoint::from_model(&model, Some(&state)).save(&dir.join("final.bin"))
}

fn run_sft<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let s = section(&cfg.sft, "sft")?;
    let init = default_init(cfg, &s.init, &[Stage::Pretrain]);
    let (mut model, vocab) = load_model::<S>(cfg, &init)?;
    let convs: Vec<Conversation> = read_jsonl(&s.data)?;
    let examples = convs
        .iter()
        .map(|c| SftExample::render(c, &vocab, model.config.max_context))
        .collect::<Result<Vec<_>>>()?;
    let mut log = JsonlWriter::create(&dir.join("log.jsonl"))?;
    sft_train(
        &mut model,
        &examples,
        &s.plan,
        seed_for(cfg, 3),
        &opts(cfg),
        |r| log.write(r),
    )?;
    Checkpoint::from_model(&model, None).save(&dir.join("final.bin"))
}

fn run_dpo<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let d = section(&cfg.dpo, "dpo")?;
    let init = default_init(cfg, &d.init, &[Stage::Sft, Stage::Pretrain]);
    let (model, vocab) = load_model::<S>(cfg, &init)?;
    let ctx = model.config.max_context;
    let mut stages = Vec::new();
    for (i, st) in d.stages.iter().enumerate() {
        let records: Vec<RankedRecord> = read_jsonl(&st.data)?;
        let mut pairs = Vec::new();
        for p in build_preference_pairs(&records, &st.lang) {
            let enc = EncodedPair::encode(&p, &vocab)?;
            if enc.prompt.len() + enc.chosen.len().max(enc.rejected.len()) > ctx {
                log::warn!("dpo stage {i}: pair longer than the context skipped");
                continue;
            }
            pairs.push(enc);
        }
        if pairs.is_empty() {
            return Err(Error::Data(format!(
                "dpo stage {i}: no usable preference pairs"
            )));
        }
        log::info!("dpo stage {i}: {} pairs", pairs.len());
        stages.push((pairs, st.hyper.clone()));
    }
    let mut lora = LoraSet::<S>::init(&model.config, &d.lora, seed_for(cfg, 4))?;
    let mut log = JsonlWriter::create(&dir.join("log.jsonl"))?;
    dpo_stages(
        &model,
        &mut lora,
        &stages,
        seed_for(cfg, 5),
        &opts(cfg),
        |r| log.write(r),
    )?;

    let mut adapter = Checkpoint {
        config: model.config.clone(),
        optimizer: None,
        meta: BTreeMap::new(),
        tensors: lora
            .names()
            .into_iter()
            .zip(lora.tensors().into_iter().cloned())
            .collect(),
    };
    adapter
        .meta
        .insert("lora".into(), serde_json::to_value(&lora.config)?);
    adapter.save(&dir.join("adapter.bin"))?;
    let merged = Model::new(model.config.clone(), lora.merge(&model.params)?)?;
    Checkpoint::from_model(&merged, None).save(&dir.join("final.bin"))
}

fn run_remap<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let r = section(&cfg.remap, "remap")?;
    let init = default_init(cfg, &r.init, &[Stage::Pretrain]);
    let (model, old_vocab) = load_model::<S>(cfg, &init)?;
    let special: SpecialTokens = cfg.tokenizer.special();
    let new_vocab = Vocab::load(&r.vocab, r.merges.as_deref(), &special)?;
    let out = remap_embeddings(
        &old_vocab,
        &new_vocab,
        &model.params.embed,
        &model.params.lm_head,
        r.init_std,
        seed_for(cfg, 6),
    )?;
    log::info!(
        "remap: {} of {} tokens carried over",
        out.matched,
        new_vocab.len()
    );
    let mut config = model.config.clone();
    config.vocab_size = new_vocab.len();
    let mut params = model.params;
    params.embed = out.embedding;
    params.lm_head = out.head;
    let remapped = Model::new(config, params)?;

    let merges = r.merges.as_ref().map(|_| "merges.txt".to_string());
    new_vocab.save(
        &dir.join("vocab.txt"),
        merges.as_ref().map(|m| dir.join(m)).as_deref(),
    )?;
    let mut ck = Checkpoint::from_model(&remapped, None);
    ck.meta.insert(
        "tokenizer".into(),
        serde_json::to_value(TokenizerFiles {
            vocab: "vocab.txt".into(),
            merges,
        })?,
    );
    ck.meta.insert("matched_tokens".into(), out.matched.into());
    ck.save(&dir.join("final.bin"))
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    tasks: Option<Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    perplexity: Option<f64>,
}

fn output_stages() -> [Stage; 3] {
    [Stage::Dpo, Stage::Sft, Stage::Pretrain]
}

fn run_eval<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let e = section(&cfg.eval, "eval")?;
    let init = default_init(cfg, &e.init, &output_stages());
    let (model, vocab) = load_model::<S>(cfg, &init)?;
    let o = opts(cfg);
    let mut summary = EvalSummary {
        checkpoint: init.file_name().map_or(String::new(), |f| {
            let parent = init
                .parent()
                .and_then(|p| p.file_name())
                .map(|p| p.to_string_lossy().into_owned());
            match parent {
                Some(p) => format!("{p}/{}", f.to_string_lossy()),
                None => f.to_string_lossy().into_owned(),
            }
        }),
        tasks: None,
        perplexity: None,
    };
    if let Some(path) = &e.tasks {
        let tasks = read_tasks(path)?;
        let (results, agg) = evaluate_tasks(&model, &vocab, &tasks, &e.settings, &o, threads(cfg))?;
        let mut w = JsonlWriter::create(&dir.join("results.jsonl"))?;
        results.iter().try_for_each(|r| w.write(r))?;
        summary.tasks = Some(agg);
    }
    if let Some(path) = &e.perplexity_corpus {
        let docs = tokenize_docs(&vocab, read_corpus(path)?.into_iter().map(|d| d.text))?;
        summary.perplexity = Some(perplexity(
            &model,
            &docs,
            e.perplexity_seq_len,
            vocab.eos(),
            &o,
        )?);
    }
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(dir.join("summary.json"), text)?;
    Ok(())
}

#[derive(Serialize)]
struct GenerateOutput<'a> {
    prompt: &'a str,
    prompt_tokens: Vec<usize>,
    tokens: Vec<usize>,
    text: String,
}

fn run_generate<S: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let g = section(&cfg.generate, "generate")?;
    let init = default_init(cfg, &g.init, &output_stages());
    let (model, vocab) = load_model::<S>(cfg, &init)?;
    let prompt = if g.chat {
        crate::align::render_prompt(&[Turn::new(Role::User, g.prompt.clone())], &vocab)?
    } else {
        let mut ids = vec![vocab.bos()];
        ids.extend(vocab.encode_str(&g.prompt)?);
        ids
    };
    let mut gen_cfg = g.config.clone();
    gen_cfg.eos = gen_cfg.eos.or(Some(vocab.eos()));
    let mut tokens = generate(&model, &prompt, &gen_cfg, &opts(cfg))?;
    let shown: &[usize] = match tokens.last() {
        Some(&t) if t == vocab.eos() => &tokens[..tokens.len() - 1],
        _ => &tokens,
    };
    let mut text = vocab.decode_lossy(shown)?;
    if g.chat {
        if let Some(i) = text.find(crate::align::chat::END) {
            text.truncate(i);
        }
    }
    std::fs::write(dir.join("output.txt"), &text)?;
    let out = GenerateOutput {
        prompt: &g.prompt,
        prompt_tokens: prompt,
        tokens: std::mem::take(&mut tokens),
        text,
    };
    let mut json = serde_json::to_string_pretty(&out)?;
    json.push('\n');
    std::fs::write(dir.join("output.json"), json)?;
    Ok(())
}

/// Human-readable checkpoint summary: config, every tensor, and the
/// parameter count cross-checked against the config.
pub fn inspect(path: &Path) -> Result<String> {
    let h = read_header(path)?;
    let mut out = String::new();
    out.push_str(&format!("checkpoint: {}\n", path.display()));
    out.push_str(&format!("config: {}\n", serde_json::to_string(&h.config)?));
    if let Some(o) = h.optimizer {
        out.push_str(&format!(
            "optimizer: step {} tokens_seen {}\n",
            o.step, o.tokens_seen
        ));
    }
    for (k, v) in &h.meta {
        out.push_str(&format!("meta.{k}: {v}\n"));
    }
    let mut model_params = 0u64;
    let mut total = 0u64;
    out.push_str(&format!("tensors: {}\n", h.tensors.len()));
    for t in &h.tensors {
        let n: u64 = t.shape.iter().map(|&d| d as u64).product();
        total += n;
        if !t.name.starts_with("optim.") && !t.name.contains(".lora_") {
            model_params += n;
        }
        out.push_str(&format!("  {:<28} {:?} {:?}\n", t.name, t.dtype, t.shape));
    }
    let expected = count_params(&h.config);
    out.push_str(&format!("model parameters: {model_params}\n"));
    out.push_str(&format!("count_params(config): {expected}\n"));
    out.push_str(&format!("stored values: {total}\n"));
    Ok(out)
}
