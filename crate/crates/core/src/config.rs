//! Run configuration, one TOML file per run. Relative paths resolve
//! against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{DpoHyper, LoraConfig, SftPlan};
use crate::eval::EvalSettings;
use crate::eval::GenerateConfig;
use crate::model::ModelConfig;
use crate::pretrain::TrainPlan;
use crate::tokenizer::SpecialTokens;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeChoice {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    /// Base64 token per line; absent selects the byte-level vocabulary.
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub bos: Option<String>,
    pub eos: Option<String>,
    pub pad: Option<String>,
}

impl TokenizerSection {
    pub fn special(&self) -> SpecialTokens {
        let d = SpecialTokens::default();
        SpecialTokens {
            bos: self.bos.as_ref().map_or(d.bos, |s| s.as_bytes().to_vec()),
            eos: self.eos.as_ref().map_or(d.eos, |s| s.as_bytes().to_vec()),
            pad: self.pad.as_ref().map_or(d.pad, |s| s.as_bytes().to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// JSONL `{"text", "source"}` records.
    pub corpus: PathBuf,
    /// Held-out JSONL documents for validation loss.
    pub validation: Option<PathBuf>,
    /// Documents scoring below this under the heuristic scorer are dropped.
    pub quality_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(flatten)]
    pub plan: TrainPlan,
    /// Write `ckpt-<step>.bin` every this many steps (0: final only).
    #[serde(default)]
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    /// JSONL `{"turns": [...]}` records.
    pub data: PathBuf,
    /// Defaults to the pre-training output.
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub plan: SftPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoStageSection {
    /// JSONL `{"prompt_turns", "answers", "lang"}` records.
    pub data: PathBuf,
    #[serde(default = "default_lang")]
    pub lang: String,
    #[serde(flatten)]
    pub hyper: DpoHyper,
}

fn default_lang() -> String {
    "en".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoSection {
    /// Defaults to the SFT output.
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub lora: LoraConfig,
    pub stages: Vec<DpoStageSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemapSection {
    /// Defaults to the pre-training output.
    pub init: Option<PathBuf>,
    pub vocab: PathBuf,
    pub merges: Option<PathBuf>,
    #[serde(default = "default_remap_std")]
    pub init_std: f64,
}

fn default_remap_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Defaults to the newest of dpo, sft, pretrain outputs.
    pub init: Option<PathBuf>,
    pub tasks: Option<PathBuf>,
    /// JSONL corpus scored for perplexity.
    pub perplexity_corpus: Option<PathBuf>,
    #[serde(default = "default_ppl_len")]
    pub perplexity_seq_len: usize,
    #[serde(flatten)]
    pub settings: EvalSettings,
}

fn default_ppl_len() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub init: Option<PathBuf>,
    pub prompt: String,
    /// Wrap the prompt as a single user turn of the chat template.
    #[serde(default)]
    pub chat: bool,
    #[serde(flatten)]
    pub config: GenerateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dtype: DTypeChoice,
    #[serde(default)]
    pub fp8: bool,
    pub run_dir: PathBuf,
    /// Worker threads for evaluation and reference scoring (0: all cores).
    #[serde(default)]
    pub threads: usize,
    pub model: ModelConfig,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    pub data: Option<DataSection>,
    pub pretrain: Option<PretrainSection>,
    pub sft: Option<SftSection>,
    pub dpo: Option<DpoSection>,
    pub remap: Option<RemapSection>,
    pub eval: Option<EvalSection>,
    pub generate: Option<GenerateSection>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::RunConfig(vec![e.to_string()]))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Parses and validates; every violation is reported at once.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::RunConfig(vec![format!("cannot read {}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::from_toml(&text, base)?;
        let errs = cfg.violations();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::RunConfig(errs))
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.run_dir);
        resolve_opt(base, &mut self.tokenizer.vocab);
        resolve_opt(base, &mut self.tokenizer.merges);
        if let Some(d) = &mut self.data {
            resolve(base, &mut d.corpus);
            resolve_opt(base, &mut d.validation);
        }
        if let Some(s) = &mut self.sft {
            resolve(base, &mut s.data);
            resolve_opt(base, &mut s.init);
        }
        if let Some(d) = &mut self.dpo {
            resolve_opt(base, &mut d.init);
            d.stages.iter_mut().for_each(|s| resolve(base, &mut s.data));
        }
        if let Some(r) = &mut self.remap {
            resolve_opt(base, &mut r.init);
            resolve(base, &mut r.vocab);
            resolve_opt(base, &mut r.merges);
        }
        if let Some(e) = &mut self.eval {
            resolve_opt(base, &mut e.init);
            resolve_opt(base, &mut e.tasks);
            resolve_opt(base, &mut e.perplexity_corpus);
        }
        if let Some(g) = &mut self.generate {
            resolve_opt(base, &mut g.init);
        }
    }

    /// Every problem with the configuration, including input files that do
    /// not exist. Checkpoints chained from earlier stages are checked when
    /// the consuming stage starts.
    pub fn violations(&self) -> Vec<String> {
        let mut errs: Vec<String> = self
            .model
            .violations()
            .into_iter()
            .map(|e| format!("model: {e}"))
            .collect();
        let mut need = |label: &str, p: &Path| {
            if !p.is_file() {
                errs.push(format!("{label}: file {} not found", p.display()));
            }
        };
        if let Some(v) = &self.tokenizer.vocab {
            need("tokenizer.vocab", v);
        }
        if let Some(m) = &self.tokenizer.merges {
            need("tokenizer.merges", m);
        }
        if let Some(d) = &self.data {
            need("data.corpus", &d.corpus);
            if let Some(v) = &d.validation {
                need("data.validation", v);
            }
        }
        if let Some(s) = &self.sft {
            need("sft.data", &s.data);
            if let Some(i) = &s.init {
                need("sft.init", i);
            }
        }
        if let Some(d) = &self.dpo {
            for (i, s) in d.stages.iter().enumerate() {
                need(&format!("dpo.stages[{i}].data"), &s.data);
            }
            if let Some(i) = &d.init {
                need("dpo.init", i);
            }
        }
        if let Some(r) = &self.remap {
            need("remap.vocab", &r.vocab);
            if let Some(m) = &r.merges {
                need("remap.merges", m);
            }
            if let Some(i) = &r.init {
                need("remap.init", i);
            }
        }
        if let Some(e) = &self.eval {
            if let Some(t) = &e.tasks {
                need("eval.tasks", t);
            }
            if let Some(c) = &e.perplexity_corpus {
                need("eval.perplexity_corpus", c);
            }
            if let Some(i) = &e.init {
                need("eval.init", i);
            }
        }
        if let Some(i) = self.generate.as_ref().and_then(|g| g.init.as_ref()) {
            need("generate.init", i);
        }

        if self.tokenizer.merges.is_some() && self.tokenizer.vocab.is_none() {
            errs.push("tokenizer.merges given without tokenizer.vocab".into());
        }
        if let Some(p) = &self.pretrain {
            errs.extend(
                p.plan
                    .violations()
                    .into_iter()
                    .map(|e| format!("pretrain: {e}")),
            );
            for (i, s) in p.plan.stages.iter().enumerate() {
                if s.seq_len > self.model.max_context + 1 {
                    errs.push(format!(
                        "pretrain: stage {i} seq_len {} exceeds max_context + 1 = {}",
                        s.seq_len,
                        self.model.max_context + 1
                    ));
                }
            }
            if self.data.is_none() {
                errs.push("pretrain: a [data] section is required".into());
            }
        }
        if let Some(s) = &self.sft {
            errs.extend(s.plan.violations().into_iter().map(|e| format!("sft: {e}")));
        }
        if let Some(d) = &self.dpo {
            if d.stages.is_empty() {
                errs.push("dpo: at least one stage is required".into());
            }
            if d.lora.rank == 0 {
                errs.push("dpo: lora.rank must be at least 1".into());
            }
            for (i, s) in d.stages.iter().enumerate() {
                errs.extend(
                    s.hyper
                        .violations()
                        .into_iter()
                        .map(|e| format!("dpo.stages[{i}]: {e}")),
                );
            }
        }
        if let Some(r) = &self.remap {
            if !(r.init_std > 0.0) {
                errs.push(format!(
                    "remap: init_std must be positive, got {}",
                    r.init_std
                ));
            }
        }
        if let Some(e) = &self.eval {
            if e.tasks.is_none() && e.perplexity_corpus.is_none() {
                errs.push("eval: set tasks, perplexity_corpus, or both".into());
            }
            if e.perplexity_seq_len < 2 || e.perplexity_seq_len > self.model.max_context + 1 {
                errs.push(format!(
                    "eval: perplexity_seq_len must lie in [2, {}]",
                    self.model.max_context + 1
                ));
            }
        }
        errs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
run_dir = "out"
seed = 3

[model]
hidden_size = 32
intermediate_size = 64
n_layers = 2
n_heads = 4
n_kv_heads = 2
vocab_size = 259
max_context = 64
"#;

    #[test]
    fn paths_resolve_against_the_config_dir() {
        let cfg = RunConfig::from_toml(MINIMAL, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.run_dir, Path::new("/cfg/out"));
        assert_eq!(cfg.dtype, DTypeChoice::F64);
        assert!(cfg.violations().is_empty());
    }

    #[test]
    fn every_violation_is_listed() {
        let text = MINIMAL.replace("n_kv_heads = 2", "n_kv_heads = 3")
            + r#"
[data]
corpus = "missing.jsonl"
"#;
        let cfg = RunConfig::from_toml(&text, Path::new("/nowhere")).unwrap();
        let errs = cfg.violations();
        assert!(errs.iter().any(|e| e.contains("n_kv_heads")), "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("missing.jsonl")), "{errs:?}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("seed = 3", "seed = 3\nsed = 4");
        assert!(RunConfig::from_toml(&text, Path::new(".")).is_err());
    }
}
