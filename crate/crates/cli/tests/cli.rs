//! Drives the `danube` binary over copies of the tiny fixture run.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use danube::checkpoint::{read_header, Checkpoint};
use danube::config::RunConfig;
use danube::model::{count_params, ForwardOptions, ModelConfig};
use danube::tokenizer::{SpecialTokens, Vocab};

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny");
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
    }
    dir
}

fn danube(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_danube"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn run_dir(dir: &Path) -> PathBuf {
    dir.join("run")
}

#[test]
fn pretrain_writes_checkpoints_log_and_inspectable_weights() {
    let dir = fixture();
    let cfg = dir.path().join("run.toml");
    ok(&danube(&["pretrain"], &cfg));
    let out = run_dir(dir.path()).join("pretrain");
    let log = std::fs::read_to_string(out.join("log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!records.is_empty());
    assert!(records.iter().any(|r| r["val_loss"].is_number()));
    let seq_lens: Vec<u64> = records
        .iter()
        .map(|r| r["seq_len"].as_u64().unwrap())
        .collect();
    assert!(
        seq_lens.windows(2).all(|w| w[0] <= w[1]),
        "curriculum must not shrink: {seq_lens:?}"
    );
    let ckpts: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt-"))
        .collect();
    assert!(!ckpts.is_empty());

    let final_path = out.join("final.bin");
    let header = read_header(&final_path).unwrap();
    assert!(header.optimizer.is_some());
    let report = Command::new(env!("CARGO_BIN_EXE_danube"))
        .arg("inspect")
        .arg(&final_path)
        .output()
        .unwrap();
    ok(&report);
    let text = String::from_utf8(report.stdout).unwrap();
    let expected = count_params(&header.config);
    assert!(
        text.contains(&format!("model parameters: {expected}")),
        "{text}"
    );
    assert!(text.contains(&format!("count_params(config): {expected}")));
}

#[test]
fn generate_is_repeatable() {
    let dir = fixture();
    let cfg = dir.path().join("run.toml");
    ok(&danube(&["pretrain"], &cfg));
    ok(&danube(&["generate"], &cfg));
    let path = run_dir(dir.path()).join("generate/output.json");
    let first = std::fs::read(&path).unwrap();
    ok(&danube(&["generate"], &cfg));
    assert_eq!(std::fs::read(&path).unwrap(), first);
    let out: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert!(out["tokens"].as_array().unwrap().len() <= 24);
}

#[test]
fn remap_output_loads_with_the_new_vocabulary() {
    let dir = fixture();
    let cfg = dir.path().join("run.toml");
    ok(&danube(&["pretrain"], &cfg));
    ok(&danube(&["remap"], &cfg));
    let out = run_dir(dir.path()).join("remap");
    let special = SpecialTokens {
        bos: b"<|bos|>".to_vec(),
        eos: b"<|eos|>".to_vec(),
        pad: b"<|pad|>".to_vec(),
    };
    let vocab = Vocab::load(
        &out.join("vocab.txt"),
        Some(&out.join("merges.txt")),
        &special,
    )
    .unwrap();
    let model = Checkpoint::<f64>::load(&out.join("final.bin"))
        .unwrap()
        .model()
        .unwrap();
    assert_eq!(model.config.vocab_size, vocab.len());
    let ids = vocab.encode_str("<|user|>hello<|end|>").unwrap();
    let logits = model.forward(&ids, &ForwardOptions::default()).unwrap();
    assert!(logits.data().iter().all(|x| x.is_finite()));
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = fixture();
    let cfg = dir.path().join("run.toml");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("n_kv_heads = 2", "n_kv_heads = 3")
        .replace("corpus = \"corpus.jsonl\"", "corpus = \"missing.jsonl\"");
    std::fs::write(&cfg, text).unwrap();
    let out = danube(&["pretrain"], &cfg);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("invalid configuration"), "{err}");
    assert!(err.contains("n_kv_heads"), "{err}");
    assert!(err.contains("missing.jsonl"), "{err}");
    assert!(!run_dir(dir.path()).join("pretrain").exists());
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = fixture();
    let cfg = dir.path().join("run.toml");
    let run = run_dir(dir.path());
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "").unwrap();
    let out = danube(&["pretrain"], &cfg);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    std::fs::remove_file(run.join(".lock")).unwrap();
    ok(&danube(&["pretrain"], &cfg));
    assert!(!run.join(".lock").exists());
}

#[test]
fn seed_override_changes_the_run() {
    let a = fixture();
    let b = fixture();
    ok(&danube(&["pretrain"], &a.path().join("run.toml")));
    ok(&danube(
        &["pretrain", "--seed", "8"],
        &b.path().join("run.toml"),
    ));
    let la = std::fs::read(run_dir(a.path()).join("pretrain/log.jsonl")).unwrap();
    let lb = std::fs::read(run_dir(b.path()).join("pretrain/log.jsonl")).unwrap();
    assert_ne!(la, lb);
}

#[test]
fn shipped_full_scale_configs_are_consistent() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for (file, shape) in [
        ("danube-1.8b.toml", ModelConfig::danube_1_8b()),
        ("danube2-1.8b.toml", ModelConfig::danube2_1_8b()),
    ] {
        let text = std::fs::read_to_string(dir.join(file)).unwrap();
        let cfg = RunConfig::from_toml(&text, &dir).unwrap();
        assert_eq!(cfg.model, shape, "{file}");
        assert_eq!(count_params(&cfg.model), 1_831_201_280);
        // Data files are placeholders; everything else must validate.
        let errs: Vec<String> = cfg
            .violations()
            .into_iter()
            .filter(|e| !e.contains("not found"))
            .collect();
        assert!(errs.is_empty(), "{file}: {errs:?}");
        let plan = &cfg.pretrain.as_ref().unwrap().plan;
        let budget: u64 = plan.stages.iter().map(|s| s.token_budget).sum();
        assert_eq!(budget, plan.schedule.total_tokens, "{file}");
    }
}
