//! Flat key-value run and eval configuration.
//!
//! Both documents are top-level TOML tables: every key has a default and
//! unknown keys are rejected. `--set key=value` overrides are parsed as TOML
//! values, falling back to a bare string.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ssa_core::attention::{AttnConfig, AttnMode};
use ssa_core::data::{gen_synthetic_corpus_with, tokenize, CorpusKind, CorpusOptions, TokenStream};
use ssa_core::model::{AlignDirection, ModelConfig};
use ssa_core::training::TrainConfig;

use crate::error::{LabError, Result};

/// Environment variable that replaces `out_dir` as the output root.
pub const OUT_ROOT_ENV: &str = "SSA_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub tie_embeddings: bool,

    pub block_size: usize,
    pub top_k: usize,
    pub gate_enabled: bool,

    pub alpha: f64,
    pub p_full: f64,
    pub lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub eval_interval: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// `both`, `sparsity` or `commitment`.
    pub align: String,

    /// Synthetic corpus kind, ignored when `corpus_path` is set.
    pub corpus: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<String>,
    pub corpus_tokens: usize,
    pub doc_len: usize,
    pub data_seed: u64,

    pub out_dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_name: Option<String>,
    /// Checkpoint to continue from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_kv_heads: m.n_kv_heads,
            head_dim: m.head_dim,
            vocab_size: m.vocab_size,
            rope_theta: m.rope_theta,
            norm_eps: m.norm_eps,
            tie_embeddings: m.tie_embeddings,
            block_size: 8,
            top_k: 4,
            gate_enabled: true,
            alpha: t.alpha,
            p_full: t.p_full,
            lr: t.lr,
            total_steps: t.total_steps,
            warmup_steps: t.warmup_steps,
            batch_size: t.batch_size,
            seq_len: t.seq_len,
            seed: t.seed,
            eval_interval: t.eval_interval,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            grad_clip: t.grad_clip,
            align: "both".into(),
            corpus: CorpusKind::KeyValueRecall.as_str().into(),
            corpus_path: None,
            corpus_tokens: 400_000,
            doc_len: 128,
            data_seed: 0,
            out_dir: "runs".into(),
            run_name: None,
            resume: None,
        }
    }
}

pub fn parse_mode(s: &str) -> Result<AttnMode> {
    match s.to_ascii_lowercase().as_str() {
        "full" => Ok(AttnMode::Full),
        "sparse" => Ok(AttnMode::Sparse),
        other => Err(LabError::Config(format!(
            "unknown attention mode `{other}` (expected full or sparse)"
        ))),
    }
}

pub fn parse_align(s: &str) -> Result<AlignDirection> {
    match s {
        "both" => Ok(AlignDirection::Both),
        "sparsity" => Ok(AlignDirection::SparsityOnly),
        "commitment" => Ok(AlignDirection::CommitmentOnly),
        other => Err(LabError::Config(format!(
            "unknown align direction `{other}` (expected both, sparsity or commitment)"
        ))),
    }
}

/// Parses one `key=value` override.
pub fn parse_set(arg: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| {
        LabError::Config(format!("override `{arg}` is not of the form key=value"))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(LabError::Config(format!(
            "override `{arg}` has an empty key"
        )));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Reads `path` (if any), applies overrides and deserializes.
pub fn load_flat<T: DeserializeOwned>(path: Option<&Path>, sets: &[String]) -> Result<T> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?;
            parse_table(&text)?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        let (k, v) = parse_set(s)?;
        table.insert(k, v);
    }
    from_table(table)
}

fn parse_table(text: &str) -> Result<toml::Table> {
    let table: toml::Table = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return Err(LabError::Config(format!(
            "key `{k}` is a table; configs are flat"
        )));
    }
    Ok(table)
}

fn from_table<T: DeserializeOwned>(table: toml::Table) -> Result<T> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| LabError::Config(e.message().to_string()))
}

fn to_text<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("flat config serializes")
}

/// First 12 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))[..12].to_string()
}

impl RunConfig {
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let cfg: Self = load_flat(path, sets)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = from_table(parse_table(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        to_text(self)
    }

    /// Hash of the settings that determine the trained weights.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        c.run_name = None;
        c.resume = None;
        short_hash(c.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train_config()?;
        if self.corpus_path.is_none() {
            CorpusKind::parse(&self.corpus)?;
        }
        if self.eval_interval == 0 {
            return Err(LabError::Config("eval_interval must be positive".into()));
        }
        Ok(())
    }

    pub fn attn_config(&self) -> Result<AttnConfig> {
        Ok(AttnConfig::new(
            self.block_size,
            self.top_k,
            AttnMode::Sparse,
            self.gate_enabled,
        )?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            vocab_size: self.vocab_size,
            rope_theta: self.rope_theta,
            norm_eps: self.norm_eps,
            tie_embeddings: self.tie_embeddings,
            attn: self.attn_config()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            alpha: self.alpha,
            p_full: self.p_full,
            lr: self.lr,
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            seed: self.seed,
            eval_interval: self.eval_interval,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            grad_clip: self.grad_clip,
            align: parse_align(&self.align)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Run directory: the output root (env override first) joined with the
    /// run name, which defaults to the config hash.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUT_ROOT_ENV)
            .map_or_else(|| PathBuf::from(&self.out_dir), PathBuf::from);
        let name = self
            .run_name
            .clone()
            .unwrap_or_else(|| format!("run-{}", self.hash()));
        root.join(name)
    }

    pub fn training_corpus(&self) -> Result<TokenStream> {
        load_corpus(
            &self.corpus,
            self.corpus_path.as_deref(),
            self.corpus_tokens,
            self.doc_len,
            self.data_seed,
            self.vocab_size,
        )
    }
}

pub fn load_corpus(
    kind: &str,
    path: Option<&str>,
    tokens: usize,
    doc_len: usize,
    seed: u64,
    vocab: usize,
) -> Result<TokenStream> {
    let stream = match path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| LabError::Data(format!("{p}: {e}")))?;
            tokenize(&bytes)
        }
        None => gen_synthetic_corpus_with(
            CorpusKind::parse(kind)?,
            tokens,
            seed,
            CorpusOptions {
                doc_len,
                pairs_per_doc: 0,
            },
        )
        .map_err(|e| LabError::Data(e.to_string()))?,
    };
    stream
        .validate(vocab)
        .map_err(|e| LabError::Data(e.to_string()))?;
    Ok(stream)
}

pub const EVAL_TASKS: [&str; 6] = [
    "ppl",
    "sliding-ppl",
    "rf-sweep",
    "extrapolation",
    "niah",
    "metrics",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub checkpoints: Vec<String>,
    /// Subset of `EVAL_TASKS`.
    pub tasks: Vec<String>,
    pub modes: Vec<String>,
    /// Corpus kind; the checkpoint's when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<String>,
    pub corpus_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doc_len: Option<usize>,
    /// Corpus seed; one past the training data seed when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    /// Context length; the training length when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    /// Sliding-window stride; `min(256, seq_len)` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Sparse config override (block size, top-k) for ppl and metrics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    pub rf_ks: Vec<usize>,
    /// Context lengths; `[T, 2T, 4T]` when empty.
    pub extrap_lengths: Vec<usize>,
    /// Needle context lengths; `[T]` when empty.
    pub niah_lengths: Vec<usize>,
    pub niah_depths: Vec<f64>,
    pub niah_seed: u64,
    pub metrics_samples: usize,
    pub sink_windows: usize,
    pub out_dir: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            checkpoints: Vec::new(),
            tasks: vec!["ppl".into(), "metrics".into()],
            modes: vec!["full".into(), "sparse".into()],
            corpus: None,
            corpus_path: None,
            corpus_tokens: 8192,
            doc_len: None,
            data_seed: None,
            seq_len: None,
            stride: None,
            block_size: None,
            top_k: None,
            rf_ks: vec![1, 2, 4, 8, 16],
            extrap_lengths: Vec::new(),
            niah_lengths: Vec::new(),
            niah_depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            niah_seed: 0,
            metrics_samples: 8,
            sink_windows: 4,
            out_dir: "reports".into(),
        }
    }
}

impl EvalConfig {
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let cfg: Self = load_flat(path, sets)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self
            .tasks
            .iter()
            .find(|t| !EVAL_TASKS.contains(&t.as_str()))
        {
            return Err(LabError::Config(format!(
                "unknown eval task `{t}` (expected one of {})",
                EVAL_TASKS.join(", ")
            )));
        }
        if self.modes.is_empty() {
            return Err(LabError::Config("modes must not be empty".into()));
        }
        self.parsed_modes()?;
        if self.metrics_samples == 0 {
            return Err(LabError::Config("metrics_samples must be positive".into()));
        }
        if self.niah_depths.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(LabError::Config("niah_depths must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn parsed_modes(&self) -> Result<Vec<AttnMode>> {
        self.modes.iter().map(|m| parse_mode(m)).collect()
    }

    pub fn wants(&self, task: &str) -> bool {
        self.tasks.iter().any(|t| t == task)
    }

    pub fn to_toml(&self) -> String {
        to_text(self)
    }

    /// Hash of the evaluation settings, checkpoint paths and output excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.checkpoint = None;
        c.checkpoints.clear();
        c.out_dir.clear();
        short_hash(c.to_toml().as_bytes())
    }

    pub fn out_root(&self) -> PathBuf {
        std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from(&self.out_dir), PathBuf::from)
    }
}
