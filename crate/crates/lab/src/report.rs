//! Evaluation and comparison reports.
//!
//! `eval` writes `eval-<ckpt>-<cfg>.csv`, a JSON summary next to it and
//! `metrics-<ckpt>-<cfg>.csv` with per-layer and per-head diagnostics.
//! `compare` writes `compare-<cfg>.csv/.json` with one row per checkpoint per
//! mode. `<ckpt>` is the checkpoint file hash and `<cfg>` the eval config
//! hash, both 12 hex digits.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ssa_core::attention::{AttnConfig, AttnMode};
use ssa_core::data::TokenStream;
use ssa_core::eval::{
    context_extrapolation, niah_grid, niah_score, perplexity, rf_sweep, sliding_window_ppl, EvalRow,
};
use ssa_core::metrics::{sweep_metrics, MetricsRecord};
use ssa_core::model::Model;

use crate::checkpoint::{checkpoint_id, Checkpoint};
use crate::config::{load_corpus, EvalConfig, RunConfig};
use crate::error::{LabError, Result};

/// A loaded checkpoint with its provenance.
pub struct Subject {
    pub path: PathBuf,
    pub id: String,
    pub run: RunConfig,
    pub run_hash: String,
    pub model: Model<f32>,
}

impl Subject {
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            id: checkpoint_id(path)?,
            run: ckpt.config()?,
            run_hash: ckpt.config_hash(),
            model: ckpt.model()?,
        })
    }

    /// The sparse config used for evaluation: the trained one with any
    /// block-size or top-k override applied.
    pub fn sparse_config(&self, ev: &EvalConfig) -> Result<AttnConfig> {
        let base = self.model.config.attn;
        Ok(AttnConfig::new(
            ev.block_size.unwrap_or(base.block_size),
            ev.top_k.unwrap_or(base.top_k),
            AttnMode::Sparse,
            base.gate_enabled,
        )?)
    }

    /// Evaluation context length.
    pub fn seq_len(&self, ev: &EvalConfig) -> usize {
        ev.seq_len.unwrap_or(self.run.seq_len)
    }
}

/// Evaluation corpus; defaults come from the training config of `reference`.
pub fn eval_corpus(ev: &EvalConfig, reference: &RunConfig) -> Result<TokenStream> {
    load_corpus(
        ev.corpus.as_deref().unwrap_or(&reference.corpus),
        ev.corpus_path
            .as_deref()
            .or(reference.corpus_path.as_deref()),
        ev.corpus_tokens,
        ev.doc_len.unwrap_or(reference.doc_len),
        ev.data_seed.unwrap_or(reference.data_seed.wrapping_add(1)),
        reference.vocab_size,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub checkpoint: String,
    pub run_config: String,
    pub eval_config: String,
    pub seed: u64,
    pub task: String,
    pub label: String,
    pub mode: String,
    pub block_size: usize,
    pub top_k: usize,
    pub gate: bool,
    pub context_len: usize,
    pub stride: Option<usize>,
    pub ppl: Option<f64>,
    pub niah: Option<f64>,
    pub entropy: Option<f64>,
    pub sparsity: Option<f64>,
    pub sink_mass: Option<f64>,
    pub logit_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub checkpoint: String,
    pub mode: String,
    pub block_size: usize,
    pub top_k: usize,
    /// `global`, `layer` or `head`.
    pub scope: String,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub entropy: f64,
    pub sparsity: f64,
    pub sink_mass: f64,
    pub logit_kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NiahCell {
    pub mode: String,
    pub top_k: Option<usize>,
    pub context_len: usize,
    pub depth: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub checkpoint_path: String,
    pub run_config: String,
    pub eval_config: String,
    pub eval_config_text: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub metrics: Vec<MetricsRow>,
    pub niah_cells: Vec<NiahCell>,
}

#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub report: EvalReport,
    pub csv: PathBuf,
    pub json: PathBuf,
    pub metrics_csv: Option<PathBuf>,
}

struct RowBase<'a> {
    subject: &'a Subject,
    eval_hash: &'a str,
}

impl RowBase<'_> {
    fn row(
        &self,
        task: &str,
        label: impl Into<String>,
        mode: AttnMode,
        cfg: &AttnConfig,
        len: usize,
    ) -> ReportRow {
        ReportRow {
            checkpoint: self.subject.id.clone(),
            run_config: self.subject.run_hash.clone(),
            eval_config: self.eval_hash.to_string(),
            seed: self.subject.run.seed,
            task: task.into(),
            label: label.into(),
            mode: mode.as_str().into(),
            block_size: cfg.block_size,
            top_k: cfg.top_k,
            gate: cfg.gate_enabled,
            context_len: len,
            stride: None,
            ppl: None,
            niah: None,
            entropy: None,
            sparsity: None,
            sink_mass: None,
            logit_kl: None,
        }
    }

    fn row_from_eval(&self, task: &str, r: &EvalRow) -> ReportRow {
        ReportRow {
            ppl: Some(r.ppl),
            niah: r.niah,
            sink_mass: r.sink_mass,
            ..self.row(task, r.label.clone(), r.mode, &r.attn, r.context_len)
        }
    }
}

/// The first `n` length-`t` windows of the stream.
pub fn metric_samples(stream: &TokenStream, t: usize, n: usize) -> Result<Vec<Vec<u32>>> {
    let out: Vec<Vec<u32>> = stream
        .tokens
        .chunks_exact(t)
        .take(n)
        .map(<[u32]>::to_vec)
        .collect();
    if out.is_empty() {
        return Err(LabError::Data(format!(
            "corpus shorter than one {t}-token window"
        )));
    }
    Ok(out)
}

/// Perplexity as reported in both `eval` and `compare`.
pub fn ppl_for(
    subject: &Subject,
    stream: &TokenStream,
    t: usize,
    mode: AttnMode,
    cfg: AttnConfig,
) -> Result<f64> {
    Ok(perplexity(
        &subject.model,
        &stream.tokens,
        t,
        mode,
        Some(cfg),
    )?)
}

/// Attention diagnostics as reported in both `eval` and `compare`.
pub fn metrics_for(
    subject: &Subject,
    samples: &[Vec<u32>],
    mode: AttnMode,
    cfg: AttnConfig,
) -> Result<MetricsRecord> {
    let mut recs = sweep_metrics(&subject.model, samples, &[cfg], mode)?;
    Ok(recs.remove(0))
}

fn metrics_rows(id: &str, mode: AttnMode, rec: &MetricsRecord) -> Vec<MetricsRow> {
    let base = |scope: &str, layer, head, s: &ssa_core::metrics::AttnStats, kl| MetricsRow {
        checkpoint: id.into(),
        mode: mode.as_str().into(),
        block_size: rec.meta.block_size,
        top_k: rec.meta.top_k,
        scope: scope.into(),
        layer,
        head,
        entropy: s.entropy,
        sparsity: s.sparsity,
        sink_mass: s.sink,
        logit_kl: kl,
    };
    let mut out = vec![base("global", None, None, &rec.global, rec.logit_kl)];
    out.extend(
        rec.layers
            .iter()
            .enumerate()
            .map(|(l, s)| base("layer", Some(l), None, s, None)),
    );
    out.extend(
        rec.heads
            .iter()
            .map(|h| base("head", Some(h.layer), Some(h.head), &h.stats, None)),
    );
    out
}

/// Runs the requested evaluation tasks on one checkpoint and writes the
/// report files under `out_root`.
pub fn run_eval(ev: &EvalConfig, ckpt: &Path, out_root: &Path) -> Result<EvalOutputs> {
    ev.validate()?;
    let subject = Subject::load(ckpt)?;
    let eval_hash = ev.hash();
    let base = RowBase {
        subject: &subject,
        eval_hash: &eval_hash,
    };
    let model = &subject.model;
    let stream = eval_corpus(ev, &subject.run)?;
    let t = subject.seq_len(ev);
    let sparse = subject.sparse_config(ev)?;
    let modes = ev.parsed_modes()?;
    let needles = niah_grid(
        &if ev.niah_lengths.is_empty() {
            vec![t]
        } else {
            ev.niah_lengths.clone()
        },
        &ev.niah_depths,
        ev.niah_seed,
    );

    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    let mut cells = Vec::new();

    if ev.wants("ppl") {
        for &mode in &modes {
            rows.push(ReportRow {
                ppl: Some(ppl_for(&subject, &stream, t, mode, sparse)?),
                ..base.row("ppl", "ppl", mode, &sparse, t)
            });
        }
    }
    if ev.wants("sliding-ppl") {
        let stride = ev.stride.unwrap_or(256.min(t));
        for &mode in &modes {
            let ppl = sliding_window_ppl(model, &stream.tokens, t, stride, mode, Some(sparse))?;
            rows.push(ReportRow {
                stride: Some(stride),
                ppl: Some(ppl),
                ..base.row("sliding-ppl", format!("stride={stride}"), mode, &sparse, t)
            });
        }
    }
    if ev.wants("rf-sweep") {
        for r in rf_sweep(
            model,
            &stream.tokens,
            t,
            &ev.rf_ks,
            sparse.block_size,
            Some(&needles),
        )? {
            rows.push(base.row_from_eval("rf-sweep", &r));
        }
    }
    if ev.wants("extrapolation") {
        let lengths = if ev.extrap_lengths.is_empty() {
            vec![t, 2 * t, 4 * t]
        } else {
            ev.extrap_lengths.clone()
        };
        for r in context_extrapolation(model, &stream.tokens, &lengths, ev.sink_windows)? {
            rows.push(base.row_from_eval("extrapolation", &r));
        }
    }
    if ev.wants("niah") {
        for &mode in &modes {
            let res = niah_score(model, &needles, mode, Some(sparse))?;
            cells.extend(res.cells.iter().map(|&(len, depth, correct)| NiahCell {
                mode: mode.as_str().into(),
                top_k: (mode == AttnMode::Sparse).then_some(sparse.top_k),
                context_len: len,
                depth,
                correct,
            }));
            rows.push(ReportRow {
                niah: Some(res.accuracy),
                ..base.row(
                    "niah",
                    format!("cells={}", res.cells.len()),
                    mode,
                    &sparse,
                    t,
                )
            });
        }
    }
    if ev.wants("metrics") {
        let samples = metric_samples(&stream, t, ev.metrics_samples)?;
        for &mode in &modes {
            let rec = metrics_for(&subject, &samples, mode, sparse)?;
            rows.push(ReportRow {
                entropy: Some(rec.global.entropy),
                sparsity: Some(rec.global.sparsity),
                sink_mass: Some(rec.global.sink),
                logit_kl: rec.logit_kl,
                ..base.row(
                    "metrics",
                    format!("samples={}", rec.meta.samples),
                    mode,
                    &sparse,
                    t,
                )
            });
            metrics.extend(metrics_rows(&subject.id, mode, &rec));
        }
    }

    fs::create_dir_all(out_root)
        .map_err(LabError::io(format!("creating {}", out_root.display())))?;
    let stem = format!("{}-{}", subject.id, eval_hash);
    let csv_path = out_root.join(format!("eval-{stem}.csv"));
    write_csv(&csv_path, &rows)?;
    let metrics_csv = if metrics.is_empty() {
        None
    } else {
        let p = out_root.join(format!("metrics-{stem}.csv"));
        write_csv(&p, &metrics)?;
        Some(p)
    };
    let report = EvalReport {
        checkpoint: subject.id.clone(),
        checkpoint_path: subject.path.display().to_string(),
        run_config: subject.run_hash.clone(),
        eval_config: eval_hash,
        eval_config_text: ev.to_toml(),
        seed: subject.run.seed,
        rows,
        metrics,
        niah_cells: cells,
    };
    let json = out_root.join(format!("eval-{stem}.json"));
    write_json(&json, &report)?;
    Ok(EvalOutputs {
        report,
        csv: csv_path,
        json,
        metrics_csv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub checkpoint: String,
    pub label: String,
    pub run_config: String,
    pub seed: u64,
    pub alpha: f64,
    pub p_full: f64,
    pub mode: String,
    pub block_size: usize,
    pub top_k: usize,
    pub context_len: usize,
    pub ppl: f64,
    pub sparsity: f64,
    pub entropy: f64,
    pub logit_kl: f64,
    pub sink_mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub eval_config: String,
    pub eval_config_text: String,
    pub rows: Vec<CompareRow>,
}

#[derive(Debug, Clone)]
pub struct CompareOutputs {
    pub report: CompareReport,
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Readable name for a checkpoint: the run name if set, else the file path.
fn subject_label(s: &Subject) -> String {
    s.run
        .run_name
        .clone()
        .unwrap_or_else(|| s.path.display().to_string())
}

/// Joint PPL / sparsity / entropy / KL / sink table. The corpus defaults
/// come from the first checkpoint so every row sees the same tokens.
pub fn run_compare(ev: &EvalConfig, ckpts: &[PathBuf], out_root: &Path) -> Result<CompareOutputs> {
    ev.validate()?;
    if ckpts.len() < 2 {
        return Err(LabError::Config(format!(
            "compare needs at least 2 checkpoints, got {}",
            ckpts.len()
        )));
    }
    let subjects = ckpts
        .iter()
        .map(|p| Subject::load(p))
        .collect::<Result<Vec<_>>>()?;
    let vocab = subjects[0].model.config.vocab_size;
    if let Some(s) = subjects.iter().find(|s| s.model.config.vocab_size != vocab) {
        return Err(LabError::Config(format!(
            "checkpoint {} has vocabulary {} but {} has {vocab}",
            s.path.display(),
            s.model.config.vocab_size,
            subjects[0].path.display()
        )));
    }
    let stream = eval_corpus(ev, &subjects[0].run)?;
    let t = subjects[0].seq_len(ev);
    let samples = metric_samples(&stream, t, ev.metrics_samples)?;
    let modes = ev.parsed_modes()?;

    let mut rows = Vec::new();
    for s in &subjects {
        let sparse = s.sparse_config(ev)?;
        for &mode in &modes {
            let rec = metrics_for(s, &samples, mode, sparse)?;
            rows.push(CompareRow {
                checkpoint: s.id.clone(),
                label: subject_label(s),
                run_config: s.run_hash.clone(),
                seed: s.run.seed,
                alpha: s.run.alpha,
                p_full: s.run.p_full,
                mode: mode.as_str().into(),
                block_size: sparse.block_size,
                top_k: sparse.top_k,
                context_len: t,
                ppl: ppl_for(s, &stream, t, mode, sparse)?,
                sparsity: rec.global.sparsity,
                entropy: rec.global.entropy,
                logit_kl: rec.logit_kl.unwrap_or(0.0),
                sink_mass: rec.global.sink,
            });
        }
    }

    fs::create_dir_all(out_root)
        .map_err(LabError::io(format!("creating {}", out_root.display())))?;
    let eval_hash = ev.hash();
    let csv = out_root.join(format!("compare-{eval_hash}.csv"));
    write_csv(&csv, &rows)?;
    let report = CompareReport {
        eval_config: eval_hash.clone(),
        eval_config_text: ev.to_toml(),
        rows,
    };
    let json = out_root.join(format!("compare-{eval_hash}.json"));
    write_json(&json, &report)?;
    Ok(CompareOutputs { report, csv, json })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(LabError::io(format!("writing {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(LabError::io(format!("writing {}", path.display())))
}
