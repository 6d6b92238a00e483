//! Training runs: run directory layout, step log and periodic checkpoints.
//!
//! A run directory holds `run.toml` (the exact config), `steps.jsonl` (one
//! JSON object per optimizer step), `ckpt-NNNNNN.bin` every `eval_interval`
//! steps and `final.bin`.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use ssa_core::data::windows;
use ssa_core::model::Model;
use ssa_core::training::{StepRecord, Trainer, WindowSampler};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{LabError, Result};

pub const RUN_CONFIG_FILE: &str = "run.toml";
pub const STEP_LOG_FILE: &str = "steps.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLine {
    pub step: u64,
    pub mode: String,
    pub ce: f64,
    pub align: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl StepLine {
    fn new(r: &StepRecord, wall_ms: f64) -> Self {
        Self {
            step: r.step,
            mode: r.mode.as_str().into(),
            ce: r.ce,
            align: r.align,
            total: r.total,
            lr: r.lr,
            grad_norm: r.grad_norm,
            wall_ms,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Steps executed by this invocation.
    pub steps_run: u64,
    pub last: Option<StepLine>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.bin")
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepLine>> {
    let f = File::open(path).map_err(LabError::io(format!("reading {}", path.display())))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(LabError::io(format!("reading {}", path.display())))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

fn start_trainer(cfg: &RunConfig) -> Result<Trainer<f32>> {
    let Some(resume) = &cfg.resume else {
        let model = Model::<f32>::new(cfg.model_config()?, cfg.seed)?;
        return Ok(Trainer::new(model, cfg.train_config()?)?);
    };
    let ckpt = Checkpoint::load(Path::new(resume))?;
    let saved = ckpt.config()?;
    if saved.hash() != cfg.hash() {
        return Err(LabError::Config(format!(
            "cannot resume from {resume}: it was trained with config {} but this run is {}",
            saved.hash(),
            cfg.hash()
        )));
    }
    if ckpt.optimizer.is_none() {
        return Err(LabError::Checkpoint {
            path: resume.into(),
            reason: "no optimizer state to resume from".into(),
        });
    }
    ckpt.trainer()
}

/// Keeps log lines for steps before `step`, dropping anything a previous
/// invocation wrote past the resume point.
fn open_step_log(path: &Path, resume_step: u64) -> Result<BufWriter<File>> {
    if resume_step == 0 || !path.exists() {
        let f = File::create(path).map_err(LabError::io(format!("creating {}", path.display())))?;
        return Ok(BufWriter::new(f));
    }
    let kept: Vec<StepLine> = read_step_log(path)?
        .into_iter()
        .filter(|l| l.step < resume_step)
        .collect();
    let mut w = BufWriter::new(
        File::create(path).map_err(LabError::io(format!("rewriting {}", path.display())))?,
    );
    for l in &kept {
        writeln!(w, "{}", serde_json::to_string(l)?).map_err(LabError::io("writing step log"))?;
    }
    w.flush().map_err(LabError::io("writing step log"))?;
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(LabError::io(format!("opening {}", path.display())))?;
    Ok(BufWriter::new(f))
}

/// Trains per `cfg`, calling `progress` after every step.
pub fn train(cfg: &RunConfig, mut progress: impl FnMut(&StepLine)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir)
        .map_err(LabError::io(format!("creating {}", run_dir.display())))?;
    let mut trainer = start_trainer(cfg)?;
    let first_step = trainer.step;

    let stream = cfg.training_corpus()?;
    let rows = windows(&stream, cfg.seq_len, false).map_err(|e| LabError::Data(e.to_string()))?;
    let mut sampler = WindowSampler::new(rows, cfg.batch_size, cfg.seed)?;

    fs::write(run_dir.join(RUN_CONFIG_FILE), cfg.to_toml())
        .map_err(LabError::io("writing run.toml"))?;
    let mut log = open_step_log(&run_dir.join(STEP_LOG_FILE), first_step)?;

    let mut last = None;
    let mut failure: Option<LabError> = None;
    let mut clock = Instant::now();
    let interval = cfg.eval_interval;
    let result = trainer.run(&mut sampler, |t, rec| {
        let line = StepLine::new(rec, clock.elapsed().as_secs_f64() * 1e3);
        clock = Instant::now();
        let written = serde_json::to_string(&line)
            .map_err(LabError::from)
            .and_then(|s| {
                writeln!(log, "{s}")
                    .and_then(|_| log.flush())
                    .map_err(LabError::io("writing step log"))
            })
            .and_then(|_| {
                if t.step % interval == 0 {
                    Checkpoint::from_trainer(t, cfg).save(&run_dir.join(checkpoint_name(t.step)))
                } else {
                    Ok(())
                }
            });
        if let Err(e) = written {
            failure = Some(e);
            return Err(ssa_core::Error::InvalidInput("run output failed".into()));
        }
        progress(&line);
        last = Some(line);
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    result?;

    let final_checkpoint = run_dir.join(FINAL_CHECKPOINT);
    Checkpoint::from_trainer(&trainer, cfg).save(&final_checkpoint)?;
    Ok(TrainOutcome {
        run_dir,
        final_checkpoint,
        steps_run: trainer.step - first_step,
        last,
    })
}
