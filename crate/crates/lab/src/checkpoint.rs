//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "SSACKPT\0"
//! version    u32
//! config     u32 length + UTF-8 TOML (the run config)
//! step       u64      next step to run
//! seed       u64      routing/batch stream seed; streams are indexed by step
//! monitor    u8 flag + f64 initial ce, u64 run length
//! params     u32 count, then per tensor:
//!            u32 name length + name, u32 ndim, ndim x u64 dims, f32 data
//! optimizer  u8 flag; when set u64 t, then m and v for every tensor (f32)
//! digest     32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use ssa_core::model::Model;
use ssa_core::tensor::{ParamStore, Tensor};
use ssa_core::training::{AdamW, AdamWConfig, DivergenceMonitor, Trainer};

use crate::config::{short_hash, RunConfig};
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"SSACKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub seed: u64,
    pub monitor_initial: Option<f64>,
    pub monitor_run: u64,
    pub params: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer<f32>, config: &RunConfig) -> Self {
        Self {
            config_text: config.to_toml(),
            step: trainer.step,
            seed: trainer.cfg.seed,
            monitor_initial: trainer.monitor.initial,
            monitor_run: trainer.monitor.run,
            params: tensors_of(&trainer.model.params),
            optimizer: Some(OptimizerState {
                t: trainer.opt.t,
                m: trainer.opt.m.clone(),
                v: trainer.opt.v.clone(),
            }),
        }
    }

    pub fn from_model(model: &Model<f32>, config: &RunConfig, step: u64) -> Self {
        Self {
            config_text: config.to_toml(),
            step,
            seed: config.seed,
            monitor_initial: None,
            monitor_run: 0,
            params: tensors_of(&model.params),
            optimizer: None,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.config_text)
    }

    /// Hash of the embedded run config.
    pub fn config_hash(&self) -> String {
        short_hash(self.config_text.as_bytes())
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let cfg = self.config()?.model_config()?;
        let mut store = ParamStore::new();
        for t in &self.params {
            store.add(
                t.name.clone(),
                Tensor::new(t.shape.clone(), t.data.clone())?,
            );
        }
        Ok(Model::from_params(cfg, store)?)
    }

    /// Rebuilds the trainer state: weights, optimizer moments, step and
    /// divergence monitor.
    pub fn trainer(&self) -> Result<Trainer<f32>> {
        let run = self.config()?;
        let mut trainer = Trainer::new(self.model()?, run.train_config()?)?;
        trainer.step = self.step;
        trainer.monitor = DivergenceMonitor {
            initial: self.monitor_initial,
            run: self.monitor_run,
            ..DivergenceMonitor::default()
        };
        if let Some(o) = &self.optimizer {
            let mut opt = AdamW::new(&trainer.model.params, AdamWConfig::from(&trainer.cfg));
            if o.m.len() != opt.m.len() || o.m.iter().zip(&opt.m).any(|(a, b)| a.len() != b.len()) {
                return Err(LabError::Data(
                    "optimizer state does not match parameter shapes".into(),
                ));
            }
            opt.t = o.t;
            opt.m = o.m.clone();
            opt.v = o.v.clone();
            trainer.opt = opt;
        }
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_str(&mut w, &self.config_text);
        put_u64(&mut w, self.step);
        put_u64(&mut w, self.seed);
        w.push(self.monitor_initial.is_some() as u8);
        w.extend_from_slice(&self.monitor_initial.unwrap_or(0.0).to_le_bytes());
        put_u64(&mut w, self.monitor_run);
        put_u32(&mut w, self.params.len() as u32);
        for t in &self.params {
            put_str(&mut w, &t.name);
            put_u32(&mut w, t.shape.len() as u32);
            for &d in &t.shape {
                put_u64(&mut w, d as u64);
            }
            put_f32s(&mut w, &t.data);
        }
        match &self.optimizer {
            Some(o) => {
                w.push(1);
                put_u64(&mut w, o.t);
                for m in &o.m {
                    put_f32s(&mut w, m);
                }
                for v in &o.v {
                    put_f32s(&mut w, v);
                }
            }
            None => w.push(0),
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    /// Parses a checkpoint; `origin` names it in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |reason: String| LabError::Checkpoint {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fail("bad magic: not an SSA checkpoint".into()));
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32().map_err(fail)?;
        if version != VERSION {
            return Err(fail(format!(
                "unsupported format version {version} (this build reads version {VERSION})"
            )));
        }
        if bytes.len() < r.pos + 32 {
            return Err(fail("truncated file".into()));
        }
        let body = bytes.len() - 32;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(fail("digest mismatch: file is corrupt".into()));
        }
        r.buf = &bytes[..body];
        Self::read_body(&mut r).map_err(fail)
    }

    fn read_body(r: &mut Reader<'_>) -> std::result::Result<Self, String> {
        let config_text = r.string()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let has_initial = r.u8()? != 0;
        let initial = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let monitor_run = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or("tensor size overflows")?;
            let data = r.f32s(len)?;
            params.push(NamedTensor { name, shape, data });
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let m = params
                    .iter()
                    .map(|p| r.f32s(p.data.len()))
                    .collect::<std::result::Result<_, _>>()?;
                let v = params
                    .iter()
                    .map(|p| r.f32s(p.data.len()))
                    .collect::<std::result::Result<_, _>>()?;
                Some(OptimizerState { t, m, v })
            }
            f => return Err(format!("bad optimizer flag {f}")),
        };
        if r.pos != r.buf.len() {
            return Err(format!("{} trailing bytes", r.buf.len() - r.pos));
        }
        Ok(Self {
            config_text,
            step,
            seed,
            monitor_initial: has_initial.then_some(initial),
            monitor_run,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        std::fs::write(&tmp, self.to_bytes())
            .map_err(LabError::io(format!("writing {}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(LabError::io(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes, path)
    }
}

/// First 12 hex digits of the SHA-256 of a checkpoint file.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| LabError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(short_hash(&bytes))
}

fn tensors_of(store: &ParamStore<f32>) -> Vec<NamedTensor> {
    store
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        })
        .collect()
}

fn put_u32(w: &mut Vec<u8>, x: u32) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, x: u64) {
    w.extend_from_slice(&x.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_f32s(w: &mut Vec<u8>, xs: &[f32]) {
    w.reserve(xs.len() * 4);
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not UTF-8".into())
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("tensor size overflows")?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
