//! Attention diagnostics: entropy, top-k block mass, sink mass and the
//! output KL between full and sparse inference.
//!
//! Per-row values are averaged over query positions, then heads, then
//! layers, then samples. Logarithms are natural.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::attention::{AttnConfig, AttnMode};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, LayerCapture, Model};
use crate::real::Real;
use crate::tensor::Tensor;

pub const SINK_FRACTION: f64 = 0.3;
pub const AGGREGATION_ORDER: &str = "positions>heads>layers>samples";

const NORM_TOL: f64 = 1e-4;

fn check_row(row: &[f64]) -> Result<()> {
    if let Some(w) = row.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "attention weight {w} is negative or NaN"
        )));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > NORM_TOL {
        return Err(Error::InvalidInput(format!(
            "attention row sums to {s}, expected 1"
        )));
    }
    Ok(())
}

/// `−Σ a ln a` with `0 ln 0 = 0`.
pub fn attn_entropy(row: &[f64]) -> Result<f64> {
    check_row(row)?;
    Ok(-row
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * Float::ln(a))
        .sum::<f64>())
}

/// Block index of every key position.
pub fn block_map(len: usize, block_size: usize) -> Vec<usize> {
    (0..len).map(|j| j / block_size.max(1)).collect()
}

/// Attention mass inside the selected blocks.
pub fn attn_sparsity(row: &[f64], block_map: &[usize], topk: &[usize]) -> Result<f64> {
    if block_map.len() != row.len() {
        return Err(Error::ShapeMismatch {
            op: "attn_sparsity",
            lhs: vec![row.len()],
            rhs: vec![block_map.len()],
        });
    }
    Ok(row
        .iter()
        .zip(block_map)
        .filter(|(_, b)| topk.contains(b))
        .map(|(&a, _)| a)
        .sum())
}

/// Mass on the first `⌈fraction · len⌉` positions.
pub fn sink_mass(row: &[f64], fraction: f64) -> f64 {
    let n = Float::ceil(fraction * row.len() as f64) as usize;
    row[..n.min(row.len())].iter().sum()
}

/// `KL(p ‖ q)` between two distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (Float::ln(a) - Float::ln(b)))
        .sum::<f64>()
        .max(0.0)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = Float::ln(row.iter().map(|&x| Float::exp(x - max)).sum::<f64>()) + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Mean over rows of `KL(softmax(full) ‖ softmax(sparse))`.
pub fn kl_from_logits<F: Real>(full: &Tensor<F>, sparse: &Tensor<F>) -> Result<f64> {
    if full.shape() != sparse.shape() || full.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "logit_kl",
            lhs: full.shape().to_vec(),
            rhs: sparse.shape().to_vec(),
        });
    }
    let mut total = 0.0;
    for r in 0..full.rows() {
        let lp = log_softmax(&full.row(r).iter().map(|x| x.f64()).collect::<Vec<_>>());
        let lq = log_softmax(&sparse.row(r).iter().map(|x| x.f64()).collect::<Vec<_>>());
        total += lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| Float::exp(a) * (a - b))
            .sum::<f64>()
            .max(0.0);
    }
    Ok(total / full.rows() as f64)
}

/// Output KL of full-attention inference against sparse inference under
/// `sparse_cfg` (the model's own config when `None`).
pub fn logit_kl<F: Real>(
    model: &Model<F>,
    tokens: &[u32],
    sparse_cfg: Option<AttnConfig>,
) -> Result<f64> {
    let full = model.forward_inference(tokens, AttnMode::Full, sparse_cfg)?;
    let sparse = model.forward_inference(tokens, AttnMode::Sparse, sparse_cfg)?;
    kl_from_logits(&full, &sparse)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttnStats {
    pub entropy: f64,
    pub sparsity: f64,
    pub sink: f64,
}

impl AttnStats {
    fn add(&mut self, o: &AttnStats) {
        self.entropy += o.entropy;
        self.sparsity += o.sparsity;
        self.sink += o.sink;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.entropy *= s;
        self.sparsity *= s;
        self.sink *= s;
        self
    }
}

/// Position-averaged stats for one head of one captured layer.
pub fn head_stats(cap: &LayerCapture, head: usize) -> Result<AttnStats> {
    let sel = &cap.selections[head];
    let map = block_map(cap.seq_len, sel.block_size);
    let mut acc = AttnStats::default();
    for t in 0..cap.seq_len {
        let row = cap.row(head, t);
        acc.add(&AttnStats {
            entropy: attn_entropy(row)?,
            sparsity: attn_sparsity(row, &map[..t + 1], sel.blocks(t))?,
            sink: sink_mass(row, SINK_FRACTION),
        });
    }
    Ok(acc.scaled(1.0 / cap.seq_len as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadMetrics {
    pub layer: usize,
    pub head: usize,
    pub stats: AttnStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsMeta {
    pub samples: usize,
    pub positions: usize,
    pub block_size: usize,
    pub top_k: usize,
    pub mode: AttnMode,
    pub order: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub heads: Vec<HeadMetrics>,
    pub layers: Vec<AttnStats>,
    pub global: AttnStats,
    /// Mean output KL(full ‖ sparse) when computed.
    pub logit_kl: Option<f64>,
    pub meta: MetricsMeta,
}

/// Aggregates captures of several samples (each a per-layer list).
pub fn aggregate(
    samples: &[Vec<LayerCapture>],
    cfg: &AttnConfig,
    mode: AttnMode,
) -> Result<MetricsRecord> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidInput("no samples to aggregate".into()))?;
    let n_layers = first.len();
    let n_heads = first.first().map_or(0, |c| c.n_heads);
    let mut heads = vec![AttnStats::default(); n_layers * n_heads];
    let mut layers = vec![AttnStats::default(); n_layers];
    let mut global = AttnStats::default();
    let mut positions = 0;
    for caps in samples {
        if caps.len() != n_layers || caps.iter().any(|c| c.n_heads != n_heads) {
            return Err(Error::InvalidInput(
                "samples captured with different layouts".into(),
            ));
        }
        let mut sample_acc = AttnStats::default();
        for (l, cap) in caps.iter().enumerate() {
            positions += cap.seq_len * n_heads;
            let mut layer_acc = AttnStats::default();
            for h in 0..n_heads {
                let s = head_stats(cap, h)?;
                heads[l * n_heads + h].add(&s);
                layer_acc.add(&s);
            }
            let layer_mean = layer_acc.scaled(1.0 / n_heads as f64);
            layers[l].add(&layer_mean);
            sample_acc.add(&layer_mean);
        }
        global.add(&sample_acc.scaled(1.0 / n_layers as f64));
    }
    let inv = 1.0 / samples.len() as f64;
    Ok(MetricsRecord {
        heads: heads
            .into_iter()
            .enumerate()
            .map(|(i, s)| HeadMetrics {
                layer: i / n_heads,
                head: i % n_heads,
                stats: s.scaled(inv),
            })
            .collect(),
        layers: layers.into_iter().map(|s| s.scaled(inv)).collect(),
        global: global.scaled(inv),
        logit_kl: None,
        meta: MetricsMeta {
            samples: samples.len(),
            positions,
            block_size: cfg.block_size,
            top_k: cfg.top_k,
            mode,
            order: AGGREGATION_ORDER,
        },
    })
}

/// Diagnostics for each grid config: captures are taken from forwards in
/// `mode` with the grid config in place, and the logit KL compares full
/// against sparse inference under that config.
pub fn sweep_metrics<F: Real>(
    model: &Model<F>,
    samples: &[Vec<u32>],
    grid: &[AttnConfig],
    mode: AttnMode,
) -> Result<Vec<MetricsRecord>> {
    if samples.is_empty() || samples.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidInput("empty evaluation corpus".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut caps = Vec::with_capacity(samples.len());
        let mut kl = 0.0;
        for s in samples {
            let mut opts = ForwardOptions::new(mode).with_capture(true);
            opts.attn = Some(*cfg);
            let f = model.forward(s, None, opts)?;
            caps.push(f.output.captures.expect("capture requested"));
            kl += logit_kl(model, s, Some(*cfg))?;
        }
        let mut rec = aggregate(&caps, cfg, mode)?;
        rec.logit_kl = Some(kl / samples.len() as f64);
        out.push(rec);
    }
    Ok(out)
}
