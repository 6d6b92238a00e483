//! Perplexity (direct and strided), receptive-field and context-length
//! sweeps, and needle retrieval.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttnConfig, AttnMode};
use crate::data::{gen_niah, NeedleSpec, KEY_ALPHABET, VALUE_ALPHABET};
use crate::error::{Error, Result};
use crate::metrics::aggregate;
use crate::model::{ForwardOptions, Model};
use crate::real::Real;
use crate::tensor::Tensor;

/// Sum of next-token NLL over the rows of `logits` whose target is set.
pub fn nll_sum<F: Real>(logits: &Tensor<F>, targets: &[Option<u32>]) -> Result<(f64, usize)> {
    if logits.rows() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "nll",
            lhs: logits.shape().to_vec(),
            rhs: alloc::vec![targets.len()],
        });
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (r, t) in targets.iter().enumerate() {
        let Some(y) = *t else { continue };
        let row = logits.row(r);
        let max = row
            .iter()
            .map(|x| x.f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = Float::ln(row.iter().map(|x| Float::exp(x.f64() - max)).sum::<f64>()) + max;
        let y = y as usize;
        if y >= row.len() {
            return Err(Error::TokenOutOfRange {
                id: y as u32,
                vocab: row.len(),
            });
        }
        sum += lse - row[y].f64();
        n += 1;
    }
    Ok((sum, n))
}

fn check_stream(stream: &[u32], t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidInput(
            "context length must be positive".into(),
        ));
    }
    if stream.len() < 2 {
        return Err(Error::InvalidInput(
            "evaluation stream needs at least 2 tokens".into(),
        ));
    }
    Ok(())
}

/// Scores `stream[begin..end]`'s next tokens at input positions `>= first`.
fn window_nll<F: Real>(
    model: &Model<F>,
    stream: &[u32],
    begin: usize,
    end: usize,
    first: usize,
    mode: AttnMode,
    cfg: Option<AttnConfig>,
) -> Result<(f64, usize)> {
    let logits = model.forward_inference(&stream[begin..end], mode, cfg)?;
    let targets: Vec<Option<u32>> = (begin..end)
        .map(|p| (p >= first).then(|| stream[p + 1]))
        .collect();
    nll_sum(&logits, &targets)
}

/// `exp` of the mean next-token NLL over non-overlapping windows of `t`
/// inputs (the last window may be shorter).
pub fn perplexity<F: Real>(
    model: &Model<F>,
    stream: &[u32],
    t: usize,
    mode: AttnMode,
    cfg: Option<AttnConfig>,
) -> Result<f64> {
    sliding_window_ppl(model, stream, t, t, mode, cfg)
}

/// Strided evaluation: windows of `t` inputs start every `stride` tokens and
/// each scores only the positions no earlier window scored.
pub fn sliding_window_ppl<F: Real>(
    model: &Model<F>,
    stream: &[u32],
    t: usize,
    stride: usize,
    mode: AttnMode,
    cfg: Option<AttnConfig>,
) -> Result<f64> {
    check_stream(stream, t)?;
    if stride == 0 || stride > t {
        return Err(Error::InvalidInput(format!(
            "stride {stride} must lie in 1..={t}"
        )));
    }
    let last = stream.len() - 1;
    let (mut sum, mut n, mut scored_to) = (0.0, 0usize, 0usize);
    let mut begin = 0;
    loop {
        let end = (begin + t).min(last);
        let (s, c) = window_nll(model, stream, begin, end, scored_to, mode, cfg)?;
        sum += s;
        n += c;
        scored_to = end;
        if end == last {
            break;
        }
        begin += stride;
    }
    Ok(Float::exp(sum / n as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub mode: AttnMode,
    pub attn: AttnConfig,
    pub context_len: usize,
    pub ppl: f64,
    pub niah: Option<f64>,
    pub sink_mass: Option<f64>,
}

/// Grid of `k` values for a sweep: sorted, deduplicated, ending at the
/// full-coverage point `⌈t / s⌉`.
pub fn sweep_ks(ks: &[usize], t: usize, block_size: usize) -> Vec<usize> {
    let full = t.div_ceil(block_size).max(1);
    let mut out: Vec<usize> = ks.iter().copied().filter(|&k| k >= 1 && k < full).collect();
    out.push(full);
    out.sort_unstable();
    out.dedup();
    out
}

/// PPL (and NIAH accuracy when `needles` is given) at each top-k for a
/// fixed block size, followed by a FULL-mode row.
pub fn rf_sweep<F: Real>(
    model: &Model<F>,
    stream: &[u32],
    t: usize,
    ks: &[usize],
    block_size: usize,
    needles: Option<&[NeedleSpec]>,
) -> Result<Vec<EvalRow>> {
    let base = model.config.attn;
    let mut rows = Vec::new();
    for k in sweep_ks(ks, t, block_size) {
        let cfg = AttnConfig {
            block_size,
            top_k: k,
            mode: AttnMode::Sparse,
            gate_enabled: base.gate_enabled,
        };
        cfg.validate()?;
        rows.push(EvalRow {
            label: format!("k={k}"),
            mode: AttnMode::Sparse,
            attn: cfg,
            context_len: t,
            ppl: perplexity(model, stream, t, AttnMode::Sparse, Some(cfg))?,
            niah: needles
                .map(|n| niah_score(model, n, AttnMode::Sparse, Some(cfg)).map(|r| r.accuracy))
                .transpose()?,
            sink_mass: None,
        });
    }
    rows.push(EvalRow {
        label: "full".into(),
        mode: AttnMode::Full,
        attn: base.with_mode(AttnMode::Full),
        context_len: t,
        ppl: perplexity(model, stream, t, AttnMode::Full, None)?,
        niah: needles
            .map(|n| niah_score(model, n, AttnMode::Full, None).map(|r| r.accuracy))
            .transpose()?,
        sink_mass: None,
    });
    Ok(rows)
}

/// Mean sink mass over captured windows of `len` tokens (at most
/// `max_windows` of them).
pub fn mean_sink_mass<F: Real>(
    model: &Model<F>,
    stream: &[u32],
    len: usize,
    mode: AttnMode,
    max_windows: usize,
) -> Result<f64> {
    let caps: Vec<_> = stream
        .chunks_exact(len)
        .take(max_windows.max(1))
        .map(|w| {
            model
                .forward(w, None, ForwardOptions::new(mode).with_capture(true))
                .map(|f| f.output.captures.expect("capture requested"))
        })
        .collect::<Result<_>>()?;
    if caps.is_empty() {
        return Err(Error::InvalidInput(format!(
            "stream shorter than one window of {len}"
        )));
    }
    Ok(aggregate(&caps, &model.config.attn, mode)?.global.sink)
}

/// PPL and sink mass at each context length in both modes.
pub fn context_extrapolation<F: Real>(
    model: &Model<F>,
    stream: &[u32],
    lengths: &[usize],
    sink_windows: usize,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &len in lengths {
        for mode in [AttnMode::Full, AttnMode::Sparse] {
            rows.push(EvalRow {
                label: format!("len={len}"),
                mode,
                attn: model.config.attn.with_mode(mode),
                context_len: len,
                ppl: perplexity(model, stream, len, mode, None)?,
                niah: None,
                sink_mass: Some(mean_sink_mass(model, stream, len, mode, sink_windows)?),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiahResult {
    pub accuracy: f64,
    /// `(context_len, depth, correct)` per grid cell, in input order.
    pub cells: Vec<(usize, f64, bool)>,
}

/// Greedy decode of `n` tokens after `prompt`; ties go to the lowest id.
pub fn greedy_decode<F: Real>(
    model: &Model<F>,
    prompt: &[u32],
    n: usize,
    mode: AttnMode,
    cfg: Option<AttnConfig>,
) -> Result<Vec<u32>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let logits = model.forward_inference(&seq, mode, cfg)?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 0;
        for (i, x) in last.iter().enumerate() {
            if *x > last[best] {
                best = i;
            }
        }
        out.push(best as u32);
        seq.push(best as u32);
    }
    Ok(out)
}

/// Exact-match accuracy of the greedily decoded answer over the grid.
pub fn niah_score<F: Real>(
    model: &Model<F>,
    specs: &[NeedleSpec],
    mode: AttnMode,
    cfg: Option<AttnConfig>,
) -> Result<NiahResult> {
    if specs.is_empty() {
        return Err(Error::InvalidInput("empty needle grid".into()));
    }
    let mut cells = Vec::with_capacity(specs.len());
    for spec in specs {
        let sample = gen_niah(spec)?;
        let prompt = &sample.tokens[..sample.answer.start];
        let decoded = greedy_decode(model, prompt, sample.answer.len(), mode, cfg)?;
        cells.push((
            spec.context_len,
            spec.depth,
            decoded == sample.tokens[sample.answer.clone()],
        ));
    }
    let correct = cells.iter().filter(|c| c.2).count();
    Ok(NiahResult {
        accuracy: correct as f64 / cells.len() as f64,
        cells,
    })
}

/// One needle per `(length, depth)` cell with a seeded random key and value.
pub fn niah_grid(lengths: &[usize], depths: &[f64], seed: u64) -> Vec<NeedleSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(lengths.len() * depths.len());
    for &len in lengths {
        for &depth in depths {
            let key = [
                KEY_ALPHABET[rng.random_range(0..KEY_ALPHABET.len())],
                KEY_ALPHABET[rng.random_range(0..KEY_ALPHABET.len())],
            ];
            out.push(NeedleSpec {
                context_len: len,
                key,
                value: alloc::vec![VALUE_ALPHABET[rng.random_range(0..VALUE_ALPHABET.len())]],
                depth,
                filler_seed: rng.random(),
            });
        }
    }
    out
}
