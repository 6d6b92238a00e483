//! Causal full attention and top-k block-sparse attention.
//!
//! Tensors are row-major with one row per position: queries are
//! `[T, n_heads * head_dim]`, keys and values `[T, n_kv_heads * head_dim]`.
//! Query head `h` reads key/value head `h / (n_heads / n_kv_heads)`.
//!
//! Sparse attention splits the sequence into blocks of `block_size`
//! tokens, mean-pools each block's keys, ranks the strictly-past blocks by
//! the dot product of the query with the pooled key, and attends to the
//! query's own block plus the `top_k - 1` best-ranked past blocks. Block
//! selection is per query head and carries no gradient.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{axpy, dot4};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttnMode {
    Full,
    Sparse,
}

impl AttnMode {
    pub fn opposite(self) -> Self {
        match self {
            AttnMode::Full => AttnMode::Sparse,
            AttnMode::Sparse => AttnMode::Full,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttnMode::Full => "FULL",
            AttnMode::Sparse => "SPARSE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    /// Tokens per block.
    pub block_size: usize,
    /// Blocks attended per query, own block included.
    pub top_k: usize,
    pub mode: AttnMode,
    pub gate_enabled: bool,
}

impl AttnConfig {
    pub fn new(
        block_size: usize,
        top_k: usize,
        mode: AttnMode,
        gate_enabled: bool,
    ) -> Result<Self> {
        let cfg = Self {
            block_size,
            top_k,
            mode,
            gate_enabled,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.top_k == 0 {
            return Err(Error::Config(alloc::format!(
                "block_size and top_k must be >= 1 (got {} and {})",
                self.block_size,
                self.top_k
            )));
        }
        Ok(())
    }

    /// Maximum number of keys a query can see in sparse mode.
    pub fn receptive_field(&self) -> usize {
        self.block_size * self.top_k
    }

    pub fn num_blocks(&self, seq_len: usize) -> usize {
        seq_len.div_ceil(self.block_size)
    }

    /// True when sparse attention degenerates to full attention at `seq_len`.
    pub fn covers(&self, seq_len: usize) -> bool {
        self.top_k >= self.num_blocks(seq_len)
    }

    pub fn with_mode(mut self, mode: AttnMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_top_k(mut self, top_k: usize) -> Self {
        self.top_k = top_k;
        self
    }
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            top_k: 16,
            mode: AttnMode::Sparse,
            gate_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub seq_len: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn new(seq_len: usize, n_heads: usize, n_kv_heads: usize, head_dim: usize) -> Result<Self> {
        if n_kv_heads == 0 || !n_heads.is_multiple_of(n_kv_heads) {
            return Err(Error::InvalidShape {
                op: "attention",
                detail: alloc::format!(
                    "{n_heads} query heads are not divisible into {n_kv_heads} kv heads"
                ),
            });
        }
        if head_dim == 0 || seq_len == 0 {
            return Err(Error::InvalidShape {
                op: "attention",
                detail: "empty sequence or head dimension".into(),
            });
        }
        Ok(Self {
            seq_len,
            n_heads,
            n_kv_heads,
            head_dim,
        })
    }

    /// Infer the layout from `[T, h, d]` query and `[T, h_kv, d]` key shapes.
    pub fn from_shapes(q: &[usize], k: &[usize], v: &[usize]) -> Result<Self> {
        if q.len() != 3 || k.len() != 3 || k != v || q[0] != k[0] || q[2] != k[2] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: q.to_vec(),
                rhs: k.to_vec(),
            });
        }
        Self::new(q[0], q[1], k[1], q[2])
    }

    #[inline]
    pub fn group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    #[inline]
    pub fn kv_head(&self, head: usize) -> usize {
        head / self.group()
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn scale<F: Real>(&self) -> F {
        F::one() / F::from_usize(self.head_dim).sqrt()
    }
}

/// Selected block indices (ascending) for every query position of one head.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockSelection {
    pub block_size: usize,
    pub per_position: Vec<Vec<usize>>,
}

impl BlockSelection {
    pub fn blocks(&self, t: usize) -> &[usize] {
        &self.per_position[t]
    }

    pub fn contains(&self, t: usize, block: usize) -> bool {
        self.per_position[t].binary_search(&block).is_ok()
    }

    /// Number of keys the query at `t` attends to.
    pub fn attended_keys(&self, t: usize) -> usize {
        let own = t / self.block_size;
        self.per_position[t]
            .iter()
            .map(|&b| {
                if b == own {
                    t - b * self.block_size + 1
                } else {
                    self.block_size
                }
            })
            .sum()
    }
}

/// Mean of each block's key rows. `keys` is `[T, width]`; the result is
/// `[ceil(T/s), width]`, with a partial final block averaged over its members.
pub fn block_pool_rows<F: Real>(
    keys: &[F],
    seq_len: usize,
    width: usize,
    block_size: usize,
) -> Vec<F> {
    let n_blocks = seq_len.div_ceil(block_size);
    let mut pooled = vec![F::zero(); n_blocks * width];
    for b in 0..n_blocks {
        let start = b * block_size;
        let end = (start + block_size).min(seq_len);
        let dst = &mut pooled[b * width..(b + 1) * width];
        for j in start..end {
            axpy(F::one(), &keys[j * width..(j + 1) * width], dst);
        }
        let inv = F::one() / F::from_usize(end - start);
        dst.iter_mut().for_each(|x| *x = *x * inv);
    }
    pooled
}

/// Mean-pool `[T, h_kv, d]` keys into `[ceil(T/s), h_kv, d]` blocks.
pub fn block_pool<F: Real>(keys: &Tensor<F>, block_size: usize) -> Result<Tensor<F>> {
    if block_size == 0 {
        return Err(Error::Config("block_size must be >= 1".into()));
    }
    let shape = keys.shape();
    let seq_len = shape.first().copied().unwrap_or(0);
    let width = keys.len().checked_div(seq_len).unwrap_or(0);
    let pooled = block_pool_rows(keys.data(), seq_len, width, block_size);
    let mut out_shape = shape.to_vec();
    out_shape[0] = seq_len.div_ceil(block_size);
    Tensor::new(out_shape, pooled)
}

/// Raw dot product of one query with each pooled block row (`[B, d]`).
pub fn block_scores<F: Real>(query: &[F], pooled: &[F]) -> Vec<F> {
    let d = query.len();
    if d == 0 {
        return Vec::new();
    }
    pooled.chunks_exact(d).map(|row| dot4(query, row)).collect()
}

/// Total order used for ranking: score descending, then index ascending.
fn rank_order<F: Real>(scores: &[F], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Blocks selected for the query at position `t`, ascending.
///
/// Only `scores[..block(t)]` (strictly past blocks) are consulted; the
/// query's own block is always selected and counts toward `top_k`.
pub fn select_topk<F: Real>(scores: &[F], t: usize, cfg: &AttnConfig) -> Vec<usize> {
    let own = t / cfg.block_size;
    if own < cfg.top_k {
        return (0..=own).collect();
    }
    let mut past: Vec<usize> = (0..own).collect();
    past.sort_by(|&a, &b| rank_order(scores, a, b));
    let mut chosen: Vec<usize> = past.into_iter().take(cfg.top_k - 1).collect();
    chosen.push(own);
    chosen.sort_unstable();
    chosen
}

/// Per-head block selections for a whole sequence (q after RoPE, keys after RoPE).
pub fn select_blocks<F: Real>(
    q: &[F],
    k: &[F],
    layout: &HeadLayout,
    cfg: &AttnConfig,
) -> Vec<BlockSelection> {
    let (t_len, d) = (layout.seq_len, layout.head_dim);
    let kv_w = layout.kv_width();
    let q_w = layout.q_width();
    let pooled = block_pool_rows(k, t_len, kv_w, cfg.block_size);
    let n_blocks = cfg.num_blocks(t_len);
    let mut out = Vec::with_capacity(layout.n_heads);
    let mut pooled_head = vec![F::zero(); n_blocks * d];
    for head in 0..layout.n_heads {
        let kvh = layout.kv_head(head);
        for b in 0..n_blocks {
            pooled_head[b * d..(b + 1) * d]
                .copy_from_slice(&pooled[b * kv_w + kvh * d..b * kv_w + (kvh + 1) * d]);
        }
        let mut per_position = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let own = t / cfg.block_size;
            if own < cfg.top_k {
                per_position.push((0..=own).collect());
                continue;
            }
            let q_t = &q[t * q_w + head * d..t * q_w + (head + 1) * d];
            let scores = block_scores(q_t, &pooled_head[..own * d]);
            per_position.push(select_topk(&scores, t, cfg));
        }
        out.push(BlockSelection {
            block_size: cfg.block_size,
            per_position,
        });
    }
    out
}

/// Which keys each (head, query) row attends to, as half-open key ranges in
/// ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttendPlan {
    pub layout: HeadLayout,
    ranges: Vec<(u32, u32)>,
    /// `row_start[r]..row_start[r+1]` indexes `ranges` for row `r = head * T + t`.
    row_start: Vec<u32>,
    /// Offset of each row's probabilities in the packed probability buffer.
    prob_start: Vec<u32>,
}

impl AttendPlan {
    pub fn full(layout: HeadLayout) -> Self {
        let t_len = layout.seq_len;
        let rows = layout.n_heads * t_len;
        let mut ranges = Vec::with_capacity(rows);
        let mut row_start = Vec::with_capacity(rows + 1);
        let mut prob_start = Vec::with_capacity(rows + 1);
        let mut probs = 0u32;
        for _ in 0..layout.n_heads {
            for t in 0..t_len {
                row_start.push(ranges.len() as u32);
                prob_start.push(probs);
                ranges.push((0, t as u32 + 1));
                probs += t as u32 + 1;
            }
        }
        row_start.push(ranges.len() as u32);
        prob_start.push(probs);
        Self {
            layout,
            ranges,
            row_start,
            prob_start,
        }
    }

    pub fn sparse(layout: HeadLayout, selections: &[BlockSelection]) -> Self {
        let t_len = layout.seq_len;
        let mut ranges: Vec<(u32, u32)> = Vec::new();
        let mut row_start = Vec::with_capacity(layout.n_heads * t_len + 1);
        let mut prob_start = Vec::with_capacity(layout.n_heads * t_len + 1);
        let mut probs = 0u32;
        for sel in selections.iter().take(layout.n_heads) {
            let s = sel.block_size;
            for t in 0..t_len {
                row_start.push(ranges.len() as u32);
                prob_start.push(probs);
                for &b in sel.blocks(t) {
                    let start = b * s;
                    let end = ((b + 1) * s).min(t + 1);
                    // merge adjacent blocks so a fully covered row is one range
                    let row_begin = *row_start.last().unwrap() as usize;
                    let extends =
                        ranges.len() > row_begin && ranges[ranges.len() - 1].1 == start as u32;
                    if extends {
                        let last = ranges.len() - 1;
                        ranges[last].1 = end as u32;
                    } else {
                        ranges.push((start as u32, end as u32));
                    }
                    probs += (end - start) as u32;
                }
            }
        }
        row_start.push(ranges.len() as u32);
        prob_start.push(probs);
        Self {
            layout,
            ranges,
            row_start,
            prob_start,
        }
    }

    pub fn from_config<F: Real>(
        q: &[F],
        k: &[F],
        layout: HeadLayout,
        cfg: &AttnConfig,
        mode: AttnMode,
    ) -> Self {
        match mode {
            AttnMode::Full => Self::full(layout),
            AttnMode::Sparse => Self::sparse(layout, &select_blocks(q, k, &layout, cfg)),
        }
    }

    #[inline]
    pub fn row_ranges(&self, head: usize, t: usize) -> &[(u32, u32)] {
        let r = head * self.layout.seq_len + t;
        &self.ranges[self.row_start[r] as usize..self.row_start[r + 1] as usize]
    }

    #[inline]
    fn prob_range(&self, head: usize, t: usize) -> (usize, usize) {
        let r = head * self.layout.seq_len + t;
        (self.prob_start[r] as usize, self.prob_start[r + 1] as usize)
    }

    pub fn total_probs(&self) -> usize {
        *self.prob_start.last().unwrap_or(&0) as usize
    }

    pub fn keys_attended(&self, head: usize, t: usize) -> usize {
        let (a, b) = self.prob_range(head, t);
        b - a
    }
}

/// Forward attention under `plan`; returns the output and the packed
/// per-row probabilities needed for the backward pass.
pub(crate) fn attend_forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    plan: &AttendPlan,
) -> (Vec<F>, Vec<F>) {
    let l = plan.layout;
    let (d, q_w, kv_w) = (l.head_dim, l.q_width(), l.kv_width());
    let scale: F = l.scale();
    let mut out = vec![F::zero(); l.seq_len * q_w];
    let mut probs = vec![F::zero(); plan.total_probs()];
    let kt = kv_by_dim(k, l);
    for head in 0..l.n_heads {
        let kvh = l.kv_head(head);
        for t in 0..l.seq_len {
            let (p0, p1) = plan.prob_range(head, t);
            let row = &mut probs[p0..p1];
            let q_t = &q[t * q_w + head * d..t * q_w + (head + 1) * d];
            scores_into(q_t, &kt, kvh, l, plan.row_ranges(head, t), row);
            let mut max = F::neg_infinity();
            for s in row.iter_mut() {
                *s = *s * scale;
                if *s > max {
                    max = *s;
                }
            }
            let mut sum = F::zero();
            for p in row.iter_mut() {
                *p = (*p - max).exp();
                sum = sum + *p;
            }
            let inv = F::one() / sum;
            row.iter_mut().for_each(|p| *p = *p * inv);
            let o_t = &mut out[t * q_w + head * d..t * q_w + (head + 1) * d];
            let mut idx = 0;
            for &(a, b) in plan.row_ranges(head, t) {
                for j in a as usize..b as usize {
                    axpy(
                        row[idx],
                        &v[j * kv_w + kvh * d..j * kv_w + (kvh + 1) * d],
                        o_t,
                    );
                    idx += 1;
                }
            }
        }
    }
    (out, probs)
}

/// Keys or values regrouped as `[kv_head, dim, T]` so a run of positions is
/// contiguous per dimension.
fn kv_by_dim<F: Real>(x: &[F], l: HeadLayout) -> Vec<F> {
    let (t_len, d, kv_w) = (l.seq_len, l.head_dim, l.kv_width());
    let mut out = vec![F::zero(); x.len()];
    for j in 0..t_len {
        for c in 0..kv_w {
            out[c * t_len + j] = x[j * kv_w + c];
        }
    }
    debug_assert_eq!(kv_w, l.n_kv_heads * d);
    out
}

/// `out[i] = Σ_x a[x] · xt[kvh, x, j_i]` over the keys in `ranges`, summing
/// dimensions in ascending order, so a score never depends on the plan.
fn scores_into<F: Real>(
    a: &[F],
    xt: &[F],
    kvh: usize,
    l: HeadLayout,
    ranges: &[(u32, u32)],
    out: &mut [F],
) {
    let (t_len, d) = (l.seq_len, l.head_dim);
    out.iter_mut().for_each(|s| *s = F::zero());
    let mut idx = 0;
    for &(ra, rb) in ranges {
        let (ra, rb) = (ra as usize, rb as usize);
        let seg = &mut out[idx..idx + rb - ra];
        for (x, &ax) in a.iter().enumerate().take(d) {
            let base = (kvh * d + x) * t_len;
            axpy(ax, &xt[base + ra..base + rb], seg);
        }
        idx += rb - ra;
    }
}

/// Accumulate gradients of attention inputs given the upstream gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    plan: &AttendPlan,
    d_out: &[F],
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let l = plan.layout;
    let (d, q_w, kv_w) = (l.head_dim, l.q_width(), l.kv_width());
    let scale: F = l.scale();
    let vt = kv_by_dim(v, l);
    let mut dp = Vec::new();
    for head in 0..l.n_heads {
        let kvh = l.kv_head(head);
        for t in 0..l.seq_len {
            let (p0, p1) = plan.prob_range(head, t);
            let row = &probs[p0..p1];
            let qo = t * q_w + head * d;
            let g_t = &d_out[qo..qo + d];
            dp.resize(row.len(), F::zero());
            scores_into(g_t, &vt, kvh, l, plan.row_ranges(head, t), &mut dp);
            let mut weighted = F::zero();
            let mut idx = 0;
            for &(a, b) in plan.row_ranges(head, t) {
                for j in a as usize..b as usize {
                    let ko = j * kv_w + kvh * d;
                    axpy(row[idx], g_t, &mut dv[ko..ko + d]);
                    weighted = weighted + row[idx] * dp[idx];
                    idx += 1;
                }
            }
            let mut idx = 0;
            for &(a, b) in plan.row_ranges(head, t) {
                for j in a as usize..b as usize {
                    let ds = row[idx] * (dp[idx] - weighted) * scale;
                    idx += 1;
                    if ds == F::zero() {
                        continue;
                    }
                    let ko = j * kv_w + kvh * d;
                    axpy(ds, &k[ko..ko + d], &mut dq[qo..qo + d]);
                    axpy(ds, &q[qo..qo + d], &mut dk[ko..ko + d]);
                }
            }
        }
    }
}

/// Dense `[n_heads, T, T]` causal weights (zeros above the diagonal).
pub fn dense_weights<F: Real>(probs: &[F], plan: &AttendPlan) -> Vec<F> {
    let l = plan.layout;
    let t_len = l.seq_len;
    let mut dense = vec![F::zero(); l.n_heads * t_len * t_len];
    for head in 0..l.n_heads {
        for t in 0..t_len {
            let (p0, _) = plan.prob_range(head, t);
            let base = (head * t_len + t) * t_len;
            let mut idx = p0;
            for &(a, b) in plan.row_ranges(head, t) {
                for j in a as usize..b as usize {
                    dense[base + j] = probs[idx];
                    idx += 1;
                }
            }
        }
    }
    dense
}

fn check_attention_inputs<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
) -> Result<HeadLayout> {
    HeadLayout::from_shapes(q.shape(), k.shape(), v.shape())
}

/// Causal softmax attention over `[T, h, d]` queries and `[T, h_kv, d]` keys/values.
pub fn full_attention<F: Real>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
    Ok(full_attention_with_weights(q, k, v)?.0)
}

/// Full attention plus dense `[h, T, T]` attention weights.
pub fn full_attention_with_weights<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<F>)> {
    let layout = check_attention_inputs(q, k, v)?;
    let plan = AttendPlan::full(layout);
    let (out, probs) = attend_forward(q.data(), k.data(), v.data(), &plan);
    Ok((
        Tensor::new(q.shape().to_vec(), out)?,
        dense_weights(&probs, &plan),
    ))
}

/// Top-k block-sparse attention; also returns the per-head selections.
pub fn sparse_attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    cfg: &AttnConfig,
) -> Result<(Tensor<F>, Vec<BlockSelection>)> {
    cfg.validate()?;
    let layout = check_attention_inputs(q, k, v)?;
    let selections = select_blocks(q.data(), k.data(), &layout, cfg);
    let plan = AttendPlan::sparse(layout, &selections);
    let (out, _) = attend_forward(q.data(), k.data(), v.data(), &plan);
    Ok((Tensor::new(q.shape().to_vec(), out)?, selections))
}

/// Gate parameters: weight `[d_model, h*d]` and bias `[h*d]`.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub weight: Var,
    pub bias: Var,
}

/// `O(sigmoid(h·W_g + b_g) ⊙ attn)`; with no gate the attention output is
/// projected directly (gate ≡ 1).
pub fn gated_output<F: Real>(
    g: &mut Graph<F>,
    h: Var,
    attn: Var,
    gate: Option<GateParams>,
    out_weight: Var,
) -> Result<Var> {
    let gated = match gate {
        Some(p) => {
            let pre = g.matmul(h, p.weight)?;
            let pre = g.add_bias(pre, p.bias)?;
            let gate = g.sigmoid(pre);
            g.mul(gate, attn)?
        }
        None => attn,
    };
    g.matmul(gated, out_weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Per-position double loop straight from the definition.
    fn naive_attention(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        allowed: impl Fn(usize, usize, usize) -> bool,
    ) -> Vec<f64> {
        let (t_len, h, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let hkv = k.shape()[1];
        let mut out = vec![0.0; t_len * h * d];
        for head in 0..h {
            let kvh = head / (h / hkv);
            for t in 0..t_len {
                let mut logits = Vec::new();
                for j in 0..=t {
                    if !allowed(head, t, j) {
                        continue;
                    }
                    let mut s = 0.0;
                    for x in 0..d {
                        s += q.data()[(t * h + head) * d + x] * k.data()[(j * hkv + kvh) * d + x];
                    }
                    logits.push((j, s / (d as f64).sqrt()));
                }
                let m = logits.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x.1 - m).exp()).sum();
                for &(j, s) in &logits {
                    let w = (s - m).exp() / z;
                    for x in 0..d {
                        out[(t * h + head) * d + x] += w * v.data()[(j * hkv + kvh) * d + x];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_position_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_tensor(&mut rng, &[1, 2, 4]);
        let k = rand_tensor(&mut rng, &[1, 1, 4]);
        let v = rand_tensor(&mut rng, &[1, 1, 4]);
        let out = full_attention(&q, &k, &v).unwrap();
        for head in 0..2 {
            assert_eq!(&out.data()[head * 4..head * 4 + 4], v.data());
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_tensor(&mut rng, &[5, 1, 3]);
        let k = Tensor::from_fn(&[5, 1, 3], |i| [0.3, -0.2, 0.9][i % 3]);
        let v = rand_tensor(&mut rng, &[5, 1, 3]);
        let out = full_attention(&q, &k, &v).unwrap();
        for t in 0..5 {
            for x in 0..3 {
                let mean: f64 = (0..=t).map(|j| v.data()[j * 3 + x]).sum::<f64>() / (t + 1) as f64;
                assert!((out.data()[t * 3 + x] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_attention_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, &[12, 4, 8]);
        let k = rand_tensor(&mut rng, &[12, 2, 8]);
        let v = rand_tensor(&mut rng, &[12, 2, 8]);
        let out = full_attention(&q, &k, &v).unwrap();
        let oracle = naive_attention(&q, &k, &v, |_, _, _| true);
        let err = out
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-5, "max abs err {err}");
    }

    #[test]
    fn rejects_indivisible_heads() {
        let q = Tensor::<f64>::zeros(&[4, 3, 2]);
        let k = Tensor::<f64>::zeros(&[4, 2, 2]);
        assert!(full_attention(&q, &k, &k).is_err());
    }

    #[test]
    fn pooling_singletons_and_partial_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = rand_tensor(&mut rng, &[10, 1, 3]);
        assert_eq!(block_pool(&k, 1).unwrap(), k);
        let pooled = block_pool(&k, 4).unwrap();
        assert_eq!(pooled.shape(), &[3, 1, 3]);
        for x in 0..3 {
            let mean = (k.data()[8 * 3 + x] + k.data()[9 * 3 + x]) / 2.0;
            assert!((pooled.data()[2 * 3 + x] - mean).abs() < 1e-15);
        }
        let c = Tensor::from_fn(&[7, 2, 2], |i| [1.5, -2.0][i % 2]);
        let pooled = block_pool(&c, 3).unwrap();
        assert!(pooled.data().chunks(2).all(|r| r == [1.5, -2.0]));
    }

    #[test]
    fn block_scores_constructed_and_orthogonal() {
        let q = [3.0f64, 4.0];
        let norm2 = 25.0;
        let pooled = [7.0 * 3.0 / norm2, 7.0 * 4.0 / norm2, -4.0, 3.0];
        let s = block_scores(&q, &pooled);
        assert!((s[0] - 7.0).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn mean_pool_score_equals_mean_token_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(t_len, s) in &[(10usize, 4usize), (9, 3), (7, 16), (13, 5)] {
            let k = rand_tensor(&mut rng, &[t_len, 1, 6]);
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pooled = block_pool(&k, s).unwrap();
            let scores = block_scores(&q, pooled.data());
            for (b, score) in scores.iter().enumerate() {
                let members: Vec<usize> = (b * s..((b + 1) * s).min(t_len)).collect();
                let token_mean: f64 = members
                    .iter()
                    .map(|&j| (0..6).map(|x| q[x] * k.data()[j * 6 + x]).sum::<f64>())
                    .sum::<f64>()
                    / members.len() as f64;
                assert!((score - token_mean).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn select_all_when_few_blocks_visible() {
        let cfg = AttnConfig::new(4, 3, AttnMode::Sparse, false).unwrap();
        assert_eq!(select_topk(&[0.0f64; 8], 9, &cfg), vec![0, 1, 2]);
        assert_eq!(select_topk(&[0.0f64; 8], 0, &cfg), vec![0]);
    }

    #[test]
    fn ties_prefer_lower_blocks_plus_own() {
        let cfg = AttnConfig::new(4, 3, AttnMode::Sparse, false).unwrap();
        assert_eq!(select_topk(&[1.0f64; 8], 29, &cfg), vec![0, 1, 7]);
    }

    #[test]
    fn selection_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = AttnConfig::new(2, 3, AttnMode::Sparse, false).unwrap();
        for _ in 0..200 {
            let scores: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = 15; // own block 7
            let mut order: Vec<(f64, usize)> = scores[..7].iter().copied().zip(0..).collect();
            order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut expected: Vec<usize> = order[..2].iter().map(|x| x.1).collect();
            expected.push(7);
            expected.sort();
            assert_eq!(select_topk(&scores, t, &cfg), expected);
        }
    }

    #[test]
    fn sparse_matches_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_tensor(&mut rng, &[23, 4, 4]);
        let k = rand_tensor(&mut rng, &[23, 2, 4]);
        let v = rand_tensor(&mut rng, &[23, 2, 4]);
        let cfg = AttnConfig::new(3, 2, AttnMode::Sparse, false).unwrap();
        let (out, sel) = sparse_attention(&q, &k, &v, &cfg).unwrap();
        let oracle = naive_attention(&q, &k, &v, |h, t, j| sel[h].contains(t, j / 3));
        let err = out
            .data()
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
        for s in &sel {
            for t in 0..23 {
                assert!(s.attended_keys(t) <= cfg.receptive_field());
                assert!(s.contains(t, t / 3));
                assert_eq!(s.blocks(t).len(), cfg.top_k.min(t / 3 + 1));
            }
        }
    }

    #[test]
    fn sparse_equals_full_when_covering() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_tensor(&mut rng, &[20, 2, 4]);
        let k = rand_tensor(&mut rng, &[20, 1, 4]);
        let v = rand_tensor(&mut rng, &[20, 1, 4]);
        let cfg = AttnConfig::new(4, 5, AttnMode::Sparse, false).unwrap();
        let (sparse, _) = sparse_attention(&q, &k, &v, &cfg).unwrap();
        let full = full_attention(&q, &k, &v).unwrap();
        assert!(sparse.max_abs_diff(&full) <= 1e-10);
    }

    #[test]
    fn receptive_field_of_sixteen_by_sixteen() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = AttnConfig::new(16, 16, AttnMode::Sparse, false).unwrap();
        assert_eq!(cfg.receptive_field(), 256);
        let q = rand_tensor(&mut rng, &[600, 1, 2]);
        let k = rand_tensor(&mut rng, &[600, 1, 2]);
        let layout = HeadLayout::new(600, 1, 1, 2).unwrap();
        let plan = AttendPlan::sparse(layout, &select_blocks(q.data(), k.data(), &layout, &cfg));
        assert!((0..600).all(|t| plan.keys_attended(0, t) <= 256));
        assert_eq!(plan.keys_attended(0, 599), 256 - 16 + (599 % 16) + 1);
    }
}
