//! Decoder-only transformer with a dual-stream attention forward pass.
//!
//! Each layer is pre-norm: `h = RMSNorm(x)`, rotary q/k, attention in the
//! main mode, an optional gate `sigmoid(h·W_g + b_g)` on the attention
//! output before the output projection, then a SiLU MLP. When the auxiliary
//! stream is on, every layer also runs attention in the opposite mode from
//! the same q/k/v; the pair of raw attention outputs feeds the alignment
//! losses and the auxiliary output goes no further.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    attend_forward, dense_weights, gated_output, select_blocks, AttendPlan, AttnConfig, AttnMode,
    BlockSelection, GateParams, HeadLayout,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
    pub tie_embeddings: bool,
    pub attn: AttnConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 32,
            vocab_size: crate::data::VOCAB_SIZE,
            rope_theta: 500_000.0,
            norm_eps: 1e-5,
            tie_embeddings: true,
            attn: AttnConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return bad("n_layers, d_model and vocab_size must be positive".into());
        }
        if self.n_heads == 0
            || self.n_kv_heads == 0
            || !self.n_heads.is_multiple_of(self.n_kv_heads)
        {
            return bad(format!(
                "n_heads ({}) must be a positive multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return bad(format!(
                "head_dim ({}) must be even and positive",
                self.head_dim
            ));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return bad("rope_theta and norm_eps must be > 0".into());
        }
        self.attn.validate()
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Parameter names and shapes in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, qw, kvw, f) = (
            self.d_model,
            self.q_width(),
            self.kv_width(),
            self.ffn_dim(),
        );
        let mut out = vec![("tok_embeddings".into(), vec![self.vocab_size, d])];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.push((p("attn_norm"), vec![d]));
            out.push((p("wq"), vec![d, qw]));
            out.push((p("wk"), vec![d, kvw]));
            out.push((p("wv"), vec![d, kvw]));
            if self.attn.gate_enabled {
                out.push((p("gate_w"), vec![d, qw]));
                out.push((p("gate_b"), vec![qw]));
            }
            out.push((p("wo"), vec![qw, d]));
            out.push((p("ffn_norm"), vec![d]));
            out.push((p("w1"), vec![d, f]));
            out.push((p("w2"), vec![f, d]));
        }
        out.push(("final_norm".into(), vec![d]));
        if !self.tie_embeddings {
            out.push(("lm_head".into(), vec![self.vocab_size, d]));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    gate: Option<(ParamId, ParamId)>,
    wo: ParamId,
    ffn_norm: ParamId,
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    layers: Vec<LayerIds>,
    final_norm: ParamId,
    head: ParamId,
}

impl Layout {
    fn resolve<F: Real>(cfg: &ModelConfig, store: &ParamStore<F>) -> Result<Self> {
        for (name, shape) in cfg.param_shapes() {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            let got = store.get(id).value.shape();
            if got != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: got.to_vec(),
                    rhs: shape,
                });
            }
        }
        let id = |n: &str| store.find(n).unwrap();
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |n: &str| id(&format!("layers.{l}.{n}"));
                LayerIds {
                    attn_norm: p("attn_norm"),
                    wq: p("wq"),
                    wk: p("wk"),
                    wv: p("wv"),
                    gate: cfg.attn.gate_enabled.then(|| (p("gate_w"), p("gate_b"))),
                    wo: p("wo"),
                    ffn_norm: p("ffn_norm"),
                    w1: p("w1"),
                    w2: p("w2"),
                }
            })
            .collect();
        let embed = id("tok_embeddings");
        Ok(Self {
            embed,
            layers,
            final_norm: id("final_norm"),
            head: if cfg.tie_embeddings {
                embed
            } else {
                id("lm_head")
            },
        })
    }
}

/// Which alignment terms enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignDirection {
    /// Sparsity plus commitment.
    #[default]
    Both,
    /// Only pull full-attention outputs toward frozen sparse outputs.
    SparsityOnly,
    /// Only pull sparse-attention outputs toward frozen full outputs.
    CommitmentOnly,
}

impl AlignDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignDirection::Both => "both",
            AlignDirection::SparsityOnly => "sparsity",
            AlignDirection::CommitmentOnly => "commitment",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: AttnMode,
    pub compute_aux: bool,
    pub capture_attn: bool,
    /// Replaces the model's attention config (block size, top-k, gate switch).
    pub attn: Option<AttnConfig>,
    /// Per-layer block selections to use instead of recomputing them.
    pub pinned: Option<&'a [Vec<BlockSelection>]>,
    /// Per-layer constants standing in for the stop-gradient operands of the
    /// alignment losses (finite differences of the detached objective).
    pub frozen: Option<&'a [FrozenPair]>,
    pub align: AlignDirection,
}

/// Attention outputs `[T, h*d]` of both streams at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPair {
    pub full: Vec<f64>,
    pub sparse: Vec<f64>,
}

impl ForwardOptions<'_> {
    pub fn new(mode: AttnMode) -> Self {
        Self {
            mode,
            compute_aux: false,
            capture_attn: false,
            attn: None,
            pinned: None,
            frozen: None,
            align: AlignDirection::Both,
        }
    }

    pub fn with_aux(mut self, on: bool) -> Self {
        self.compute_aux = on;
        self
    }

    pub fn with_capture(mut self, on: bool) -> Self {
        self.capture_attn = on;
        self
    }
}

/// Full-attention weights of one layer, `[n_heads, T, T]`, plus the block
/// selections made from the same q/k.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    pub seq_len: usize,
    pub n_heads: usize,
    pub weights: Vec<f64>,
    pub selections: Vec<BlockSelection>,
}

impl LayerCapture {
    /// Causal row `t` of `head`: weights on keys `0..=t`.
    pub fn row(&self, head: usize, t: usize) -> &[f64] {
        let base = (head * self.seq_len + t) * self.seq_len;
        &self.weights[base..base + t + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerAlignment {
    pub sparsity: f64,
    pub commitment: f64,
}

#[derive(Debug, Clone)]
pub struct StreamOutput<F> {
    pub logits: Tensor<F>,
    pub ce_loss: Option<F>,
    /// Layer-averaged alignment loss; zero without the auxiliary stream.
    pub alignment_loss: F,
    pub layer_alignment: Vec<LayerAlignment>,
    pub mode_used: AttnMode,
    pub captures: Option<Vec<LayerCapture>>,
    /// Per-layer selections used by whichever stream ran sparse.
    pub selections: Vec<Option<Vec<BlockSelection>>>,
}

/// A built forward graph; `loss` is `ce + alpha · alignment` once assembled
/// by the caller.
pub struct Forward<F> {
    pub graph: Graph<F>,
    pub logits: Var,
    pub ce: Option<Var>,
    pub alignment: Option<Var>,
    /// `(full, sparse)` attention outputs per layer when aux is on.
    pub stream_pairs: Vec<(Var, Var)>,
    pub output: StreamOutput<F>,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    layout: Layout,
}

/// Targets for next-token prediction inside one sequence.
pub fn shifted_targets(tokens: &[u32]) -> Vec<Option<u32>> {
    (0..tokens.len())
        .map(|t| tokens.get(t + 1).copied())
        .collect()
}

impl<F: Real> Model<F> {
    /// Fresh model: matrices ~ N(0, 0.02²), norm scales 1, gate bias 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Config(format!("{e}")))?;
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with("norm") {
                Tensor::from_fn(&shape, |_| F::one())
            } else if name.ends_with("gate_b") {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| F::of(normal.sample(&mut rng)))
            };
            params.add(name, t);
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Builds the forward graph over `self.params`.
    pub fn forward(
        &self,
        tokens: &[u32],
        targets: Option<&[Option<u32>]>,
        opts: ForwardOptions<'_>,
    ) -> Result<Forward<F>> {
        self.forward_with(&self.params, tokens, targets, opts)
    }

    /// Builds the forward graph over an external parameter store laid out
    /// like this model's (used by finite differences).
    pub fn forward_with(
        &self,
        params: &ParamStore<F>,
        tokens: &[u32],
        targets: Option<&[Option<u32>]>,
        opts: ForwardOptions<'_>,
    ) -> Result<Forward<F>> {
        let cfg = &self.config;
        let attn = opts.attn.unwrap_or(cfg.attn);
        attn.validate()?;
        let t_len = tokens.len();
        if t_len == 0 {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if let Some(p) = opts.pinned {
            if p.len() != cfg.n_layers {
                return Err(Error::InvalidInput(format!(
                    "{} pinned selections for {} layers",
                    p.len(),
                    cfg.n_layers
                )));
            }
        }
        if opts.frozen.is_some_and(|f| f.len() != cfg.n_layers) {
            return Err(Error::InvalidInput(
                "frozen alignment operands must cover every layer".into(),
            ));
        }
        let layout = HeadLayout::new(t_len, cfg.n_heads, cfg.n_kv_heads, cfg.head_dim)?;
        let positions: Vec<usize> = (0..t_len).collect();
        let eps = F::of(cfg.norm_eps);
        let theta = F::of(cfg.rope_theta);
        let mut g = Graph::new();
        let embed = g.param(params, self.layout.embed);
        let mut x = g.embedding(embed, tokens)?;

        let mut align_sum: Option<Var> = None;
        let mut layer_alignment = Vec::new();
        let mut captures = opts.capture_attn.then(Vec::new);
        let mut selections_out = Vec::with_capacity(cfg.n_layers);
        let mut stream_pairs = Vec::new();

        for (l, ids) in self.layout.layers.iter().enumerate() {
            let norm = g.param(params, ids.attn_norm);
            let h = g.rmsnorm(x, norm, eps)?;
            let wq = g.param(params, ids.wq);
            let wk = g.param(params, ids.wk);
            let wv = g.param(params, ids.wv);
            let q = g.matmul(h, wq)?;
            let q = g.rope(q, &positions, theta, cfg.head_dim)?;
            let k = g.matmul(h, wk)?;
            let k = g.rope(k, &positions, theta, cfg.head_dim)?;
            let v = g.matmul(h, wv)?;

            let needs_sparse = opts.mode == AttnMode::Sparse || opts.compute_aux;
            let selection = if needs_sparse || opts.capture_attn {
                Some(match opts.pinned {
                    Some(p) => p[l].clone(),
                    None => select_blocks(g.value(q).data(), g.value(k).data(), &layout, &attn),
                })
            } else {
                None
            };
            let plan_for = |mode: AttnMode| match mode {
                AttnMode::Full => AttendPlan::full(layout),
                AttnMode::Sparse => AttendPlan::sparse(layout, selection.as_ref().unwrap()),
            };

            let a_main = g.attention(q, k, v, plan_for(opts.mode))?;
            if opts.compute_aux {
                let a_aux = g.attention(q, k, v, plan_for(opts.mode.opposite()))?;
                let (a_full, a_sparse) = match opts.mode {
                    AttnMode::Full => (a_main, a_aux),
                    AttnMode::Sparse => (a_aux, a_main),
                };
                stream_pairs.push((a_full, a_sparse));
                let (sp, cm) = match opts.frozen {
                    Some(fz) => {
                        let shape = g.value(a_full).shape().to_vec();
                        let fz = &fz[l];
                        let to = |v: &[f64]| {
                            Tensor::new(shape.clone(), v.iter().map(|&x| F::of(x)).collect())
                        };
                        let (c_full, c_sparse) =
                            (g.constant(to(&fz.full)?), g.constant(to(&fz.sparse)?));
                        (
                            g.smooth_l1(a_full, c_sparse, F::one())?,
                            g.smooth_l1(a_sparse, c_full, F::one())?,
                        )
                    }
                    None => alignment_pair(&mut g, a_full, a_sparse)?,
                };
                layer_alignment.push(LayerAlignment {
                    sparsity: g.scalar(sp).f64(),
                    commitment: g.scalar(cm).f64(),
                });
                let term = match opts.align {
                    AlignDirection::Both => g.add(sp, cm)?,
                    AlignDirection::SparsityOnly => sp,
                    AlignDirection::CommitmentOnly => cm,
                };
                align_sum = Some(match align_sum {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            if let Some(caps) = captures.as_mut() {
                let full = AttendPlan::full(layout);
                let (_, probs) = attend_forward(
                    g.value(q).data(),
                    g.value(k).data(),
                    g.value(v).data(),
                    &full,
                );
                caps.push(LayerCapture {
                    seq_len: t_len,
                    n_heads: cfg.n_heads,
                    weights: dense_weights(&probs, &full)
                        .into_iter()
                        .map(Real::f64)
                        .collect(),
                    selections: selection.clone().unwrap(),
                });
            }
            selections_out.push(if needs_sparse { selection } else { None });

            let gate = match (ids.gate, attn.gate_enabled) {
                (Some((w, b)), true) => Some(GateParams {
                    weight: g.param(params, w),
                    bias: g.param(params, b),
                }),
                _ => None,
            };
            let wo = g.param(params, ids.wo);
            let o = gated_output(&mut g, h, a_main, gate, wo)?;
            x = g.add(x, o)?;

            let norm2 = g.param(params, ids.ffn_norm);
            let h2 = g.rmsnorm(x, norm2, eps)?;
            let w1 = g.param(params, ids.w1);
            let w2 = g.param(params, ids.w2);
            let up = g.matmul(h2, w1)?;
            let act = g.silu(up);
            let down = g.matmul(act, w2)?;
            x = g.add(x, down)?;
        }

        let fnorm = g.param(params, self.layout.final_norm);
        let xf = g.rmsnorm(x, fnorm, eps)?;
        let head = g.param(params, self.layout.head);
        let logits = g.matmul_t(xf, head)?;

        let alignment = align_sum.map(|s| g.scale(s, F::one() / F::from_usize(cfg.n_layers)));
        let ce = match targets {
            Some(t) => Some(g.cross_entropy(logits, t)?),
            None => None,
        };
        let logits_t = g.value(logits).clone();
        if !logits_t.all_finite() {
            return Err(Error::NonFinite {
                what: "logits".into(),
            });
        }
        let output = StreamOutput {
            logits: logits_t,
            ce_loss: ce.map(|c| g.scalar(c)),
            alignment_loss: alignment.map_or(F::zero(), |a| g.scalar(a)),
            layer_alignment,
            mode_used: opts.mode,
            captures,
            selections: selections_out,
        };
        Ok(Forward {
            graph: g,
            logits,
            ce,
            alignment,
            stream_pairs,
            output,
        })
    }

    /// Dual-stream forward with next-token targets taken from `tokens`.
    pub fn ssa_forward(
        &self,
        tokens: &[u32],
        mode: AttnMode,
        compute_aux: bool,
        capture_attn: bool,
    ) -> Result<StreamOutput<F>> {
        let targets = shifted_targets(tokens);
        let opts = ForwardOptions::new(mode)
            .with_aux(compute_aux)
            .with_capture(capture_attn);
        Ok(self.forward(tokens, Some(&targets), opts)?.output)
    }

    /// Logits only; `cfg_override` evaluates any block size / top-k.
    pub fn forward_inference(
        &self,
        tokens: &[u32],
        mode: AttnMode,
        cfg_override: Option<AttnConfig>,
    ) -> Result<Tensor<F>> {
        let mut opts = ForwardOptions::new(mode);
        opts.attn = cfg_override;
        Ok(self.forward(tokens, None, opts)?.output.logits)
    }
}

impl<F: Real> Forward<F> {
    /// Values of the per-layer stream pairs, for [`ForwardOptions::frozen`].
    pub fn frozen_pairs(&self) -> Vec<FrozenPair> {
        let vals = |v: Var| self.graph.value(v).data().iter().map(|x| x.f64()).collect();
        self.stream_pairs
            .iter()
            .map(|&(f, s)| FrozenPair {
                full: vals(f),
                sparse: vals(s),
            })
            .collect()
    }
}

/// `(SmoothL1(a_full, sg[a_sparse]), SmoothL1(a_sparse, sg[a_full]))`
pub fn alignment_pair<F: Real>(g: &mut Graph<F>, a_full: Var, a_sparse: Var) -> Result<(Var, Var)> {
    let sg_sparse = g.stop_gradient(a_sparse);
    let sparsity = g.smooth_l1(a_full, sg_sparse, F::one())?;
    let sg_full = g.stop_gradient(a_full);
    let commitment = g.smooth_l1(a_sparse, sg_full, F::one())?;
    Ok((sparsity, commitment))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(gate: bool, top_k: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            vocab_size: 11,
            attn: AttnConfig::new(4, top_k, AttnMode::Sparse, gate).unwrap(),
            ..ModelConfig::default()
        }
    }

    fn tokens(n: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 7 + 3) % 11) as u32).collect()
    }

    #[test]
    fn config_rejects_bad_heads() {
        let mut c = toy(true, 2);
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
        c.n_kv_heads = 2;
        c.head_dim = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_token_rejected() {
        let m = Model::<f64>::new(toy(true, 2), 0).unwrap();
        assert!(matches!(
            m.forward_inference(&[1, 11], AttnMode::Full, None),
            Err(Error::TokenOutOfRange { id: 11, .. })
        ));
    }

    #[test]
    fn no_aux_means_zero_alignment_and_same_logits() {
        let m = Model::<f64>::new(toy(true, 2), 1).unwrap();
        let tk = tokens(20);
        let a = m.ssa_forward(&tk, AttnMode::Sparse, false, false).unwrap();
        let b = m.ssa_forward(&tk, AttnMode::Sparse, true, false).unwrap();
        assert_eq!(a.alignment_loss, 0.0);
        assert_eq!(a.logits, b.logits);
        assert!(b.alignment_loss > 0.0);
        assert_eq!(
            m.forward_inference(&tk, AttnMode::Sparse, None).unwrap(),
            a.logits
        );
    }

    #[test]
    fn covering_top_k_gives_zero_alignment() {
        let m = Model::<f64>::new(toy(true, 5), 2).unwrap();
        let out = m
            .ssa_forward(&tokens(20), AttnMode::Full, true, false)
            .unwrap();
        assert!(out.alignment_loss.abs() <= 1e-10);
        assert!(out
            .layer_alignment
            .iter()
            .all(|l| l.sparsity <= 1e-10 && l.commitment <= 1e-10));
    }

    #[test]
    fn tied_head_shares_embedding() {
        let mut m = Model::<f64>::new(toy(true, 2), 3).unwrap();
        assert!(m.params.find("lm_head").is_none());
        let before = m.forward_inference(&[1, 2], AttnMode::Full, None).unwrap();
        let e = m.params.find("tok_embeddings").unwrap();
        m.params.get_mut(e).value.data_mut()[5 * 16] += 1.0;
        let after = m.forward_inference(&[1, 2], AttnMode::Full, None).unwrap();
        assert_ne!(before.data()[5], after.data()[5]);
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = Model::<f32>::new(toy(true, 2), 0).unwrap();
        let mut cfg = m.config;
        cfg.d_model = 8;
        assert!(Model::from_params(cfg, m.params.clone()).is_err());
        let mut cfg = m.config;
        cfg.attn.gate_enabled = false;
        assert!(Model::from_params(cfg, m.params.clone()).is_ok());
    }
}
