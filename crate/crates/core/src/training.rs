//! Loss assembly, stream routing, AdamW and the training loop.
//!
//! Everything random during training is counter-based: the stream mode and
//! the batch for step `n` are drawn from generators seeded by `(seed, n)`,
//! so a resumed run replays exactly what an uninterrupted run would do.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttnMode;
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{AlignDirection, ForwardOptions, Model};
use crate::real::Real;
use crate::tensor::ParamStore;

const ROUTE_STREAM: u64 = 0x726f_7574;
const BATCH_STREAM: u64 = 0x6261_7463;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Alignment weight.
    pub alpha: f64,
    /// Probability of the full-attention stream on a step.
    pub p_full: f64,
    pub lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    /// Sequences per step.
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Steps between checkpoints.
    pub eval_interval: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub align: AlignDirection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            p_full: 0.5,
            lr: 3e-3,
            total_steps: 1000,
            warmup_steps: 50,
            batch_size: 4,
            seq_len: 128,
            seed: 0,
            eval_interval: 250,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            align: AlignDirection::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.p_full) {
            return bad(format!("p_full must lie in [0, 1], got {}", self.p_full));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn batch_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * lr_multiplier(step, self.warmup_steps, self.total_steps)
    }
}

/// Linear warmup to 1 at `warmup`, then cosine decay to 0 at `total`.
pub fn lr_multiplier(step: u64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    if step >= total || total == warmup {
        return if step >= total { 0.0 } else { 1.0 };
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * (1.0 + Float::cos(PI * progress))
}

fn step_rng(seed: u64, stream: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(step as u128 * 16);
    rng
}

/// Stream for `step`: FULL with probability `p_full` while training, SPARSE
/// otherwise.
pub fn route_mode(seed: u64, step: u64, p_full: f64, is_training: bool) -> AttnMode {
    if !is_training {
        return AttnMode::Sparse;
    }
    let u: f64 = step_rng(seed, ROUTE_STREAM, step).random();
    if u < p_full {
        AttnMode::Full
    } else {
        AttnMode::Sparse
    }
}

/// `ce + alpha · alignment`
pub fn total_loss(ce: f64, alignment: f64, alpha: f64) -> Result<f64> {
    if !ce.is_finite() || !alignment.is_finite() {
        return Err(Error::NonFinite {
            what: format!("loss (ce {ce}, alignment {alignment})"),
        });
    }
    Ok(ce + alpha * alignment)
}

/// `(sparsity, commitment)` losses between two attention outputs; see
/// [`crate::model::alignment_pair`].
pub fn alignment_losses<F: Real>(
    g: &mut Graph<F>,
    a_full: Var,
    a_sparse: Var,
) -> Result<(Var, Var)> {
    crate::model::alignment_pair(g, a_full, a_sparse)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// AdamW with decoupled weight decay on matrices (rank ≥ 2) only.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    /// Updates applied so far.
    pub t: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ParamStore<F>, config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| vec![F::zero(); p.value.len()])
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient {
                name: p.name.clone(),
            });
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bc1 = F::of(1.0 - Float::powi(c.beta1, self.t as i32));
        let bc2 = F::of(1.0 - Float::powi(c.beta2, self.t as i32));
        let (lr_f, eps) = (F::of(lr), F::of(c.eps));
        let decay = F::of(lr * c.weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decayed = p.value.shape().len() >= 2;
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut x = value[i];
                if decayed {
                    x = x - decay * x;
                }
                value[i] = x - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<F: Real>(params: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.f64() * g.f64())
        .sum();
    let norm = Float::sqrt(sq);
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }
    norm
}

/// Aborts when ce stays above `factor ×` the first observed ce for
/// `patience` consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceMonitor {
    pub initial: Option<f64>,
    pub run: u64,
    pub factor: f64,
    pub patience: u64,
}

impl Default for DivergenceMonitor {
    fn default() -> Self {
        Self {
            initial: None,
            run: 0,
            factor: 10.0,
            patience: 100,
        }
    }
}

impl DivergenceMonitor {
    pub fn observe(&mut self, step: u64, ce: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(ce);
        if ce > self.factor * initial {
            self.run += 1;
        } else {
            self.run = 0;
        }
        if self.run >= self.patience {
            return Err(Error::Diverged { step, ce, initial });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub mode: AttnMode,
    pub ce: f64,
    pub align: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Supplies the batch for a given step.
pub trait BatchSource {
    fn batch(&mut self, step: u64) -> Result<Vec<Sequence>>;
}

/// Draws `batch_size` windows uniformly (with replacement) per step from a
/// fixed window list, seeded by `(seed, step)`.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    pub windows: Vec<Sequence>,
    pub batch_size: usize,
    pub seed: u64,
}

impl WindowSampler {
    pub fn new(windows: Vec<Sequence>, batch_size: usize, seed: u64) -> Result<Self> {
        if windows.is_empty() || batch_size == 0 {
            return Err(Error::InvalidInput(
                "sampler needs windows and a positive batch size".into(),
            ));
        }
        Ok(Self {
            windows,
            batch_size,
            seed,
        })
    }

    pub fn indices(&self, step: u64) -> Vec<usize> {
        let mut rng = step_rng(self.seed, BATCH_STREAM, step);
        (0..self.batch_size)
            .map(|_| rng.random_range(0..self.windows.len()))
            .collect()
    }
}

impl BatchSource for WindowSampler {
    fn batch(&mut self, step: u64) -> Result<Vec<Sequence>> {
        Ok(self
            .indices(step)
            .into_iter()
            .map(|i| self.windows[i].clone())
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub model: Model<F>,
    pub opt: AdamW<F>,
    pub cfg: TrainConfig,
    /// Next step to run.
    pub step: u64,
    pub monitor: DivergenceMonitor,
}

impl<F: Real> Trainer<F> {
    pub fn new(model: Model<F>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.params, AdamWConfig::from(&cfg));
        Ok(Self {
            model,
            opt,
            cfg,
            step: 0,
            monitor: DivergenceMonitor::default(),
        })
    }

    /// Routes, runs forward/backward over `batch`, clips and updates.
    pub fn train_step(&mut self, batch: &[Sequence]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let step = self.step;
        let cfg = self.cfg;
        let mode = route_mode(cfg.seed, step, cfg.p_full, true);
        let mut opts = ForwardOptions::new(mode).with_aux(cfg.alpha > 0.0);
        opts.align = cfg.align;
        let inv_b = F::one() / F::from_usize(batch.len());

        self.model.params.zero_grads();
        let (mut ce_sum, mut align_sum) = (0.0, 0.0);
        for row in batch {
            let mut f = self.model.forward(&row.inputs, Some(&row.targets), opts)?;
            let ce = f.ce.expect("targets given");
            let ce_v = f.graph.scalar(ce).f64();
            let mut loss = ce;
            if let Some(a) = f.alignment {
                align_sum += f.graph.scalar(a).f64();
                let weighted = f.graph.scale(a, F::of(cfg.alpha));
                loss = f.graph.add(loss, weighted)?;
            }
            if !ce_v.is_finite() || !f.graph.scalar(loss).is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            ce_sum += ce_v;
            let loss = f.graph.scale(loss, inv_b);
            f.graph.backward_into(loss, &mut self.model.params)?;
        }
        let n = batch.len() as f64;
        let (ce, align) = (ce_sum / n, align_sum / n);
        let total = total_loss(ce, align, cfg.alpha).map_err(|_| Error::NonFiniteLoss { step })?;
        let grad_norm = clip_grad_norm(&mut self.model.params, cfg.grad_clip);
        let lr = cfg.lr_at(step);
        self.opt.step(&mut self.model.params, lr)?;
        self.step += 1;
        self.monitor.observe(step, ce)?;
        Ok(StepRecord {
            step,
            mode,
            ce,
            align,
            total,
            lr,
            grad_norm,
        })
    }

    /// Runs until `total_steps`, calling `on_step` after every update.
    pub fn run<S, C>(&mut self, source: &mut S, mut on_step: C) -> Result<()>
    where
        S: BatchSource,
        C: FnMut(&Self, &StepRecord) -> Result<()>,
    {
        while self.step < self.cfg.total_steps {
            let batch = source.batch(self.step)?;
            let rec = self.train_step(&batch)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttnConfig;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn toy_model() -> Model<f64> {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
            vocab_size: 7,
            attn: AttnConfig::new(2, 2, AttnMode::Sparse, true).unwrap(),
            ..ModelConfig::default()
        };
        Model::new(cfg, 4).unwrap()
    }

    fn rows() -> Vec<Sequence> {
        (0..3)
            .map(|r| {
                let toks: Vec<u32> = (0..9).map(|i| ((i * 3 + r) % 7) as u32).collect();
                Sequence {
                    inputs: toks[..8].to_vec(),
                    targets: toks[1..].iter().map(|&t| Some(t)).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_multiplier(10, 10, 100), 1.0);
        assert_eq!(lr_multiplier(100, 10, 100), 0.0);
        assert!((lr_multiplier(55, 10, 100) - 0.5).abs() < 1e-12);
        assert!(lr_multiplier(0, 10, 100) > 0.0);
    }

    #[test]
    fn routing_extremes_and_rate() {
        assert!((0..500).all(|s| route_mode(3, s, 1.0, true) == AttnMode::Full));
        assert!((0..500).all(|s| route_mode(3, s, 0.0, true) == AttnMode::Sparse));
        assert_eq!(route_mode(3, 0, 1.0, false), AttnMode::Sparse);
        let full = (0..10_000)
            .filter(|&s| route_mode(11, s, 0.5, true) == AttnMode::Full)
            .count();
        assert!((full as f64 / 1e4 - 0.5).abs() <= 0.02, "{full}");
        assert_eq!(route_mode(7, 42, 0.5, true), route_mode(7, 42, 0.5, true));
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(2.0, 0.7, 0.0).unwrap(), 2.0);
        assert!((total_loss(2.0, 0.1, 10.0).unwrap() - 3.0).abs() < 1e-12);
        let (a10, a20) = (
            total_loss(2.0, 0.3, 10.0).unwrap(),
            total_loss(2.0, 0.3, 20.0).unwrap(),
        );
        assert!(((a20 - 2.0) - 2.0 * (a10 - 2.0)).abs() < 1e-12);
        assert!(total_loss(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn adamw_two_steps_match_recurrence() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut opt = AdamW::new(&store, cfg);
        let (g, lr) = (0.2, 0.01);
        let (mut theta, mut m, mut v) = (0.5f64, 0.0, 0.0);
        for t in 1..=2 {
            store.get_mut(crate::tensor::ParamId(0)).grad.data_mut()[0] = g;
            opt.step(&mut store, lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            theta = theta - lr * 0.1 * theta - lr * mh / (vh.sqrt() + 1e-8);
        }
        let got = store.get(crate::tensor::ParamId(0)).value.data()[0];
        assert!((got - theta).abs() < 1e-15, "{got} vs {theta}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.add("fine", Tensor::scalar(1.0));
        let bad = store.add("broken", Tensor::scalar(1.0));
        store.get_mut(bad).grad.data_mut()[0] = f64::INFINITY;
        let mut opt = AdamW::new(&store, AdamWConfig::from(&TrainConfig::default()));
        match opt.step(&mut store, 1e-3) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "broken"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[2]));
        store
            .get_mut(id)
            .grad
            .data_mut()
            .copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert!((store.get(id).grad.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn divergence_after_patience() {
        let mut m = DivergenceMonitor {
            patience: 3,
            ..Default::default()
        };
        m.observe(0, 1.0).unwrap();
        m.observe(1, 20.0).unwrap();
        m.observe(2, 20.0).unwrap();
        m.observe(3, 1.0).unwrap();
        m.observe(4, 20.0).unwrap();
        m.observe(5, 20.0).unwrap();
        assert!(matches!(
            m.observe(6, 20.0),
            Err(Error::Diverged { step: 6, .. })
        ));
    }

    #[test]
    fn alpha_zero_full_matches_plain_trainer() {
        let cfg = TrainConfig {
            alpha: 0.0,
            p_full: 1.0,
            total_steps: 4,
            warmup_steps: 1,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(toy_model(), cfg).unwrap();
        let mut plain = toy_model();
        let mut opt = AdamW::new(&plain.params, AdamWConfig::from(&cfg));
        let batch = rows();
        for step in 0..4 {
            let rec = trainer.train_step(&batch).unwrap();
            assert_eq!(rec.mode, AttnMode::Full);
            assert_eq!(rec.align, 0.0);
            plain.params.zero_grads();
            for r in &batch {
                let mut f = plain
                    .forward(
                        &r.inputs,
                        Some(&r.targets),
                        ForwardOptions::new(AttnMode::Full),
                    )
                    .unwrap();
                let l = f.graph.scale(f.ce.unwrap(), 1.0 / 3.0);
                f.graph.backward_into(l, &mut plain.params).unwrap();
            }
            clip_grad_norm(&mut plain.params, cfg.grad_clip);
            opt.step(&mut plain.params, cfg.lr_at(step)).unwrap();
        }
        for (a, b) in trainer.model.params.iter().zip(plain.params.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    #[test]
    fn sampler_is_counter_based() {
        let s = WindowSampler::new(rows(), 4, 9).unwrap();
        assert_eq!(s.indices(17), s.indices(17));
        assert_ne!(s.indices(17), s.indices(18));
    }
}
