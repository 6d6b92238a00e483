//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse, so creation order is a valid topological
//! order. Nodes record whether any input can carry a gradient; constants
//! and [`Graph::stop_gradient`] outputs cut the backward pass.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{attend_backward, attend_forward, AttendPlan};
use crate::error::{Error, Result};
use crate::kernels::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Rotary tables for one call: `cos`/`sin` laid out `[T, head_dim / 2]`.
#[derive(Debug, Clone)]
struct RopeTable<F> {
    cos: Vec<F>,
    sin: Vec<F>,
    head_dim: usize,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
    },
    /// `a · bᵀ` with `b` stored `[m, k]`.
    MatMulT {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        scale: Var,
        inv_rms: Vec<F>,
    },
    Rope {
        x: Var,
        table: RopeTable<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: AttendPlan,
        probs: Vec<F>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        probs: Vec<F>,
        count: usize,
    },
    SmoothL1 {
        a: Var,
        b: Var,
        beta: F,
    },
    StopGradient,
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    param_vars: Vec<(ParamId, Var)>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to `var`, or `None` if no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&[F]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.param_vars.push((id, v));
        v
    }

    /// `a[.., k] · b[k, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![F::zero(); n * m];
        matmul_acc(av.data(), bv.data(), &mut out, n, k, m);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul { a, b }, ng))
    }

    /// `a[.., k] · b[m, k]ᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[1] {
            return Err(shape_err("matmul_t", av.shape(), bv.shape()));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.shape()[0]);
        let mut out = vec![F::zero(); n * m];
        matmul_bt_acc(av.data(), bv.data(), &mut out, n, k, m);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let t = Tensor::new(shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMulT { a, b }, ng))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let av = self.value(a);
        Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|&x| f(x)).collect(),
        )
        .unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Adds a `[cols]` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(shape_err("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias { x, bias }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let t = self.map(a, |x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(t, Op::Silu(a), ng)
    }

    /// `x / sqrt(mean(x²) + eps) * scale` over the last dimension.
    pub fn rmsnorm(&mut self, x: Var, scale: Var, eps: F) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        let c = xv.cols();
        if sv.len() != c {
            return Err(shape_err("rmsnorm", xv.shape(), sv.shape()));
        }
        let mut data = vec![F::zero(); xv.len()];
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for (row, out) in xv.data().chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / F::from_usize(c);
            let r = F::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, &v), &g) in out.iter_mut().zip(row).zip(sv.data()) {
                *o = v * r * g;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(scale);
        Ok(self.push(t, Op::RmsNorm { x, scale, inv_rms }, ng))
    }

    /// Rotary embedding on `[T, heads * head_dim]`; dimension `i` pairs with
    /// `i + head_dim / 2` inside each head.
    pub fn rope(&mut self, x: Var, positions: &[usize], theta: F, head_dim: usize) -> Result<Var> {
        let xv = self.value(x);
        if head_dim == 0 || !head_dim.is_multiple_of(2) || !xv.cols().is_multiple_of(head_dim) {
            return Err(Error::InvalidShape {
                op: "rope",
                detail: alloc::format!(
                    "head dim {head_dim} must be even and divide width {}",
                    xv.cols()
                ),
            });
        }
        if positions.len() != xv.rows() {
            return Err(shape_err("rope", xv.shape(), &[positions.len()]));
        }
        let table = rope_table(positions, theta, head_dim);
        let data = rope_rotate(xv.data(), xv.cols(), &table, false);
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Rope { x, table }, ng))
    }

    /// Row lookup `table[ids[t]]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, c) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(tv.row(id as usize));
        }
        let t = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Softmax attention restricted to the keys in `plan`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: AttendPlan) -> Result<Var> {
        let l = plan.layout;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.len() != l.seq_len * l.q_width()
            || kv.len() != l.seq_len * l.kv_width()
            || vv.len() != kv.len()
        {
            return Err(shape_err("attention", qv.shape(), kv.shape()));
        }
        let (out, probs) = attend_forward(qv.data(), kv.data(), vv.data(), &plan);
        let t = Tensor::new(vec![l.seq_len, l.q_width()], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                plan,
                probs,
            },
            ng,
        ))
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if c == 0 {
            return Err(Error::InvalidShape {
                op: "softmax",
                detail: "empty last dimension".into(),
            });
        }
        let mut data = av.data().to_vec();
        data.chunks_exact_mut(c).for_each(softmax_in_place);
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    /// Mean next-token negative log-likelihood; `None` targets are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = lv.data().to_vec();
        let mut total = F::zero();
        let mut count = 0usize;
        for (row, target) in probs.chunks_exact_mut(vocab).zip(targets) {
            let Some(y) = *target else { continue };
            if y as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: y, vocab });
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
            total = total + (lse - row[y as usize]);
            count += 1;
        }
        for (row, target) in probs.chunks_exact_mut(vocab).zip(targets) {
            if target.is_some() {
                softmax_in_place(row);
            }
        }
        let loss = if count == 0 {
            F::zero()
        } else {
            total / F::from_usize(count)
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean SmoothL1 between equally shaped tensors.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: F) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("smooth_l1", av.shape(), bv.shape()));
        }
        let n = av.len().max(1);
        let total: F = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| smooth_l1_value(x - y, beta))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::scalar(total / F::from_usize(n)),
            Op::SmoothL1 { a, b, beta },
            ng,
        ))
    }

    /// Same value, no gradient through this edge.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::StopGradient, false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                detail: "loss must be a scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<F>) -> Result<()> {
        let grads = self.backward(loss)?;
        for &(id, v) in &self.param_vars {
            if let Some(g) = grads.get(v) {
                let acc = store.get_mut(id).grad.data_mut();
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a = *a + x;
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param | Op::StopGradient => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if ng(*a) {
                    matmul_bt_acc(g, bv.data(), slot(grads, *a, n * k), n, m, k);
                }
                if ng(*b) {
                    matmul_at_acc(av.data(), g, slot(grads, *b, k * m), n, k, m);
                }
            }
            Op::MatMulT { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.shape()[0]);
                if ng(*a) {
                    matmul_acc(g, bv.data(), slot(grads, *a, n * k), n, m, k);
                }
                if ng(*b) {
                    matmul_at_acc(g, av.data(), slot(grads, *b, m * k), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if ng(v) {
                        add_into(slot(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if ng(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if ng(*bias) {
                    let c = val(*bias).len();
                    let db = slot(grads, *bias, c);
                    for row in g.chunks_exact(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if ng(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d = *d + gi * y;
                    }
                }
                if ng(*b) {
                    let db = slot(grads, *b, g.len());
                    for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                        *d = *d + gi * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let da = slot(grads, *a, g.len());
                for (d, &gi) in da.iter_mut().zip(g) {
                    *d = *d + gi * *c;
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let da = slot(grads, *a, g.len());
                for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                    *d = *d + gi * yi * (F::one() - yi);
                }
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                let da = slot(grads, *a, g.len());
                for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                    let s = sigmoid(xi);
                    *d = *d + gi * s * (F::one() + xi * (F::one() - s));
                }
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let (xv, sv) = (val(*x), val(*scale).data());
                let c = xv.cols();
                let inv_c = F::one() / F::from_usize(c);
                if ng(*x) {
                    let dx = slot(grads, *x, g.len());
                    for (((row, grow), dxr), &r) in xv
                        .data()
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .zip(inv_rms)
                    {
                        let proj: F = row
                            .iter()
                            .zip(grow)
                            .zip(sv)
                            .map(|((&xi, &gi), &si)| xi * gi * si)
                            .sum();
                        let coef = proj * r * r * r * inv_c;
                        for (((d, &xi), &gi), &si) in dxr.iter_mut().zip(row).zip(grow).zip(sv) {
                            *d = *d + r * si * gi - xi * coef;
                        }
                    }
                }
                if ng(*scale) {
                    let ds = slot(grads, *scale, c);
                    for ((row, grow), &r) in xv
                        .data()
                        .chunks_exact(c)
                        .zip(g.chunks_exact(c))
                        .zip(inv_rms)
                    {
                        for ((d, &xi), &gi) in ds.iter_mut().zip(row).zip(grow) {
                            *d = *d + gi * xi * r;
                        }
                    }
                }
            }
            Op::Rope { x, table } => {
                let c = val(*x).cols();
                let back = rope_rotate(g, c, table, true);
                add_into(slot(grads, *x, g.len()), &back);
            }
            Op::Embedding { table, ids } => {
                let c = val(*table).cols();
                let dt = slot(grads, *table, val(*table).len());
                for (t, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    add_into(&mut dt[id * c..(id + 1) * c], &g[t * c..(t + 1) * c]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                plan,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![F::zero(); qv.len()];
                let mut dk = vec![F::zero(); kv.len()];
                let mut dv = vec![F::zero(); vv.len()];
                attend_backward(qv, kv, vv, probs, plan, g, &mut dq, &mut dk, &mut dv);
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if ng(var) {
                        add_into(slot(grads, var, d.len()), &d);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.cols();
                let da = slot(grads, *a, g.len());
                for ((yr, gr), dr) in y
                    .chunks_exact(c)
                    .zip(g.chunks_exact(c))
                    .zip(da.chunks_exact_mut(c))
                {
                    let dotp: F = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = *d + yi * (gi - dotp);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = val(*logits).cols();
                let w = g[0] / F::from_usize(*count);
                let dl = slot(grads, *logits, probs.len());
                for ((dr, pr), target) in dl
                    .chunks_exact_mut(vocab)
                    .zip(probs.chunks_exact(vocab))
                    .zip(targets)
                {
                    let Some(y) = *target else { continue };
                    for (d, &p) in dr.iter_mut().zip(pr) {
                        *d = *d + w * p;
                    }
                    dr[y as usize] = dr[y as usize] - w;
                }
            }
            Op::SmoothL1 { a, b, beta } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let w = g[0] / F::from_usize(av.len().max(1));
                let deriv: Vec<F> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| smooth_l1_deriv(x - y, *beta) * w)
                    .collect();
                if ng(*a) {
                    add_into(slot(grads, *a, deriv.len()), &deriv);
                }
                if ng(*b) {
                    let db = slot(grads, *b, deriv.len());
                    for (d, &x) in db.iter_mut().zip(&deriv) {
                        *d = *d - x;
                    }
                }
            }
            Op::Sum(a) => {
                let da = slot(grads, *a, val(*a).len());
                da.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = F::one() / sum;
    row.iter_mut().for_each(|x| *x = *x * inv);
}

#[inline]
pub(crate) fn smooth_l1_value<F: Real>(d: F, beta: F) -> F {
    let a = d.abs();
    if a < beta {
        F::of(0.5) * d * d / beta
    } else {
        a - F::of(0.5) * beta
    }
}

#[inline]
fn smooth_l1_deriv<F: Real>(d: F, beta: F) -> F {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

fn rope_table<F: Real>(positions: &[usize], theta: F, head_dim: usize) -> RopeTable<F> {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    let theta = theta.f64();
    for &p in positions {
        for i in 0..half {
            let freq = num_traits::Float::powf(theta, -2.0 * i as f64 / head_dim as f64);
            let (s, c) = num_traits::Float::sin_cos(p as f64 * freq);
            cos.push(F::of(c));
            sin.push(F::of(s));
        }
    }
    RopeTable { cos, sin, head_dim }
}

/// Rotates each `(i, i + d/2)` pair by the position angle (or its inverse).
fn rope_rotate<F: Real>(x: &[F], width: usize, table: &RopeTable<F>, inverse: bool) -> Vec<F> {
    let d = table.head_dim;
    let half = d / 2;
    let mut out = vec![F::zero(); x.len()];
    for (t, (row, orow)) in x
        .chunks_exact(width)
        .zip(out.chunks_exact_mut(width))
        .enumerate()
    {
        let cos = &table.cos[t * half..(t + 1) * half];
        let sin = &table.sin[t * half..(t + 1) * half];
        for (head, ohead) in row.chunks_exact(d).zip(orow.chunks_exact_mut(d)) {
            for i in 0..half {
                let (x0, x1) = (head[i], head[i + half]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                ohead[i] = x0 * c - x1 * s;
                ohead[i + half] = x0 * s + x1 * c;
            }
        }
    }
    out
}

/// Rotary embedding of a `[T, h, d]` tensor at the given positions.
pub fn rope_apply<F: Real>(x: &Tensor<F>, positions: &[usize], theta: F) -> Result<Tensor<F>> {
    let head_dim = x.cols();
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::InvalidShape {
            op: "rope",
            detail: alloc::format!("head dim {head_dim} must be even"),
        });
    }
    if x.shape().first() != Some(&positions.len()) {
        return Err(shape_err("rope", x.shape(), &[positions.len()]));
    }
    let width = x.len() / positions.len().max(1);
    let table = rope_table(positions, theta, head_dim);
    Tensor::new(
        x.shape().to_vec(),
        rope_rotate(x.data(), width, &table, false),
    )
}
