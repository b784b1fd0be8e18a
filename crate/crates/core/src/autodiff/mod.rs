//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! Leaves are either trainable parameters or constants; a node requires a
//! gradient only if one of its ancestors is a trainable leaf, so constants
//! never accumulate gradient storage at all.
//!
//! GeLU uses the tanh approximation
//! `0.5 x (1 + tanh(sqrt(2/π) (x + 0.044715 x³)))`.

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{contraction_plan, gemm, inverse_permutation, Layout, Tensor};

pub const GELU_COEF: f64 = 0.044_715;
pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpTag {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddLast,
    MulLast,
    Matmul,
    Bmm,
    Contract,
    Permute,
    Reshape,
    Narrow,
    Softmax,
    Gelu,
    LayerNorm,
    Embedding,
    CrossEntropy,
    SoftCrossEntropy,
    Sum,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddLast(Var, Var),
    MulLast(Var, Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    Contract {
        a: Var,
        b: Var,
        modes_a: Vec<usize>,
        modes_b: Vec<usize>,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Tensor,
        probs: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Add(..) => OpTag::Add,
            Op::Sub(..) => OpTag::Sub,
            Op::Mul(..) => OpTag::Mul,
            Op::Scale(..) => OpTag::Scale,
            Op::AddLast(..) => OpTag::AddLast,
            Op::MulLast(..) => OpTag::MulLast,
            Op::Matmul(..) => OpTag::Matmul,
            Op::Bmm(..) => OpTag::Bmm,
            Op::Contract { .. } => OpTag::Contract,
            Op::Permute(..) => OpTag::Permute,
            Op::Reshape(..) => OpTag::Reshape,
            Op::Narrow { .. } => OpTag::Narrow,
            Op::Softmax(..) => OpTag::Softmax,
            Op::Gelu(..) => OpTag::Gelu,
            Op::LayerNorm { .. } => OpTag::LayerNorm,
            Op::Embedding { .. } => OpTag::Embedding,
            Op::CrossEntropy { .. } => OpTag::CrossEntropy,
            Op::SoftCrossEntropy { .. } => OpTag::SoftCrossEntropy,
            Op::Sum(..) => OpTag::Sum,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to each trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let last = t.shape().last().copied().unwrap_or(1);
    (t.len() / last, last)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_tag(&self, v: Var) -> OpTag {
        self.nodes[v.0].op.tag()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, trainable: bool, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, false, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).scale(alpha);
        self.push(v, Op::Scale(a, alpha), &[a])
    }

    fn check_last(&self, x: Var, vec: Var) -> Result<()> {
        let xs = self.value(x).shape();
        let vs = self.value(vec).shape();
        if vs.len() != 1 || xs.last() != Some(&vs[0]) {
            return Err(shape_err!("broadcast of {vs:?} over last mode of {xs:?}"));
        }
        Ok(())
    }

    /// `x + bias` with `bias` broadcast along the last mode.
    pub fn add_last(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_last(x, bias)?;
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(b.len()) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        Ok(self.push(v, Op::AddLast(x, bias), &[x, bias]))
    }

    /// `x * gain` with `gain` broadcast along the last mode.
    pub fn mul_last(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.check_last(x, gain)?;
        let g = self.value(gain).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(g.len()) {
            for (o, gg) in row.iter_mut().zip(&g) {
                *o *= gg;
            }
        }
        Ok(self.push(v, Op::MulLast(x, gain), &[x, gain]))
    }

    /// `x (..., k) · w (k, n) -> (..., n)`; covers the plain 2-D product.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err!("matmul {xs:?} x {ws:?}"));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            Layout::Normal,
            self.value(w).data(),
            Layout::Normal,
            &mut out,
            false,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Matmul(x, w), &[x, w]))
    }

    /// Batched product `(g, m, k) · (g, k, n) -> (g, m, n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (g, m, k, n) = self.bmm_dims(a, b)?;
        let mut out = vec![0.0; g * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &bv[i * k * n..(i + 1) * k * n],
                Layout::Normal,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let v = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(v, Op::Bmm(a, b), &[a, b]))
    }

    fn bmm_dims(&self, a: Var, b: Var) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err!("bmm {sa:?} x {sb:?}"));
        }
        Ok((sa[0], sa[1], sa[2], sb[2]))
    }

    pub fn contract(&mut self, a: Var, modes_a: &[usize], b: Var, modes_b: &[usize]) -> Result<Var> {
        let v = crate::tensor::contract(self.value(a), modes_a, self.value(b), modes_b)?;
        let op = Op::Contract {
            a,
            b,
            modes_a: modes_a.to_vec(),
            modes_b: modes_b.to_vec(),
        };
        Ok(self.push(v, op, &[a, b]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        Ok(self.push(v, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Softmax over the last mode, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        if v.order() == 0 {
            return Err(shape_err!("softmax needs order >= 1"));
        }
        let (_, last) = rows_of(&v);
        for row in v.data_mut().chunks_mut(last) {
            softmax_row(row);
        }
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    /// Normalizes each last-mode row to zero mean and unit (population)
    /// variance; gain and bias are applied separately.
    pub fn layernorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(invalid!("layernorm eps must be positive, got {eps}"));
        }
        let mut v = self.value(x).clone();
        if v.order() == 0 {
            return Err(shape_err!("layernorm needs order >= 1"));
        }
        let (rows, last) = rows_of(&v);
        let mut rstd = Vec::with_capacity(rows);
        for row in v.data_mut().chunks_mut(last) {
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / last as f64;
            let r = 1.0 / (var + eps).sqrt();
            for z in row.iter_mut() {
                *z = (*z - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.push(v, Op::LayerNorm { x, rstd }, &[x]))
    }

    /// Rows of `table (V, D)` selected by `ids`, shaped `(ids.len(), D)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.order() != 2 {
            return Err(shape_err!("embedding table must be order 2, got {:?}", t.shape()));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(invalid!("token id {id} out of range for vocabulary {vocab}"));
            }
            out.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let v = Tensor::new(vec![ids.len(), dim], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(v, op, &[table]))
    }

    /// Mean token cross-entropy of `logits (N, V)` against integer targets,
    /// computed through a max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.order() != 2 || z.shape()[0] != targets.len() {
            return Err(shape_err!(
                "cross_entropy logits {:?} vs {} targets",
                z.shape(),
                targets.len()
            ));
        }
        let (n, vocab) = (z.shape()[0], z.shape()[1]);
        let mut probs = z.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            if t >= vocab {
                return Err(invalid!("target {t} out of range for vocabulary {vocab}"));
            }
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            softmax_row(row);
        }
        let v = Tensor::scalar(loss / n as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(v, op, &[logits]))
    }

    /// Mean cross-entropy of `logits (N, V)` against target distributions
    /// `target (N, V)` (rows summing to one).
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.order() != 2 || z.shape() != target.shape() {
            return Err(shape_err!(
                "soft_cross_entropy logits {:?} vs target {:?}",
                z.shape(),
                target.shape()
            ));
        }
        let (n, vocab) = (z.shape()[0], z.shape()[1]);
        let mut probs = z.data().to_vec();
        let mut loss = 0.0;
        for (row, p) in probs.chunks_mut(vocab).zip(target.data().chunks(vocab)) {
            let lse = log_sum_exp(row);
            loss += row.iter().zip(p).map(|(zi, pi)| pi * (lse - zi)).sum::<f64>();
            softmax_row(row);
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            v,
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(invalid!("backward from a node that was never recorded"));
        }
        if self.value(root).order() != 0 {
            return Err(shape_err!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[i].trainable {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Scale(a, alpha) => self.accumulate(grads, *a, g.scale(*alpha))?,
            Op::AddLast(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.requires_grad(*bias) {
                    let d = self.value(*bias).len();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![d], gb)?)?;
                }
            }
            Op::MulLast(x, gain) => {
                let w = self.value(*gain).data();
                let d = w.len();
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for row in gx.data_mut().chunks_mut(d) {
                        for (o, ww) in row.iter_mut().zip(w) {
                            *o *= ww;
                        }
                    }
                    self.accumulate(grads, *x, gx)?;
                }
                if self.requires_grad(*gain) {
                    let mut gw = vec![0.0; d];
                    for (grow, xrow) in g.data().chunks(d).zip(self.value(*x).data().chunks(d)) {
                        for j in 0..d {
                            gw[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(vec![d], gw)?)?;
                }
            }
            Op::Matmul(x, w) => {
                let ws = self.value(*w).shape();
                let (k, n) = (ws[0], ws[1]);
                let m = self.value(*x).len() / k;
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Layout::Normal, self.value(*w).data(), Layout::Transposed, &mut gx, false);
                    let gx = Tensor::new(self.value(*x).shape().to_vec(), gx)?;
                    self.accumulate(grads, *x, gx)?;
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*x).data(), Layout::Transposed, g.data(), Layout::Normal, &mut gw, false);
                    self.accumulate(grads, *w, Tensor::new(vec![k, n], gw)?)?;
                }
            }
            Op::Bmm(a, b) => {
                let (bs, m, k, n) = self.bmm_dims(*a, *b)?;
                let (av, bv, gv) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &gv[i * m * n..(i + 1) * m * n],
                            Layout::Normal,
                            &bv[i * k * n..(i + 1) * k * n],
                            Layout::Transposed,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(vec![bs, m, k], ga)?)?;
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            Layout::Transposed,
                            &gv[i * m * n..(i + 1) * m * n],
                            Layout::Normal,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![bs, k, n], gb)?)?;
                }
            }
            Op::Contract {
                a,
                b,
                modes_a,
                modes_b,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (free_a, free_b) = contraction_plan(ta.shape(), modes_a, tb.shape(), modes_b)?;
                let nfa = free_a.len();
                if self.requires_grad(*a) {
                    // Bind the upstream gradient's b-side modes against b's free modes;
                    // what is left is [free_a..., b's bound modes in b's own order].
                    let g_modes: Vec<usize> = (nfa..nfa + free_b.len()).collect();
                    let t = crate::tensor::contract(g, &g_modes, tb, &free_b)?;
                    let mut bound_sorted = modes_b.clone();
                    bound_sorted.sort_unstable();
                    let mut axis_of = free_a.clone();
                    for mb in &bound_sorted {
                        let p = modes_b.iter().position(|x| x == mb).unwrap();
                        axis_of.push(modes_a[p]);
                    }
                    let ga = t.permute(&inverse_permutation(&axis_of))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    let g_modes: Vec<usize> = (0..nfa).collect();
                    let t = crate::tensor::contract(ta, &free_a, g, &g_modes)?;
                    let mut bound_sorted = modes_a.clone();
                    bound_sorted.sort_unstable();
                    let mut axis_of = Vec::with_capacity(tb.order());
                    for ma in &bound_sorted {
                        let p = modes_a.iter().position(|x| x == ma).unwrap();
                        axis_of.push(modes_b[p]);
                    }
                    axis_of.extend_from_slice(&free_b);
                    let gb = t.permute(&inverse_permutation(&axis_of))?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Permute(x, perm) => {
                self.accumulate(grads, *x, g.permute(&inverse_permutation(perm))?)?;
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?)?;
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.value(*x).shape();
                let mut gx = Tensor::zeros(xs)?;
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                let full = xs[*axis] * inner;
                let chunk = len * inner;
                for o in 0..outer {
                    let dst = o * full + start * inner;
                    gx.data_mut()[dst..dst + chunk].copy_from_slice(&g.data()[o * chunk..(o + 1) * chunk]);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Softmax(x) => {
                let (_, last) = rows_of(out);
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(last).zip(out.data().chunks(last)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = yi * (*gi - dot);
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gi, xi| gi * gelu_grad(xi))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::LayerNorm { x, rstd } => {
                let (_, last) = rows_of(out);
                let mut gx = g.clone();
                for ((grow, yrow), r) in gx.data_mut().chunks_mut(last).zip(out.data().chunks(last)).zip(rstd) {
                    let mean_g = grow.iter().sum::<f64>() / last as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / last as f64;
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = r * (*gi - mean_g - yi * mean_gy);
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Embedding { table, ids } => {
                let ts = self.value(*table).shape();
                let dim = ts[1];
                let mut gt = Tensor::zeros(ts)?;
                for (row, &id) in g.data().chunks(dim).zip(ids) {
                    for (acc, v) in gt.data_mut()[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let zs = self.value(*logits).shape();
                let (n, vocab) = (zs[0], zs[1]);
                let scale = g.item() / n as f64;
                let mut gz = probs.clone();
                for (row, &t) in gz.chunks_mut(vocab).zip(targets) {
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(zs.to_vec(), gz)?)?;
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let zs = self.value(*logits).shape();
                let n = zs[0];
                let scale = g.item() / n as f64;
                // d/dz of -Σ p log softmax(z) is softmax(z)·Σp - p.
                let vocab = zs[1];
                let mut gz = probs.clone();
                for (row, p) in gz.chunks_mut(vocab).zip(target.data().chunks(vocab)) {
                    let mass: f64 = p.iter().sum();
                    for (v, pi) in row.iter_mut().zip(p) {
                        *v = scale * (*v * mass - pi);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(zs.to_vec(), gz)?)?;
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.value(*x).shape(), g.item())?;
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
