//! Dense tensors and a reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and accumulates
//! gradients for every node that (transitively) depends on a leaf created with
//! `requires_grad`. Tapes are single-use: build one per training step.

use thiserror::Error;

/// Norms at or below this are treated as zero by [`Tape::l2n`].
pub const EPSILON_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("cannot normalize a vector with norm {0:e}")]
    ZeroVector(f64),
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward was already called on this tape")]
    TapeConsumed,
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
}

/// A dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as a trainable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Adds `g` into the gradient buffer. No-op unless the tensor requires gradients.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        if !self.requires_grad {
            return;
        }
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Plain gradient descent: `data -= lr * grad`, then clears the gradient.
    pub fn sgd_step(&mut self, lr: f64) {
        if let Some(g) = self.grad.take() {
            self.data.iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * g);
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { input: Var, weight: Var, bias: Var },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    MulSpatial { map: Var, mask: Var },
    Exp(Var),
    Log(Var),
    Sum(Var),
    LogSumExp(Var),
    Softmax(Var),
    Dot(Var, Var),
    L2n { input: Var, norm: f64 },
    Concat(Vec<Var>),
    Index(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf that copies `t`; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "constant shape mismatch");
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![], vec![value])
    }

    /// Leaf that requires gradient, built from raw parts.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "variable shape mismatch");
        self.push(shape, data, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The first element of `v`; intended for scalars.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// `None` when `v` does not require gradients or backward has not run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t` (respecting `t`'s own grad flag).
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{what}: shape mismatch"
        );
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push(shape, value, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Shift(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Sums a list of scalars (or equal-shaped tensors). Empty input yields 0.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.scalar(0.0),
            Some((first, rest)) => rest.iter().fold(*first, |acc, t| self.add(acc, *t)),
        }
    }

    /// `[m,k] x [k,n] -> [m,n]`. Vectors are not promoted; reshape first.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                for j in 0..n {
                    out[i * n + j] += x * bv[p * n + j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Stride-1 "same" cross-correlation. `input: [Cin,H,W]`,
    /// `weight: [Cout,Cin,kh,kw]` with odd kernel extents, `bias: [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Var {
        let si = self.nodes[input.0].shape.clone();
        let sw = self.nodes[weight.0].shape.clone();
        assert!(si.len() == 3 && sw.len() == 4 && sw[1] == si[0], "conv2d: {si:?} * {sw:?}");
        assert!(sw[2] % 2 == 1 && sw[3] % 2 == 1, "conv2d: kernel extents must be odd");
        assert_eq!(self.nodes[bias.0].shape, vec![sw[0]], "conv2d: bias shape");
        let g = ConvGeom::new(&si, &sw);
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let mut out = vec![0.0; g.cout * g.h * g.w];
        for o in 0..g.cout {
            let plane = &mut out[o * g.h * g.w..(o + 1) * g.h * g.w];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..g.cin {
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = w[((o * g.cin + c) * g.kh + ki) * g.kw + kj];
                        g.for_each_tap(ki, kj, |out_idx, in_idx| {
                            plane[out_idx] += wv * x[c * g.h * g.w + in_idx];
                        });
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        self.push(
            vec![g.cout, g.h, g.w],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// 2x2 average pooling over the last two dims of `[C,H,W]` (H, W even).
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].shape.clone();
        assert!(s.len() == 3 && s[1].is_multiple_of(2) && s[2].is_multiple_of(2), "avg_pool2: {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    out[(ch * ho + i) * wo + j] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        let rg = self.rg(a);
        self.push(vec![c, ho, wo], out, Op::AvgPool2(a), rg)
    }

    /// Mean over spatial dims: `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].shape.clone();
        assert_eq!(s.len(), 3, "global_avg_pool: {s:?}");
        let hw = s[1] * s[2];
        let out = self.nodes[a.0]
            .value
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(a);
        self.push(vec![s[0]], out, Op::GlobalAvgPool(a), rg)
    }

    /// Multiplies each channel of `map: [C,H,W]` by `mask: [H,W]`.
    pub fn mul_spatial(&mut self, map: Var, mask: Var) -> Var {
        let s = self.nodes[map.0].shape.clone();
        assert!(s.len() == 3 && self.nodes[mask.0].shape == s[1..], "mul_spatial: shapes");
        let hw = s[1] * s[2];
        let m = &self.nodes[mask.0].value;
        let out = self.nodes[map.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x * m[i % hw])
            .collect();
        let rg = self.rg(map) || self.rg(mask);
        self.push(s, out, Op::MulSpatial { map, mask }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    /// `log(sum(exp(a)))` over all elements, stabilized by max subtraction.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = logsumexp(&self.nodes[a.0].value);
        let rg = self.rg(a);
        self.push(vec![], vec![v], Op::LogSumExp(a), rg)
    }

    /// Softmax over all elements.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let lse = logsumexp(x);
        let out = x.iter().map(|v| (v - lse).exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push(shape, out, Op::Softmax(a), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.nodes[a.0].value.len(),
            self.nodes[b.0].value.len(),
            "dot: length mismatch"
        );
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![], vec![s], Op::Dot(a, b), rg)
    }

    /// L2 normalization of all elements of `a`.
    pub fn l2n(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let x = &self.nodes[a.0].value;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= EPSILON_NORM || !norm.is_finite() {
            return Err(AutodiffError::ZeroVector(norm));
        }
        let out = x.iter().map(|v| v / norm).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::L2n { input: a, norm }, rg))
    }

    /// Cosine similarity `dot(l2n(a), l2n(b))`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let na = self.l2n(a)?;
        let nb = self.l2n(b)?;
        Ok(self.dot(na, nb))
    }

    /// Concatenates flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let n = out.len();
        self.push(vec![n], out, Op::Concat(parts.to_vec()), rg)
    }

    /// Selects element `i` of the flattened input as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = self.nodes[a.0].value[i];
        let rg = self.rg(a);
        self.push(vec![], vec![v], Op::Index(a, i), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].value.len(),
            "reshape: element count"
        );
        let value = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Reshape(a), rg)
    }

    /// Reverse pass from the scalar `loss`. Populates [`Tape::grad`] for every
    /// gradient-requiring node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)),
            Op::Shift(a) | Op::Reshape(a) => acc(*a, &|s| add_into(s, g)),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut t = 0.0;
                            for j in 0..n {
                                t += g[i * n + j] * bv[p * n + j];
                            }
                            s[i * k + p] += t;
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..n {
                                s[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let geom = ConvGeom::new(&nodes[input.0].shape, &nodes[weight.0].shape);
                let hw = geom.h * geom.w;
                let (x, w) = (&nodes[input.0].value, &nodes[weight.0].value);
                acc(*bias, &|s| {
                    for o in 0..geom.cout {
                        s[o] += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                });
                acc(*weight, &|s| {
                    for o in 0..geom.cout {
                        let gp = &g[o * hw..(o + 1) * hw];
                        for c in 0..geom.cin {
                            let xp = &x[c * hw..(c + 1) * hw];
                            for ki in 0..geom.kh {
                                for kj in 0..geom.kw {
                                    let mut t = 0.0;
                                    geom.for_each_tap(ki, kj, |oi, ii| t += gp[oi] * xp[ii]);
                                    s[((o * geom.cin + c) * geom.kh + ki) * geom.kw + kj] += t;
                                }
                            }
                        }
                    }
                });
                acc(*input, &|s| {
                    for o in 0..geom.cout {
                        let gp = &g[o * hw..(o + 1) * hw];
                        for c in 0..geom.cin {
                            let sp = &mut s[c * hw..(c + 1) * hw];
                            for ki in 0..geom.kh {
                                for kj in 0..geom.kw {
                                    let wv = w[((o * geom.cin + c) * geom.kh + ki) * geom.kw + kj];
                                    geom.for_each_tap(ki, kj, |oi, ii| sp[ii] += wv * gp[oi]);
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::AvgPool2(a) => {
                let sh = &nodes[a.0].shape;
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let (ho, wo) = (h / 2, w / 2);
                acc(*a, &|s| {
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let q = 0.25 * g[(ch * ho + i) * wo + j];
                                let base = ch * h * w + 2 * i * w + 2 * j;
                                s[base] += q;
                                s[base + 1] += q;
                                s[base + w] += q;
                                s[base + w + 1] += q;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let sh = &nodes[a.0].shape;
                let hw = sh[1] * sh[2];
                acc(*a, &|s| {
                    for (i, v) in s.iter_mut().enumerate() {
                        *v += g[i / hw] / hw as f64;
                    }
                });
            }
            Op::MulSpatial { map, mask } => {
                let hw = nodes[mask.0].value.len();
                let (mv, kv) = (&nodes[map.0].value, &nodes[mask.0].value);
                acc(*map, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * kv[i % hw];
                    }
                });
                acc(*mask, &|s| {
                    for i in 0..g.len() {
                        s[i % hw] += g[i] * mv[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let x = &nodes[a.0].value;
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::LogSumExp(a) => {
                let x = &nodes[a.0].value;
                let lse = node.value[0];
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * (x[i] - lse).exp();
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let yg: f64 = y.iter().zip(g).map(|(p, q)| p * q).sum();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += y[i] * (g[i] - yg);
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &|s| s.iter_mut().zip(bv).for_each(|(x, y)| *x += g[0] * y));
                acc(*b, &|s| s.iter_mut().zip(av).for_each(|(x, y)| *x += g[0] * y));
            }
            Op::L2n { input, norm } => {
                let y = &node.value;
                let yg: f64 = y.iter().zip(g).map(|(p, q)| p * q).sum();
                acc(*input, &|s| {
                    for i in 0..s.len() {
                        s[i] += (g[i] - y[i] * yg) / norm;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    acc(*p, &|s| add_into(s, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Index(a, i) => acc(*a, &|s| s[*i] += g[0]),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// Numerically stable `log(sum(exp(x)))`. Returns `-inf` for empty input.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn new(si: &[usize], sw: &[usize]) -> Self {
        Self {
            cin: si[0],
            cout: sw[0],
            h: si[1],
            w: si[2],
            kh: sw[2],
            kw: sw[3],
        }
    }

    /// Calls `f(out_index, in_index)` for every output pixel whose tap
    /// `(ki, kj)` lands inside the input plane.
    #[inline]
    fn for_each_tap(&self, ki: usize, kj: usize, mut f: impl FnMut(usize, usize)) {
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        let di = ki as isize - ph;
        let dj = kj as isize - pw;
        let y0 = (-di).max(0) as usize;
        let y1 = (self.h as isize - di).min(self.h as isize) as usize;
        let x0 = (-dj).max(0) as usize;
        let x1 = (self.w as isize - dj).min(self.w as isize) as usize;
        for y in y0..y1 {
            let iy = (y as isize + di) as usize;
            for x in x0..x1 {
                let ix = (x as isize + dj) as usize;
                f(y * self.w + x, iy * self.w + ix);
            }
        }
    }
}

/// Maximum relative error between the tape gradient of `f` at `x` and a
/// central finite difference with the given step. Relative error per
/// coordinate is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F, E>(f: F, x: &Tensor, step: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    assert!(step > 0.0, "grad_check: step must be positive");
    let mut tape = Tape::new();
    let xv = tape.variable(x.shape.clone(), x.data.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |data: Vec<f64>| -> Result<f64, E> {
        let mut t = Tape::new();
        let v = t.constant(x.shape.clone(), data);
        let o = f(&mut t, v)?;
        Ok(t.item(o))
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.data.clone();
        plus[i] += step;
        let mut minus = x.data.clone();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
