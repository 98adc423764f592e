//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Nodes that depend on no trainable leaf are never
//! visited during the backward sweep.
//!
//! Rounding is the one non-differentiable primitive. [`Graph::ste_round`] and the
//! fused quantizers use the straight-through estimator: the forward value is
//! rounded half to even, the backward pass treats rounding as identity. A graph
//! built with [`RoundMode::Identity`] skips the rounding in the forward pass,
//! which is how the estimator contract is checked.

use std::collections::BTreeMap;

use super::kernels::{self, round_half_even};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RoundMode {
    /// Round half to even forward, identity backward.
    #[default]
    Ste,
    /// Rounding replaced by identity in both directions.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Exp,
    Sigmoid,
    Silu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Min,
    Max,
}

/// How the second operand of a binary op maps into the first one's layout:
/// viewing the first as `[outer, n, inner]`, the second has `n` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Bcast {
    n: usize,
    inner: usize,
}

impl Bcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if b.len() > a.len() {
            return Err(Error::shape(op, format!("{b:?} does not broadcast to {a:?}")));
        }
        let off = a.len() - b.len();
        // Right-align b; its non-unit extents must be one contiguous run.
        let mut first = None;
        let mut last = None;
        for (i, &d) in b.iter().enumerate() {
            let ad = a[off + i];
            if d != 1 && d != ad {
                return Err(Error::shape(op, format!("{b:?} does not broadcast to {a:?}")));
            }
            if d != 1 {
                if first.is_none() {
                    first = Some(off + i);
                }
                last = Some(off + i);
            }
        }
        let (first, last) = match (first, last) {
            (Some(f), Some(l)) => (f, l),
            _ => return Ok(Bcast { n: 1, inner: 1 }),
        };
        for (i, &ad) in a.iter().enumerate().take(last + 1).skip(first) {
            if b[i - off] != ad {
                return Err(Error::shape(op, format!("unsupported broadcast {b:?} -> {a:?}")));
            }
        }
        let n = a[first..=last].iter().product();
        let inner = a[last + 1..].iter().product();
        Ok(Bcast { n, inner })
    }

    /// Calls `f(i, j)` for every element `i` of the full operand and the
    /// matching element `j` of the broadcast one.
    #[inline(always)]
    fn for_each(self, len: usize, mut f: impl FnMut(usize, usize)) {
        if self.n == 1 {
            for i in 0..len {
                f(i, 0);
            }
            return;
        }
        if self.inner == 1 {
            let mut i = 0;
            while i < len {
                for j in 0..self.n {
                    f(i + j, j);
                }
                i += self.n;
            }
            return;
        }
        let block = self.n * self.inner;
        let outer = len / block;
        let mut i = 0;
        for _ in 0..outer {
            for j in 0..self.n {
                for _ in 0..self.inner {
                    f(i, j);
                    i += 1;
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Binary { a: usize, b: usize, kind: BinKind, bc: Bcast },
    Scale { a: usize, c: f64 },
    Unary { a: usize, kind: UnKind, deriv: Vec<f64> },
    SteRound { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    ClampVar { x: usize, lo: usize, hi: usize, bc: Bcast },
    Reduce { a: usize, arg: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    RmsNorm { x: usize, w: usize, inv: Vec<f64> },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    CausalSoftmax { a: usize },
    CausalZero { a: usize },
    SplitHeads { a: usize, seq: usize, heads: usize },
    MergeHeads { a: usize, seq: usize, heads: usize },
    Rope { a: usize, angles: Vec<Vec<(f64, f64)>> },
    Quantize { x: usize, alpha: usize, beta: usize, qmax: f64, bc: Bcast },
    FakeQuant { x: usize, alpha: usize, beta: usize, qmax: f64, bc: Bcast },
    Embedding { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Mse { a: usize, target: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Build it forward, then call [`Graph::backward`].
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
    round_mode: RoundMode,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_raw(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient for every trainable leaf, keyed by parameter name. Leaves the
    /// loss does not depend on get an all-zero gradient.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, idx)| {
                let shape = self.shapes[*idx].clone();
                let g = match &self.grads[*idx] {
                    Some(g) => g.clone(),
                    None => vec![0.0; shape.iter().product()],
                };
                (name.clone(), Tensor::from_raw(shape, g))
            })
            .collect()
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Axis { axis, rank });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::with_round_mode(RoundMode::Ste)
    }

    pub fn with_round_mode(round_mode: RoundMode) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            round_mode,
        }
    }

    pub fn round_mode(&self) -> RoundMode {
        self.round_mode
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v.0));
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_raw(vec![m, n], out),
            Op::MatMul { a: a.0, b: b.0 },
            rg,
        ))
    }

    /// Batched product of `[n, m, k]` with `[n, k, p]`, or with `[n, p, k]`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bad = || {
            Error::shape(
                "batch_matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            )
        };
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, p) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; nb * m * p];
        for i in 0..nb {
            kernels::gemm(
                m,
                k,
                p,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * p..(i + 1) * k * p],
                trans_b,
                &mut out[i * m * p..(i + 1) * m * p],
                false,
            );
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_raw(vec![nb, m, p], out),
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = Bcast::resolve(op, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let f: fn(f64, f64) -> f64 = match kind {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
            BinKind::Div => |x, y| x / y,
            BinKind::Max => f64::max,
        };
        let out: Vec<f64> = if bd.len() == ad.len() {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else if bd.len() == 1 {
            ad.iter().map(|&x| f(x, bd[0])).collect()
        } else {
            let mut out = vec![0.0; ad.len()];
            bc.for_each(ad.len(), |i, j| out[i] = f(ad[i], bd[j]));
            out
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Binary {
                a: a.0,
                b: b.0,
                kind,
                bc,
            },
            rg,
        ))
    }

    /// Elementwise `a + b`; `b` broadcasts into `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, BinKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, BinKind::Div)
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, BinKind::Max)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v * c);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Scale { a: a.0, c }, rg)
    }

    fn unary(&mut self, a: Var, kind: UnKind) -> Var {
        let f: fn(f64) -> f64 = match kind {
            UnKind::Exp => f64::exp,
            UnKind::Sigmoid => kernels::sigmoid,
            UnKind::Silu => kernels::silu,
            UnKind::Gelu => kernels::gelu,
        };
        let rg = self.rg(&[a.0]);
        let av = &self.nodes[a.0].value;
        // Smooth activations keep their derivative so backward does not
        // evaluate the transcendental again.
        let (value, deriv) = match kind {
            UnKind::Silu if rg => {
                let (mut y, mut d) = (Vec::with_capacity(av.len()), Vec::with_capacity(av.len()));
                for &x in av.data() {
                    let s = kernels::sigmoid(x);
                    y.push(x * s);
                    d.push(s * (1.0 + x * (1.0 - s)));
                }
                (Tensor::from_raw(av.shape().to_vec(), y), d)
            }
            UnKind::Gelu if rg => (av.map(f), av.data().iter().map(|&x| kernels::gelu_grad(x)).collect()),
            _ => (av.map(f), Vec::new()),
        };
        self.push(value, Op::Unary { a: a.0, kind, deriv }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Silu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, UnKind::Gelu)
    }

    /// Round half to even with a straight-through (identity) gradient.
    pub fn ste_round(&mut self, a: Var) -> Var {
        let value = match self.round_mode {
            RoundMode::Ste => self.nodes[a.0].value.map(round_half_even),
            RoundMode::Identity => self.nodes[a.0].value.clone(),
        };
        let rg = self.rg(&[a.0]);
        self.push(value, Op::SteRound { a: a.0 }, rg)
    }

    /// Clamp to constant bounds. The gradient passes inside `[lo, hi]`
    /// (inclusive) and is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Clamp { a: a.0, lo, hi }, rg)
    }

    /// Clamp to learnable bounds; `lo` and `hi` share a shape that broadcasts
    /// into `x`. Clamped elements route their gradient to the active bound.
    pub fn clamp_var(&mut self, x: Var, lo: Var, hi: Var) -> Result<Var> {
        let (xv, lv, hv) = (
            &self.nodes[x.0].value,
            &self.nodes[lo.0].value,
            &self.nodes[hi.0].value,
        );
        if lv.shape() != hv.shape() {
            return Err(Error::shape(
                "clamp",
                format!("bounds {:?} vs {:?}", lv.shape(), hv.shape()),
            ));
        }
        let bc = Bcast::resolve("clamp", xv.shape(), lv.shape())?;
        let (xd, ld, hd) = (xv.data(), lv.data(), hv.data());
        let mut out = vec![0.0; xd.len()];
        bc.for_each(xd.len(), |i, j| {
            let v = xd[i];
            out[i] = if v < ld[j] {
                ld[j]
            } else if v > hd[j] {
                hd[j]
            } else {
                v
            };
        });
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x.0, lo.0, hi.0]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::ClampVar {
                x: x.0,
                lo: lo.0,
                hi: hi.0,
                bc,
            },
            rg,
        ))
    }

    /// Min or max along `axis` (removed from the shape), or over all
    /// elements when `axis` is `None`. The gradient goes to the first
    /// extremal element.
    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let shape = av.shape();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, av.len(), 1, vec![1]),
            Some(ax) => {
                check_axis(ax, shape.len())?;
                let mut s = shape.to_vec();
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
                (
                    shape[..ax].iter().product(),
                    shape[ax],
                    shape[ax + 1..].iter().product(),
                    s,
                )
            }
        };
        let d = av.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for j in 1..len {
                    let idx = (o * len + j) * inner + i;
                    let better = match kind {
                        ReduceKind::Min => d[idx] < d[best],
                        ReduceKind::Max => d[idx] > d[best],
                    };
                    if better {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_raw(out_shape, out), Op::Reduce { a: a.0, arg }, rg))
    }

    pub fn reduce_min(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, ReduceKind::Min, axis)
    }

    pub fn reduce_max(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, ReduceKind::Max, axis)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.nodes[a.0].value.transpose2()?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Transpose { a: a.0 }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Reshape { a: a.0 }, rg))
    }

    /// RMS normalization over the last axis followed by an elementwise affine
    /// weight.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let n = xv.last_dim();
        if wv.len() != n {
            return Err(Error::shape(
                "rmsnorm",
                format!("weight {:?} for input {:?}", wv.shape(), xv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut out = vec![0.0; xv.len()];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            inv.push(kernels::rmsnorm_row(
                xv.row(r),
                wv.data(),
                eps,
                &mut out[r * n..(r + 1) * n],
            ));
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x.0, w.0]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::RmsNorm {
                x: x.0,
                w: w.0,
                inv,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let shape = av.shape().to_vec();
        check_axis(axis, shape.len())?;
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = av.data().to_vec();
        let mut row = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    row[j] = out[(o * len + j) * inner + i];
                }
                kernels::softmax_row(&mut row, len);
                for j in 0..len {
                    out[(o * len + j) * inner + i] = row[j];
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Softmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    fn causal_valid(lq: usize, lk: usize, t: usize) -> usize {
        t + (lk - lq) + 1
    }

    fn check_attn(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 3 || shape[2] < shape[1] {
            return Err(Error::shape(op, format!("expected [n, q, k>=q], got {shape:?}")));
        }
        Ok((shape[0], shape[1], shape[2]))
    }

    /// Softmax over the last axis of `[n, q, k]` scores where query `t` may
    /// attend to the first `t + (k - q) + 1` keys; masked entries are zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (n, lq, lk) = Self::check_attn("causal_softmax", av.shape())?;
        let mut out = av.data().to_vec();
        for b in 0..n {
            for t in 0..lq {
                let row = &mut out[(b * lq + t) * lk..(b * lq + t + 1) * lk];
                kernels::softmax_row(row, Self::causal_valid(lq, lk, t));
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_raw(shape, out), Op::CausalSoftmax { a: a.0 }, rg))
    }

    /// Zeroes the masked (future) entries of `[n, q, k]` attention scores.
    pub fn causal_zero(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (n, lq, lk) = Self::check_attn("causal_zero", av.shape())?;
        let mut out = av.data().to_vec();
        for b in 0..n {
            for t in 0..lq {
                let row = &mut out[(b * lq + t) * lk..(b * lq + t + 1) * lk];
                for v in row[Self::causal_valid(lq, lk, t)..].iter_mut() {
                    *v = 0.0;
                }
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_raw(shape, out), Op::CausalZero { a: a.0 }, rg))
    }

    /// `[batch*seq, heads*hd]` -> `[batch*heads, seq, hd]`.
    pub fn split_heads(&mut self, a: Var, seq: usize, heads: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() != 2 || av.shape()[0] % seq != 0 || av.shape()[1] % heads != 0 {
            return Err(Error::shape(
                "split_heads",
                format!("{:?} with seq {seq}, heads {heads}", av.shape()),
            ));
        }
        let batch = av.shape()[0] / seq;
        let hd = av.shape()[1] / heads;
        let d = av.data();
        let mut out = vec![0.0; d.len()];
        for b in 0..batch {
            for t in 0..seq {
                let src = &d[(b * seq + t) * heads * hd..(b * seq + t + 1) * heads * hd];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * hd;
                    out[dst..dst + hd].copy_from_slice(&src[h * hd..(h + 1) * hd]);
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_raw(vec![batch * heads, seq, hd], out),
            Op::SplitHeads { a: a.0, seq, heads },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() != 3 || av.shape()[0] % heads != 0 {
            return Err(Error::shape(
                "merge_heads",
                format!("{:?} with heads {heads}", av.shape()),
            ));
        }
        let (bh, seq, hd) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let batch = bh / heads;
        let d = av.data();
        let mut out = vec![0.0; d.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src = ((b * heads + h) * seq + t) * hd;
                    let dst = (b * seq + t) * heads * hd + h * hd;
                    out[dst..dst + hd].copy_from_slice(&d[src..src + hd]);
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_raw(vec![batch * seq, heads * hd], out),
            Op::MergeHeads { a: a.0, seq, heads },
            rg,
        ))
    }

    /// Rotary embedding on `[n, seq, hd]`; row `t` sits at position `pos0 + t`.
    pub fn rope(&mut self, a: Var, pos0: usize, base: f64) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.rank() != 3 || av.shape()[2] % 2 != 0 {
            return Err(Error::shape("rope", format!("{:?}", av.shape())));
        }
        let (n, seq, hd) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let angles: Vec<_> = (0..seq)
            .map(|t| kernels::rope_angles(pos0 + t, hd, base))
            .collect();
        let mut out = av.data().to_vec();
        for b in 0..n {
            for t in 0..seq {
                let s = (b * seq + t) * hd;
                kernels::rope_apply(&mut out[s..s + hd], &angles[t]);
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Rope { a: a.0, angles }, rg))
    }

    fn quant_operands(
        &self,
        op: &'static str,
        x: Var,
        alpha: Var,
        beta: Var,
    ) -> Result<Bcast> {
        let (xv, av, bv) = (
            &self.nodes[x.0].value,
            &self.nodes[alpha.0].value,
            &self.nodes[beta.0].value,
        );
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("alpha {:?} vs beta {:?}", av.shape(), bv.shape()),
            ));
        }
        Bcast::resolve(op, xv.shape(), av.shape())
    }

    #[inline]
    fn rounded(&self, u: f64) -> f64 {
        match self.round_mode {
            RoundMode::Ste => round_half_even(u),
            RoundMode::Identity => u,
        }
    }

    /// Integer codes `clamp(round(x / alpha) - beta, 0, qmax)` as reals.
    pub fn quantize(&mut self, x: Var, alpha: Var, beta: Var, qmax: f64) -> Result<Var> {
        let bc = self.quant_operands("quantize", x, alpha, beta)?;
        let (xd, ad, bd) = (
            self.nodes[x.0].value.data(),
            self.nodes[alpha.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let mut out = vec![0.0; xd.len()];
        bc.for_each(xd.len(), |i, j| {
            out[i] = (self.rounded(xd[i] / ad[j]) - bd[j]).clamp(0.0, qmax);
        });
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(&[x.0, alpha.0, beta.0]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Quantize {
                x: x.0,
                alpha: alpha.0,
                beta: beta.0,
                qmax,
                bc,
            },
            rg,
        ))
    }

    /// Quantize then dequantize: `(quantize(x) + beta) * alpha`.
    pub fn fake_quant(&mut self, x: Var, alpha: Var, beta: Var, qmax: f64) -> Result<Var> {
        let bc = self.quant_operands("fake_quant", x, alpha, beta)?;
        let (xd, ad, bd) = (
            self.nodes[x.0].value.data(),
            self.nodes[alpha.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let ste = self.round_mode == RoundMode::Ste;
        let fq = |x: f64, a: f64, b: f64| {
            let u = x / a;
            let q = (if ste { round_half_even(u) } else { u } - b).clamp(0.0, qmax);
            (q + b) * a
        };
        let out: Vec<f64> = if bc.n == 1 {
            let (a, b) = (ad[0], bd[0]);
            xd.iter().map(|&x| fq(x, a, b)).collect()
        } else {
            let mut out = vec![0.0; xd.len()];
            bc.for_each(xd.len(), |i, j| out[i] = fq(xd[i], ad[j], bd[j]));
            out
        };
        let shape = self.nodes[x.0].value.shape().to_vec();
        let rg = self.rg(&[x.0, alpha.0, beta.0]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::FakeQuant {
                x: x.0,
                alpha: alpha.0,
                beta: beta.0,
                qmax,
                bc,
            },
            rg,
        ))
    }

    /// Row gather from a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(Error::shape("embedding", format!("{:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Token { id, vocab });
            }
            out.extend_from_slice(tv.row(id as usize));
            idx.push(id as usize);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Tensor::from_raw(vec![ids.len(), d], out),
            Op::Embedding {
                table: table.0,
                ids: idx,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[n, vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{:?} with {} targets", lv.shape(), targets.len()),
            ));
        }
        let v = lv.shape()[1];
        let mut probs = lv.data().to_vec();
        let mut nll = 0.0;
        let mut tg = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            if t as usize >= v {
                return Err(Error::Token { id: t, vocab: v });
            }
            let row = &mut probs[r * v..(r + 1) * v];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            nll += lse - row[t as usize];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
            tg.push(t as usize);
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(nll / targets.len() as f64),
            Op::CrossEntropy {
                logits: logits.0,
                targets: tg,
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if av.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", av.shape(), target.shape()),
            ));
        }
        let n = av.len() as f64;
        let s = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Mse {
                a: a.0,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let want = |p: usize| nodes[p].requires_grad;
        // Borrow-friendly accumulator access.
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], p: usize, len: usize) -> &'a mut Vec<f64> {
            grads[p].get_or_insert_with(|| vec![0.0; len])
        }
        let val = |p: usize| &nodes[p].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if want(*a) {
                    let da = slot(grads, *a, m * k);
                    kernels::gemm(m, n, k, g, false, bv.data(), true, da, true);
                }
                if want(*b) {
                    let db = slot(grads, *b, k * n);
                    kernels::gemm(k, m, n, av.data(), true, g, false, db, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let p = nodes[i].value.shape()[2];
                for bi in 0..nb {
                    let gi = &g[bi * m * p..(bi + 1) * m * p];
                    let ai = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let bmat = &bv.data()[bi * k * p..(bi + 1) * k * p];
                    if want(*a) {
                        let da = slot(grads, *a, nb * m * k);
                        // dA = dY · Bᵀ, with B stored [k,p] or [p,k]
                        kernels::gemm(
                            m,
                            p,
                            k,
                            gi,
                            false,
                            bmat,
                            !trans_b,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                    if want(*b) {
                        let db = slot(grads, *b, nb * k * p);
                        let dbi = &mut db[bi * k * p..(bi + 1) * k * p];
                        if *trans_b {
                            // dB[p,k] = dYᵀ · A
                            kernels::gemm(p, m, k, gi, true, ai, false, dbi, true);
                        } else {
                            kernels::gemm(k, m, p, ai, true, gi, false, dbi, true);
                        }
                    }
                }
            }
            Op::Binary { a, b, kind, bc } => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let (la, lb) = (ad.len(), bd.len());
                let out = nodes[i].value.data();
                if want(*a) {
                    let da = slot(grads, *a, la);
                    match kind {
                        BinKind::Add | BinKind::Sub => {
                            for (d, gi) in da.iter_mut().zip(g) {
                                *d += gi;
                            }
                        }
                        BinKind::Mul if lb == la => {
                            for ((d, gi), b) in da.iter_mut().zip(g).zip(bd) {
                                *d += gi * b;
                            }
                        }
                        BinKind::Mul => bc.for_each(la, |x, y| da[x] += g[x] * bd[y]),
                        BinKind::Div => bc.for_each(la, |x, y| da[x] += g[x] / bd[y]),
                        BinKind::Max => bc.for_each(la, |x, y| {
                            if ad[x] >= bd[y] {
                                da[x] += g[x]
                            }
                        }),
                    }
                }
                if want(*b) {
                    let db = slot(grads, *b, lb);
                    match kind {
                        BinKind::Add => bc.for_each(la, |x, y| db[y] += g[x]),
                        BinKind::Sub => bc.for_each(la, |x, y| db[y] -= g[x]),
                        BinKind::Mul if lb == la => {
                            for ((d, gi), a) in db.iter_mut().zip(g).zip(ad) {
                                *d += gi * a;
                            }
                        }
                        BinKind::Mul => bc.for_each(la, |x, y| db[y] += g[x] * ad[x]),
                        BinKind::Div => {
                            bc.for_each(la, |x, y| db[y] -= g[x] * out[x] / bd[y])
                        }
                        BinKind::Max => bc.for_each(la, |x, y| {
                            if ad[x] < bd[y] {
                                db[y] += g[x]
                            }
                        }),
                    }
                }
            }
            Op::Scale { a, c } => {
                if want(*a) {
                    let da = slot(grads, *a, g.len());
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::Unary { a, kind, deriv } => {
                if want(*a) {
                    let out = nodes[i].value.data();
                    let da = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        let d = match kind {
                            UnKind::Exp => out[j],
                            UnKind::Sigmoid => out[j] * (1.0 - out[j]),
                            UnKind::Silu | UnKind::Gelu => deriv[j],
                        };
                        da[j] += g[j] * d;
                    }
                }
            }
            Op::SteRound { a } => {
                if want(*a) {
                    let da = slot(grads, *a, g.len());
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if want(*a) {
                    let xd = val(*a).data();
                    let da = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        if xd[j] >= *lo && xd[j] <= *hi {
                            da[j] += g[j];
                        }
                    }
                }
            }
            Op::ClampVar { x, lo, hi, bc } => {
                let (xd, ld, hd) = (val(*x).data(), val(*lo).data(), val(*hi).data());
                let n = xd.len();
                let nb = ld.len();
                if want(*x) {
                    let dx = slot(grads, *x, n);
                    bc.for_each(n, |p, q| {
                        if xd[p] >= ld[q] && xd[p] <= hd[q] {
                            dx[p] += g[p];
                        }
                    });
                }
                if want(*lo) {
                    let dl = slot(grads, *lo, nb);
                    bc.for_each(n, |p, q| {
                        if xd[p] < ld[q] {
                            dl[q] += g[p];
                        }
                    });
                }
                if want(*hi) {
                    let dh = slot(grads, *hi, nb);
                    bc.for_each(n, |p, q| {
                        if xd[p] >= ld[q] && xd[p] > hd[q] {
                            dh[q] += g[p];
                        }
                    });
                }
            }
            Op::Reduce { a, arg } => {
                if want(*a) {
                    let da = slot(grads, *a, val(*a).len());
                    for (gi, &src) in g.iter().zip(arg) {
                        da[src] += gi;
                    }
                }
            }
            Op::Sum { a } => {
                if want(*a) {
                    let da = slot(grads, *a, val(*a).len());
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean { a } => {
                if want(*a) {
                    let n = val(*a).len();
                    let da = slot(grads, *a, n);
                    let s = g[0] / n as f64;
                    for d in da.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Transpose { a } => {
                if want(*a) {
                    let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let da = slot(grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if want(*a) {
                    let da = slot(grads, *a, g.len());
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let (xv, wv) = (val(*x), val(*w));
                let n = xv.last_dim();
                let rows = xv.rows();
                let mut dw_local = if want(*w) { Some(vec![0.0; n]) } else { None };
                let mut dx_buf = if want(*x) {
                    Some(grads[*x].take().unwrap_or_else(|| vec![0.0; xv.len()]))
                } else {
                    None
                };
                for r in 0..rows {
                    kernels::rmsnorm_row_backward(
                        xv.row(r),
                        wv.data(),
                        inv[r],
                        &g[r * n..(r + 1) * n],
                        dx_buf.as_mut().map(|d| &mut d[r * n..(r + 1) * n]),
                        dw_local.as_deref_mut(),
                    );
                }
                if let Some(d) = dx_buf {
                    grads[*x] = Some(d);
                }
                if let Some(dl) = dw_local {
                    let dw = slot(grads, *w, n);
                    for (d, v) in dw.iter_mut().zip(dl) {
                        *d += v;
                    }
                }
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                if want(*a) {
                    let y = nodes[i].value.data();
                    let da = slot(grads, *a, y.len());
                    for o in 0..*outer {
                        for k in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + k;
                            let dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                da[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CausalSoftmax { a } => {
                if want(*a) {
                    let y = nodes[i].value.data();
                    let s = nodes[i].value.shape();
                    let (n, lq, lk) = (s[0], s[1], s[2]);
                    let da = slot(grads, *a, y.len());
                    for b in 0..n {
                        for t in 0..lq {
                            let base = (b * lq + t) * lk;
                            let valid = Self::causal_valid(lq, lk, t);
                            let dot: f64 =
                                (0..valid).map(|j| g[base + j] * y[base + j]).sum();
                            for j in 0..valid {
                                da[base + j] += y[base + j] * (g[base + j] - dot);
                            }
                        }
                    }
                }
            }
            Op::CausalZero { a } => {
                if want(*a) {
                    let s = nodes[i].value.shape();
                    let (n, lq, lk) = (s[0], s[1], s[2]);
                    let da = slot(grads, *a, g.len());
                    for b in 0..n {
                        for t in 0..lq {
                            let base = (b * lq + t) * lk;
                            for j in 0..Self::causal_valid(lq, lk, t) {
                                da[base + j] += g[base + j];
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { a, seq, heads } => {
                if want(*a) {
                    let s = val(*a).shape();
                    let (rows, dm) = (s[0], s[1]);
                    let (batch, hd) = (rows / seq, dm / heads);
                    let da = slot(grads, *a, rows * dm);
                    for b in 0..batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * seq + t) * hd;
                                let dst = (b * seq + t) * dm + h * hd;
                                for e in 0..hd {
                                    da[dst + e] += g[src + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, seq, heads } => {
                if want(*a) {
                    let s = val(*a).shape();
                    let (bh, hd) = (s[0], s[2]);
                    let batch = bh / heads;
                    let dm = heads * hd;
                    let da = slot(grads, *a, bh * seq * hd);
                    for b in 0..batch {
                        for h in 0..*heads {
                            for t in 0..*seq {
                                let src = (b * seq + t) * dm + h * hd;
                                let dst = ((b * heads + h) * seq + t) * hd;
                                for e in 0..hd {
                                    da[dst + e] += g[src + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::Rope { a, angles } => {
                if want(*a) {
                    let s = val(*a).shape();
                    let (n, seq, hd) = (s[0], s[1], s[2]);
                    let mut tmp = g.to_vec();
                    for b in 0..n {
                        for (t, ang) in angles.iter().enumerate() {
                            let st = (b * seq + t) * hd;
                            kernels::rope_apply_inverse(&mut tmp[st..st + hd], ang);
                        }
                    }
                    let da = slot(grads, *a, tmp.len());
                    for (d, v) in da.iter_mut().zip(tmp) {
                        *d += v;
                    }
                }
            }
            Op::Quantize {
                x,
                alpha,
                beta,
                qmax,
                bc,
            } => {
                let (xd, ad, bd) = (val(*x).data(), val(*alpha).data(), val(*beta).data());
                let n = xd.len();
                let np = ad.len();
                // dc is the gradient reaching c = round(x/alpha) - beta.
                let mut dc = vec![0.0; n];
                bc.for_each(n, |p, q| {
                    let c = self.rounded(xd[p] / ad[q]) - bd[q];
                    if c >= 0.0 && c <= *qmax {
                        dc[p] = g[p];
                    }
                });
                self.quant_input_grads(*x, *alpha, *beta, *bc, &dc, n, np, grads);
            }
            Op::FakeQuant {
                x,
                alpha,
                beta,
                qmax,
                bc,
            } => {
                let (xd, ad, bd) = (val(*x).data(), val(*alpha).data(), val(*beta).data());
                let n = xd.len();
                let np = ad.len();
                let ste = self.round_mode == RoundMode::Ste;
                let mut dx = want(*x).then(|| grads[*x].take().unwrap_or_else(|| vec![0.0; n]));
                let (da_out, db_out) = fake_quant_backward(xd, ad, bd, g, *qmax, *bc, ste, dx.as_deref_mut());
                if let Some(dx) = dx {
                    grads[*x] = Some(dx);
                }
                if want(*alpha) {
                    let da = slot(grads, *alpha, np);
                    for (d, v) in da.iter_mut().zip(&da_out) {
                        *d += v;
                    }
                }
                if want(*beta) {
                    let db = slot(grads, *beta, np);
                    for (d, v) in db.iter_mut().zip(&db_out) {
                        *d += v;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if want(*table) {
                    let tv = val(*table);
                    let d = tv.shape()[1];
                    let dt = slot(grads, *table, tv.len());
                    for (r, &id) in ids.iter().enumerate() {
                        for e in 0..d {
                            dt[id * d + e] += g[r * d + e];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if want(*logits) {
                    let v = val(*logits).shape()[1];
                    let s = g[0] / targets.len() as f64;
                    let dl = slot(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..v {
                            let ind = if c == t { 1.0 } else { 0.0 };
                            dl[r * v + c] += s * (probs[r * v + c] - ind);
                        }
                    }
                }
            }
            Op::Mse { a, target } => {
                if want(*a) {
                    let ad = val(*a).data();
                    let s = 2.0 * g[0] / ad.len() as f64;
                    let da = slot(grads, *a, ad.len());
                    for j in 0..ad.len() {
                        da[j] += s * (ad[j] - target[j]);
                    }
                }
            }
        }
    }

    /// Shared tail of the quantizer backward: given the gradient at
    /// `c = round(x/alpha) - beta`, push it to `x`, `alpha` and `beta`.
    #[allow(clippy::too_many_arguments)]
    fn quant_input_grads(
        &self,
        x: usize,
        alpha: usize,
        beta: usize,
        bc: Bcast,
        dc: &[f64],
        n: usize,
        np: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (xd, ad) = (nodes[x].value.data(), nodes[alpha].value.data());
        if nodes[beta].requires_grad {
            let db = grads[beta].get_or_insert_with(|| vec![0.0; np]);
            bc.for_each(n, |p, q| db[q] -= dc[p]);
        }
        if nodes[alpha].requires_grad {
            let da = grads[alpha].get_or_insert_with(|| vec![0.0; np]);
            // d(x/alpha)/dalpha = -(x/alpha)/alpha
            bc.for_each(n, |p, q| da[q] -= dc[p] * (xd[p] / ad[q]) / ad[q]);
        }
        if nodes[x].requires_grad {
            let dx = grads[x].get_or_insert_with(|| vec![0.0; n]);
            bc.for_each(n, |p, q| dx[p] += dc[p] / ad[q]);
        }
    }
}

/// Gradients of `y = (clamp(round(x/a) - b, 0, qmax) + b) * a` for one
/// fake-quant node: accumulates into `dx` and returns `(da, db)` per group.
/// Outside the clamp range the code is constant; inside, rounding passes
/// gradients straight through.
#[allow(clippy::too_many_arguments)]
fn fake_quant_backward(
    xd: &[f64],
    ad: &[f64],
    bd: &[f64],
    g: &[f64],
    qmax: f64,
    bc: Bcast,
    ste: bool,
    mut dx: Option<&mut [f64]>,
) -> (Vec<f64>, Vec<f64>) {
    #[inline(always)]
    fn elem(x: f64, a: f64, b: f64, g: f64, qmax: f64, ste: bool) -> (f64, f64, f64) {
        let u = x / a;
        let c = if ste { round_half_even(u) } else { u } - b;
        let code = c.clamp(0.0, qmax);
        let dcode = g * a;
        if c >= 0.0 && c <= qmax {
            // d(x/a)/da = -(x/a)/a, and the code's -b cancels the +b term.
            (g * (code + b) - dcode * u / a, 0.0, dcode / a)
        } else {
            (g * (code + b), dcode, 0.0)
        }
    }
    let np = ad.len();
    let mut da = vec![0.0; np];
    let mut db = vec![0.0; np];
    if bc.n == 1 {
        let (a, b) = (ad[0], bd[0]);
        let (mut sa, mut sb) = (0.0, 0.0);
        for p in 0..xd.len() {
            let (ga, gb, gx) = elem(xd[p], a, b, g[p], qmax, ste);
            sa += ga;
            sb += gb;
            if let Some(dx) = dx.as_deref_mut() {
                dx[p] += gx;
            }
        }
        da[0] = sa;
        db[0] = sb;
    } else {
        bc.for_each(xd.len(), |p, q| {
            let (ga, gb, gx) = elem(xd[p], ad[q], bd[q], g[p], qmax, ste);
            da[q] += ga;
            db[q] += gb;
            if let Some(dx) = dx.as_deref_mut() {
                dx[p] += gx;
            }
        });
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every parameter gradient of `build` against central finite
    /// differences with step 1e-5.
    fn check_fd(params: &[(&str, Tensor)], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let eval = |ps: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| g.param(format!("p{i}"), p.clone())).collect();
            let l = build(&mut g, &vars);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|(n, p)| g.param(*n, p.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let base: Vec<Tensor> = params.iter().map(|(_, p)| p.clone()).collect();
        let h = 1e-5;
        for (pi, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).unwrap();
            for j in 0..base[pi].len() {
                let mut plus = base.clone();
                plus[pi].data_mut()[j] += h;
                let mut minus = base.clone();
                minus[pi].data_mut()[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - fd).abs() / (1.0 + fd.abs());
                assert!(err < tol, "param {} elem {j}: analytic {a} vs fd {fd}", params[pi].0);
            }
        }
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0, 7.0, 8.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, &[4, 5]);
        let b = rand_t(&mut rng, &[5, 3]);
        check_fd(&[("a", a), ("b", b)], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            g.sum(y)
        }, 1e-6);
    }

    #[test]
    fn ste_round_examples() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(2.0));
        let r = g.ste_round(x);
        assert_eq!(g.value(r).item(), 2.0);
        let grads = g.backward(r).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);

        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(2.5));
        let r = g.ste_round(x);
        assert_eq!(g.value(r).item(), 2.0);

        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(1.0));
        let s = g.scale(x, 3.3);
        let r = g.ste_round(s);
        assert_eq!(g.value(r).item(), 3.0);
        let l = g.sum(r);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 3.3);
    }

    #[test]
    fn rmsnorm_examples_and_gradient() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[1.0; 4]));
        let w = g.constant(t(&[4], &[1.0; 4]));
        let y = g.rmsnorm(x, w, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 4]);
        let x = g.constant(t(&[2], &[2.0, 2.0]));
        let w = g.constant(t(&[2], &[0.5, 3.0]));
        let y = g.rmsnorm(x, w, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 3.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[8]);
        let w = rand_t(&mut rng, &[8]);
        let c = rand_t(&mut rng, &[8]);
        check_fd(&[("x", x), ("w", w)], move |g, v| {
            let y = g.rmsnorm(v[0], v[1], 1e-5).unwrap();
            let cc = g.constant(c.clone());
            let p = g.mul(y, cc).unwrap();
            g.sum(p)
        }, 1e-6);
    }

    #[test]
    fn small_op_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        assert!(matches!(g.softmax(x, 1), Err(Error::Axis { axis: 1, rank: 1 })));
        let z = g.constant(Tensor::scalar(0.0));
        let y = g.silu(z);
        assert_eq!(g.value(y).item(), 0.0);

        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let c = g.clamp(x, 0.0, 2.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(2.0));
        let c = g.clamp(x, 0.0, 2.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let w = g.param("w", t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let l = g.sum(w);
        let grads = g.backward(l).unwrap().by_name();
        assert_eq!(grads["w"].data(), &[1.0; 6]);
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn composite_rmsnorm_matmul_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&mut rng, &[2, 4]);
        let nw = rand_t(&mut rng, &[4]);
        let w = rand_t(&mut rng, &[4, 4]);
        let c = rand_t(&mut rng, &[2, 4]);
        check_fd(&[("x", x), ("nw", nw), ("w", w)], move |g, v| {
            let h = g.rmsnorm(v[0], v[1], 1e-5).unwrap();
            let y = g.matmul(h, v[2]).unwrap();
            let p = g.softmax(y, 1).unwrap();
            let cc = g.constant(c.clone());
            let q = g.mul(p, cc).unwrap();
            g.sum(q)
        }, 1e-5);
    }

    #[test]
    fn smooth_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[4]);
        let col = rand_t(&mut rng, &[3, 1]);
        check_fd(&[("a", a), ("b", b), ("col", col)], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let m = g.mul(s, v[2]).unwrap();
            let e = g.exp(m);
            let si = g.silu(e);
            let ge = g.gelu(s);
            let sg = g.sigmoid(ge);
            let d = g.div(si, v[1]).unwrap();
            let tr = g.transpose(sg).unwrap();
            let tr = g.transpose(tr).unwrap();
            let q = g.sub(d, tr).unwrap();
            let sm = g.softmax(q, 0).unwrap();
            let r = g.reshape(sm, &[12]).unwrap();
            let p = g.mul(r, r).unwrap();
            let mx = g.reduce_max(m, Some(1)).unwrap();
            let mn = g.reduce_min(m, Some(0)).unwrap();
            let l1 = g.mean(p);
            let l2 = g.sum(mx);
            let l3 = g.sum(mn);
            let l = g.add(l1, l2).unwrap();
            g.add(l, l3).unwrap()
        }, 1e-4);
    }

    #[test]
    fn attention_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // batch 2, seq 3, 2 heads of width 4
        let q = rand_t(&mut rng, &[6, 8]);
        let k = rand_t(&mut rng, &[6, 8]);
        let v = rand_t(&mut rng, &[6, 8]);
        let c = rand_t(&mut rng, &[6, 8]);
        check_fd(&[("q", q), ("k", k), ("v", v)], move |g, p| {
            let qh = g.split_heads(p[0], 3, 2).unwrap();
            let kh = g.split_heads(p[1], 3, 2).unwrap();
            let vh = g.split_heads(p[2], 3, 2).unwrap();
            let qr = g.rope(qh, 0, 10000.0).unwrap();
            let kr = g.rope(kh, 0, 10000.0).unwrap();
            let s = g.batch_matmul(qr, kr, true).unwrap();
            let s = g.causal_zero(s).unwrap();
            let pr = g.causal_softmax(s).unwrap();
            let o = g.batch_matmul(pr, vh, false).unwrap();
            let m = g.merge_heads(o, 2).unwrap();
            let cc = g.constant(c.clone());
            let y = g.mul(m, cc).unwrap();
            g.sum(y)
        }, 1e-5);
    }

    #[test]
    fn loss_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let table = rand_t(&mut rng, &[5, 3]);
        let w = rand_t(&mut rng, &[3, 5]);
        let target = rand_t(&mut rng, &[4, 3]);
        check_fd(&[("table", table), ("w", w)], move |g, p| {
            let e = g.embedding(p[0], &[0, 3, 3, 4]).unwrap();
            let logits = g.matmul(e, p[1]).unwrap();
            let ce = g.cross_entropy(logits, &[1, 2, 0, 4]).unwrap();
            let m = g.mse(e, &target).unwrap();
            g.add(ce, m).unwrap()
        }, 1e-6);
    }

    #[test]
    fn clamp_var_routes_gradient_to_active_bound() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[2, 3], &[-2.0, 0.5, 3.0, 0.0, 1.0, 2.0]));
        let lo = g.param("lo", t(&[2, 1], &[-1.0, 0.5]));
        let hi = g.param("hi", t(&[2, 1], &[2.0, 1.5]));
        let y = g.clamp_var(x, lo, hi).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 0.5, 2.0, 0.5, 1.0, 1.5]);
        let l = g.sum(y);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(gr.get(lo).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(gr.get(hi).unwrap().data(), &[1.0, 1.0]);
    }

    /// The fused quantizer against the same function assembled from
    /// primitive ops.
    #[test]
    fn fused_fake_quant_matches_primitive_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::new(&[4, 6], (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let alpha = t(&[6], &[0.02, 0.05, 0.01, 0.03, 0.04, 0.025]);
        let beta = t(&[6], &[-100.0, -20.0, -128.0, -60.0, -10.0, -200.0]);
        let qmax = 255.0;

        let mut g1 = Graph::new();
        let (x1, a1, b1) = (g1.param("x", x.clone()), g1.param("a", alpha.clone()), g1.param("b", beta.clone()));
        let y1 = g1.fake_quant(x1, a1, b1, qmax).unwrap();
        let l1 = g1.sum(y1);
        let gr1 = g1.backward(l1).unwrap().by_name();

        let mut g2 = Graph::new();
        let (x2, a2, b2) = (g2.param("x", x), g2.param("a", alpha), g2.param("b", beta));
        let u = g2.div(x2, a2).unwrap();
        let r = g2.ste_round(u);
        let c = g2.sub(r, b2).unwrap();
        let q = g2.clamp(c, 0.0, qmax);
        let d = g2.add(q, b2).unwrap();
        let y2 = g2.mul(d, a2).unwrap();
        let l2 = g2.sum(y2);
        let gr2 = g2.backward(l2).unwrap().by_name();

        assert!(g1.value(y1).max_abs_diff(g2.value(y2)) < 1e-12);
        for k in ["x", "a", "b"] {
            let diff = gr1[k].max_abs_diff(&gr2[k]);
            assert!(diff < 1e-9, "{k}: {diff}");
        }
    }

    #[test]
    fn ste_graph_gradients_equal_identity_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = rand_t(&mut rng, &[4, 3]);
        let x = rand_t(&mut rng, &[2, 4]);
        let run = |mode: RoundMode| {
            let mut g = Graph::with_round_mode(mode);
            let wv = g.param("w", w.clone());
            let xv = g.param("x", x.clone());
            let s = g.scale(xv, 17.0);
            let r = g.ste_round(s);
            let y = g.matmul(r, wv).unwrap();
            let l = g.sum(y);
            (g.value(r).clone(), g.backward(l).unwrap().by_name())
        };
        let (fr, ste) = run(RoundMode::Ste);
        let (fi, id) = run(RoundMode::Identity);
        assert!(fr.max_abs_diff(&fi) <= 0.5);
        // The gradient of `x` only travels back through the rounding node.
        // `w`'s gradient reads the rounded forward value and so differs.
        assert_eq!(ste["x"].data(), id["x"].data());
        assert_ne!(ste["w"].data(), id["w"].data());
    }

    #[test]
    fn backward_is_deterministic_and_rejects_non_finite() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::new();
            let a = g.param("a", rand_t(&mut rng, &[8, 8]));
            let b = g.param("b", rand_t(&mut rng, &[8, 8]));
            let y = g.matmul(a, b).unwrap();
            let s = g.softmax(y, 1).unwrap();
            let l = g.mean(s);
            g.backward(l).unwrap().by_name()
        };
        let (r1, r2) = (run(), run());
        for (k, v) in &r1 {
            let b1: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
            let b2: Vec<u64> = r2[k].data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(b1, b2);
        }

        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(1.0));
        let z = g.scalar(0.0);
        let d = g.div(a, z).unwrap();
        assert!(matches!(g.backward(d), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unreached_parameters_get_zero_gradients() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(2.0));
        let _b = g.param("b", t(&[2], &[1.0, 1.0]));
        let l = g.scale(a, 3.0);
        let grads = g.backward(l).unwrap().by_name();
        assert_eq!(grads["a"].item(), 3.0);
        assert_eq!(grads["b"].data(), &[0.0, 0.0]);
    }
}
