use super::{broadcast_indices, broadcast_shape, gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    LogSoftmax(Var),
    Kron(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed primitives. Node ids increase monotonically,
/// so every node's inputs precede it and the reverse pass walks ids
/// backwards.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    strict: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = t.numel();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    let data = t.data();
    for _ in 0..total {
        out.push(data[flat]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor {
        shape: out_shape,
        data: out,
    }
}

impl Graph {
    /// A record in strict mode: any op producing NaN or infinity errors.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
        }
    }

    pub fn lenient() -> Self {
        Self {
            nodes: Vec::new(),
            strict: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<Var> {
        if self.strict && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape == tb.shape {
            Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else {
            let shape = broadcast_shape(&ta.shape, &tb.shape).ok_or_else(|| Error::ShapeMismatch {
                op: name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            })?;
            let ia = broadcast_indices(&ta.shape, &shape);
            let ib = broadcast_indices(&tb.shape, &shape);
            let data = ia.iter().zip(&ib).map(|(&i, &j)| f(ta.data[i], tb.data[j])).collect();
            Tensor { shape, data }
        };
        let tracked = self.tracked(&[a, b]);
        self.push(value, op, tracked, name)
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.nodes[x.0].value.map(f);
        let tracked = self.tracked(&[x]);
        self.push(value, op, tracked, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "neg", |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "offset", |v| v + c, Op::Offset(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", f64::ln, Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "softplus", softplus, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sqrt", f64::sqrt, Op::Sqrt(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let tracked = self.tracked(&[a, b]);
        self.push(value, Op::MatMul(a, b), tracked, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.transpose()?;
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Transpose(x), tracked, "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.nodes[x.0].value.sum());
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Sum(x), tracked, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Mean(x), tracked, "mean")
    }

    /// Sums out `axis`, removing it from the shape (a rank-1 input yields a
    /// one-element tensor).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.shape.len() {
            return Err(Error::InvalidShape {
                shape: t.shape.clone(),
                reason: format!("no axis {axis}"),
            });
        }
        let (outer, len, inner) = split_axis(&t.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &t.data[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let tracked = self.tracked(&[x]);
        self.push(Tensor { shape, data }, Op::SumAxis(x, axis), tracked, "sum_axis")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Reshape(x), tracked, "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let mut seen = vec![false; t.shape.len()];
        if perm.len() != t.shape.len()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidShape {
                shape: t.shape.clone(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let value = permute_data(t, perm);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Permute(x, perm.to_vec()), tracked, "permute")
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if axis >= t.shape.len() || start + len > t.shape[axis] || len == 0 {
            return Err(Error::InvalidShape {
                shape: t.shape.clone(),
                reason: format!("slice {start}..{} on axis {axis}", start + len),
            });
        }
        let (outer, full, inner) = split_axis(&t.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&t.data[base..base + len * inner]);
        }
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let tracked = self.tracked(&[x]);
        self.push(Tensor { shape, data }, Op::Slice { x, axis, start }, tracked, "slice")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.nodes[xs[0].0].value.shape.clone();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                shape: first,
                reason: format!("no axis {axis}"),
            });
        }
        let mut total = 0;
        for v in xs {
            let s = &self.nodes[v.0].value.shape;
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let t = &self.nodes[v.0].value;
                let len = t.shape[axis];
                data.extend_from_slice(&t.data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tracked = self.tracked(xs);
        self.push(
            Tensor { shape, data },
            Op::Concat { xs: xs.to_vec(), axis },
            tracked,
            "concat",
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let c = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = t.shape.clone();
        let tracked = self.tracked(&[x]);
        self.push(Tensor { shape, data }, Op::LogSoftmax(x), tracked, "log_softmax")
    }

    /// Kronecker product of two matrices.
    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "kron",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (ar, ac, br, bc) = (ta.shape[0], ta.shape[1], tb.shape[0], tb.shape[1]);
        let cols = ac * bc;
        let mut data = vec![0.0; ar * br * cols];
        for i1 in 0..ar {
            for j1 in 0..ac {
                let s = ta.data[i1 * ac + j1];
                for i2 in 0..br {
                    let row = (i1 * br + i2) * cols + j1 * bc;
                    for j2 in 0..bc {
                        data[row + j2] = s * tb.data[i2 * bc + j2];
                    }
                }
            }
        }
        let tracked = self.tracked(&[a, b]);
        self.push(
            Tensor {
                shape: vec![ar * br, cols],
                data,
            },
            Op::Kron(a, b),
            tracked,
            "kron",
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(&lt.shape));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    /// Accumulates `f(k, i_a, i_b)` into the broadcast-reduced gradient of
    /// each operand of a binary op, for every output element `k`.
    fn binary_grads(
        &self,
        a: Var,
        b: Var,
        out_shape: &[usize],
        grads: &mut [Option<Tensor>],
        fa: impl Fn(usize, usize, usize) -> f64,
        fb: impl Fn(usize, usize, usize) -> f64,
    ) {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        let n: usize = out_shape.iter().product();
        let (ia, ib) = if sa == sb {
            ((0..n).collect::<Vec<_>>(), (0..n).collect::<Vec<_>>())
        } else {
            (broadcast_indices(sa, out_shape), broadcast_indices(sb, out_shape))
        };
        if self.nodes[a.0].tracked {
            let mut ga = Tensor::zeros(sa);
            for k in 0..n {
                ga.data[ia[k]] += fa(k, ia[k], ib[k]);
            }
            self.accumulate(grads, a, ga);
        }
        if self.nodes[b.0].tracked {
            let mut gb = Tensor::zeros(sb);
            for k in 0..n {
                gb.data[ib[k]] += fb(k, ia[k], ib[k]);
            }
            self.accumulate(grads, b, gb);
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => self.binary_grads(*a, *b, &y.shape, grads, |k, _, _| gd[k], |k, _, _| gd[k]),
            Op::Sub(a, b) => self.binary_grads(*a, *b, &y.shape, grads, |k, _, _| gd[k], |k, _, _| -gd[k]),
            Op::Mul(a, b) => {
                let (da, db) = (&val(*a).data, &val(*b).data);
                self.binary_grads(
                    *a,
                    *b,
                    &y.shape,
                    grads,
                    |k, _, j| gd[k] * db[j],
                    |k, i, _| gd[k] * da[i],
                )
            }
            Op::Div(a, b) => {
                let (da, db) = (&val(*a).data, &val(*b).data);
                self.binary_grads(
                    *a,
                    *b,
                    &y.shape,
                    grads,
                    |k, _, j| gd[k] / db[j],
                    |k, i, j| -gd[k] * da[i] / (db[j] * db[j]),
                )
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.map(|v| -v)),
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Exp(x) => self.accumulate(grads, *x, g.zip_map(y, |a, b| a * b).unwrap()),
            Op::Log(x) => self.accumulate(grads, *x, g.zip_map(val(*x), |a, b| a / b).unwrap()),
            Op::Softplus(x) => self.accumulate(grads, *x, g.zip_map(val(*x), |a, b| a * sigmoid(b)).unwrap()),
            Op::Sigmoid(x) => self.accumulate(grads, *x, g.zip_map(y, |a, s| a * s * (1.0 - s)).unwrap()),
            Op::Tanh(x) => self.accumulate(grads, *x, g.zip_map(y, |a, t| a * (1.0 - t * t)).unwrap()),
            Op::Relu(x) => self.accumulate(
                grads,
                *x,
                g.zip_map(val(*x), |a, b| if b > 0.0 { a } else { 0.0 }).unwrap(),
            ),
            Op::Square(x) => self.accumulate(grads, *x, g.zip_map(val(*x), |a, b| 2.0 * a * b).unwrap()),
            Op::Sqrt(x) => self.accumulate(grads, *x, g.zip_map(y, |a, s| a / (2.0 * s)).unwrap()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.nodes[a.0].tracked {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, &tb.data, true, &mut ga, 0.0);
                    self.accumulate(
                        grads,
                        *a,
                        Tensor {
                            shape: vec![m, k],
                            data: ga,
                        },
                    );
                }
                if self.nodes[b.0].tracked {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, true, gd, false, &mut gb, 0.0);
                    self.accumulate(
                        grads,
                        *b,
                        Tensor {
                            shape: vec![k, n],
                            data: gb,
                        },
                    );
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose().unwrap()),
            Op::Sum(x) => self.accumulate(grads, *x, Tensor::full(&val(*x).shape, gd[0])),
            Op::Mean(x) => {
                let t = val(*x);
                self.accumulate(grads, *x, Tensor::full(&t.shape, gd[0] / t.numel() as f64))
            }
            Op::SumAxis(x, axis) => {
                let shape = &val(*x).shape;
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        data.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: shape.clone(),
                        data,
                    },
                );
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.clone().reshape(&val(*x).shape).unwrap()),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, permute_data(g, &inv));
            }
            Op::Slice { x, axis, start } => {
                let shape = &val(*x).shape;
                let (outer, full, inner) = split_axis(shape, *axis);
                let len = y.shape[*axis];
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    gx.data[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(&y.shape, *axis);
                let mut offset = 0;
                for v in xs {
                    let shape = &val(*v).shape;
                    let len = shape[*axis];
                    if self.nodes[v.0].tracked {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            data.extend_from_slice(&gd[src..src + len * inner]);
                        }
                        self.accumulate(
                            grads,
                            *v,
                            Tensor {
                                shape: shape.clone(),
                                data,
                            },
                        );
                    }
                    offset += len;
                }
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let mut gx = g.clone();
                for (row, yrow) in gx.data.chunks_mut(c).zip(y.data.chunks(c)) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().zip(yrow).for_each(|(r, l)| *r -= l.exp() * s);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Kron(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (ar, ac, br, bc) = (ta.shape[0], ta.shape[1], tb.shape[0], tb.shape[1]);
                let cols = ac * bc;
                let mut ga = Tensor::zeros(&ta.shape);
                let mut gb = Tensor::zeros(&tb.shape);
                for i1 in 0..ar {
                    for j1 in 0..ac {
                        let s = ta.data[i1 * ac + j1];
                        let mut acc = 0.0;
                        for i2 in 0..br {
                            let row = (i1 * br + i2) * cols + j1 * bc;
                            for j2 in 0..bc {
                                let gv = gd[row + j2];
                                acc += gv * tb.data[i2 * bc + j2];
                                gb.data[i2 * bc + j2] += gv * s;
                            }
                        }
                        ga.data[i1 * ac + j1] = acc;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
        }
    }
}

/// Gradients of a scalar loss with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
