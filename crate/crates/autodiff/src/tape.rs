//! The recording tape and its differentiable operations.
//!
//! Every operation appends a node whose parents were recorded earlier, so the
//! node vector is already in topological order and `backward` is a single
//! reverse sweep.

use crate::error::{AutodiffError, Result};
use crate::tensor::{split_axis, Tensor};

/// Inputs to `log` (and the `q` side of `kl_div`) are floored here.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which operand of a binary op repeats along the leading axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    Rhs,
    Lhs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchNormMode<'a> {
    /// Normalise with the batch's own statistics.
    Train { eps: f64 },
    /// Normalise with externally held running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel statistics observed during a training-mode batch norm.
/// `var` is the unbiased estimate, suitable for running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    MeanAxis(Var, usize),
    Repeat(Var, usize, usize),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    KlDiv(Var, Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    IndexSelect(Var, usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Records operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `data` (laid out as `shape`) into the axis order `perm`.
fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Records `value` as a constant: the result carries no gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let value = self.node(a)?.value.map(f);
        let ng = self.ng(a);
        Ok(self.push(value, op, ng))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa == sb {
            Ok(Bcast::None)
        } else if sa.len() == sb.len() + 1 && sa[1..] == *sb {
            Ok(Bcast::Rhs)
        } else if sb.len() == sa.len() + 1 && sb[1..] == *sa {
            Ok(Bcast::Lhs)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (la, lb) = (va.len(), vb.len());
        let (shape, n) = match bc {
            Bcast::Lhs => (vb.shape().to_vec(), lb),
            _ => (va.shape().to_vec(), la),
        };
        let (da, db) = (va.data(), vb.data());
        let data: Vec<f64> = (0..n)
            .map(|k| f(da[k % la.max(1)], db[k % lb.max(1)]))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, data)?, op(a, b), ng))
    }

    /// Elementwise sum; either side may omit the leading axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, 1.0)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.node(a)?.value.ndim() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                reason: format!("expected a matrix, got shape {:?}", self.shape(a)),
            });
        }
        self.permute(a, &[1, 0])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.node(a)?.value.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(AutodiffError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let (data, out_shape) = permute_data(self.nodes[a.0].value.data(), &shape, perm);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(a, perm.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(a)?.value.clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the input floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Square root; negative inputs are treated as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a))
    }

    /// `a^c` for non-negative `a`; the derivative at `a = 0` is taken as 0
    /// unless `c == 1`.
    pub fn powf(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x.max(0.0).powf(c), Op::Powf(a, c))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(AutodiffError::InvalidArgument {
                op: "clamp",
                reason: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = &self.node(a)?.value;
        let (outer, n, inner) = split_axis(value.shape(), axis)?;
        let src = value.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let shape = value.shape().to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), ng))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = &self.node(a)?.value;
        let (outer, n, inner) = split_axis(value.shape(), axis)?;
        let src = value.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let shape = value.shape().to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(a, axis), ng))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.node(a)?.value;
        if v.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                reason: "empty tensor".into(),
            });
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), ng))
    }

    fn reduce_axis(&self, a: Var, axis: usize, scale_by_len: bool) -> Result<Tensor> {
        let v = &self.node(a)?.value;
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        let src = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[o * n * inner + j * inner + i];
                }
            }
        }
        if scale_by_len && n > 0 {
            out.iter_mut().for_each(|x| *x /= n as f64);
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, out)
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis(a, axis, false)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SumAxis(a, axis), ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.reduce_axis(a, axis, true)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::MeanAxis(a, axis), ng))
    }

    /// Tiles a size-1 `axis` `n` times.
    pub fn repeat(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let v = &self.node(a)?.value;
        let (outer, len, inner) = split_axis(v.shape(), axis)?;
        if len != 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "repeat",
                reason: format!("axis {axis} of {:?} must have length 1", v.shape()),
            });
        }
        let src = v.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = n;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Repeat(a, axis, n), ng))
    }

    /// 1-D convolution of `x: [B, C_in, L]` with `w: [C_out, C_in, K]`.
    /// Output length is `floor((L + 2·pad − K) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.node(x)?.value.shape().to_vec();
        let sw = self.node(w)?.value.shape().to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] {
            return Err(AutodiffError::InvalidArgument {
                op: "conv1d",
                reason: format!(
                    "kernel {} with stride {stride} and padding {pad} does not fit length {}",
                    sw[2], sx[2]
                ),
            });
        }
        let (b, ci, l) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        let lo = conv_out_len(l, k, stride, pad);
        let xd = self.nodes[x.0].value.data();
        let wd = self.nodes[w.0].value.data();
        let mut out = vec![0.0; b * co * lo];
        for bi in 0..b {
            for o in 0..co {
                let orow = &mut out[(bi * co + o) * lo..(bi * co + o + 1) * lo];
                for c in 0..ci {
                    let xrow = &xd[(bi * ci + c) * l..(bi * ci + c + 1) * l];
                    let wrow = &wd[(o * ci + c) * k..(o * ci + c + 1) * k];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        let base = (t * stride) as isize - pad as isize;
                        for (kk, &wv) in wrow.iter().enumerate() {
                            let pos = base + kk as isize;
                            if pos >= 0 && (pos as usize) < l {
                                *ov += wv * xrow[pos as usize];
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(
            Tensor::new(vec![b, co, lo], out)?,
            Op::Conv1d { x, w, stride, pad },
            ng,
        ))
    }

    /// Batch normalisation over `[B, C]` or `[B, C, L]`, per channel `C`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.node(x)?.value.shape().to_vec();
        let sg = self.node(gamma)?.value.shape().to_vec();
        let sb = self.node(beta)?.value.shape().to_vec();
        if !(sx.len() == 2 || sx.len() == 3) || sg != [sx[1]] || sb != sg {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch_norm",
                lhs: sx,
                rhs: sg,
            });
        }
        let (b, c) = (sx[0], sx[1]);
        let l = if sx.len() == 3 { sx[2] } else { 1 };
        let count = b * l;
        let xd = self.nodes[x.0].value.data();
        let idx = |bi: usize, ch: usize, t: usize| (bi * c + ch) * l + t;
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                if count < 2 {
                    return Err(AutodiffError::InvalidArgument {
                        op: "batch_norm",
                        reason: "training mode needs at least two values per channel".into(),
                    });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..b {
                        for t in 0..l {
                            s += xd[idx(bi, ch, t)];
                        }
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for bi in 0..b {
                        for t in 0..l {
                            let d = xd[idx(bi, ch, t)] - m;
                            v += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / count as f64;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(AutodiffError::InvalidArgument {
                        op: "batch_norm",
                        reason: format!("running statistics must have {c} channels"),
                    });
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                for t in 0..l {
                    let i = idx(bi, ch, t);
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            var: var
                .iter()
                .map(|v| v * count as f64 / (count - 1) as f64)
                .collect(),
            mean,
        });
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let var_out = self.push(
            Tensor::new(sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            ng,
        );
        Ok((var_out, stats))
    }

    /// Row-wise `KL(p‖q) = Σ p·(ln p − ln q)` over the last axis; entries with
    /// `p = 0` contribute nothing and `q` is floored at [`LOG_FLOOR`].
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let sp = self.node(p)?.value.shape().to_vec();
        let sq = self.node(q)?.value.shape().to_vec();
        if sp != sq || sp.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "kl_div",
                lhs: sp,
                rhs: sq,
            });
        }
        let n = *sp.last().unwrap();
        let pd = self.nodes[p.0].value.data();
        let qd = self.nodes[q.0].value.data();
        let rows = pd.len() / n.max(1);
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            for j in 0..n {
                let (pv, qv) = (pd[r * n + j], qd[r * n + j]);
                if pv > 0.0 {
                    out[r] += pv * (pv.ln() - qv.max(LOG_FLOOR).ln());
                }
            }
        }
        let shape = sp[..sp.len() - 1].to_vec();
        let ng = self.ng(p) || self.ng(q);
        Ok(self.push(Tensor::new(shape, out)?, Op::KlDiv(p, q), ng))
    }

    /// Joins tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.node(*first)?.value.shape().to_vec();
        split_axis(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = &self.node(a)?.value;
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        if start > end || end > n {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} outside axis of length {n}"),
            });
        }
        let src = v.data();
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = width;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice(a, axis, start), ng))
    }

    /// Gathers positions `indices` along `axis`; repeats are allowed.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = &self.node(a)?.value;
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::InvalidArgument {
                op: "index_select",
                reason: format!("index {bad} outside axis of length {n}"),
            });
        }
        let src = v.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&src[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = indices.len();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::IndexSelect(a, axis, indices.to_vec()),
            ng,
        ))
    }

    /// `x·w + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Scales each row of a `[B, E]` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "l2_normalize_rows",
                reason: format!("expected a matrix, got shape {shape:?}"),
            });
        }
        let norms = self.row_norms(a, eps)?;
        let col = self.reshape(norms, &[shape[0], 1])?;
        let tiled = self.repeat(col, 1, shape[1])?;
        self.div(a, tiled)
    }

    /// `sqrt(Σ_j a_ij² + eps)` for each row of a matrix.
    pub fn row_norms(&mut self, a: Var, eps: f64) -> Result<Var> {
        let sq = self.mul(a, a)?;
        let ss = self.sum_axis(sq, 1)?;
        let shifted = self.add_scalar(ss, eps)?;
        self.sqrt(shifted)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(node.value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (la, lb) = (val(*a).len(), val(*b).len());
                acc(*a, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % la.max(1)] += gk;
                    }
                });
                acc(*b, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % lb.max(1)] += sign * gk;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let (la, lb) = (da.len(), db.len());
                acc(*a, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % la] += gk * db[k % lb];
                    }
                });
                acc(*b, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % lb] += gk * da[k % la];
                    }
                });
            }
            Op::Div(a, b) => {
                let (da, db) = (val(*a), val(*b));
                let (la, lb) = (da.len(), db.len());
                acc(*a, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % la] += gk / db[k % lb];
                    }
                });
                acc(*b, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        let bv = db[k % lb];
                        s[k % lb] -= gk * da[k % la] / (bv * bv);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| {
                for (sv, gk) in s.iter_mut().zip(g) {
                    *sv += c * gk;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |s| {
                for (sv, gk) in s.iter_mut().zip(g) {
                    *sv += gk;
                }
            }),
            Op::MatMul(a, b) => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |s| {
                    let bt = transpose_raw(val(*b), k, n);
                    let d = matmul_raw(g, &bt, m, n, k);
                    s.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                });
                acc(*b, &mut |s| {
                    let at = transpose_raw(val(*a), m, k);
                    let d = matmul_raw(&at, g, k, m, n);
                    s.iter_mut().zip(d).for_each(|(x, y)| *x += y);
                });
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (back, _) = permute_data(g, nodes[i].value.shape(), &inverse);
                acc(*a, &mut |s| s.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] > LOG_FLOOR {
                            s[k] += g[k] / x[k];
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * sigmoid(x[k]);
                    }
                });
            }
            Op::Sqrt(a) => acc(*a, &mut |s| {
                for k in 0..s.len() {
                    if out[k] > 0.0 {
                        s[k] += g[k] * 0.5 / out[k];
                    }
                }
            }),
            Op::Powf(a, c) => {
                let x = val(*a);
                let c = *c;
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        let d = if c == 0.0 {
                            0.0
                        } else if x[k] > 0.0 {
                            c * x[k].powf(c - 1.0)
                        } else if c == 1.0 {
                            1.0
                        } else {
                            0.0
                        };
                        s[k] += g[k] * d;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for k in 0..s.len() {
                        if x[k] >= *lo && x[k] <= *hi {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let is_log = matches!(nodes[i].op, Op::LogSoftmax(..));
                let (outer, n, inner) =
                    split_axis(nodes[i].value.shape(), *axis).expect("checked at record time");
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + ii;
                            if is_log {
                                let gs: f64 = (0..n).map(|j| g[at(j)]).sum();
                                for j in 0..n {
                                    s[at(j)] += g[at(j)] - out[at(j)].exp() * gs;
                                }
                            } else {
                                let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                                for j in 0..n {
                                    s[at(j)] += out[at(j)] * (g[at(j)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, n, inner) =
                    split_axis(nodes[a.0].value.shape(), *axis).expect("checked at record time");
                let scale = if matches!(nodes[i].op, Op::MeanAxis(..)) {
                    1.0 / n.max(1) as f64
                } else {
                    1.0
                };
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for j in 0..n {
                            for ii in 0..inner {
                                s[o * n * inner + j * inner + ii] += scale * g[o * inner + ii];
                            }
                        }
                    }
                });
            }
            Op::Repeat(a, axis, n) => {
                let (outer, _, inner) =
                    split_axis(nodes[a.0].value.shape(), *axis).expect("checked at record time");
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for r in 0..*n {
                            for ii in 0..inner {
                                s[o * inner + ii] += g[(o * n + r) * inner + ii];
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, stride, pad } => {
                let sx = nodes[x.0].value.shape();
                let sw = nodes[w.0].value.shape();
                let (b, ci, l) = (sx[0], sx[1], sx[2]);
                let (co, k) = (sw[0], sw[2]);
                let lo = nodes[i].value.shape()[2];
                let (xd, wd) = (val(*x), val(*w));
                let (stride, pad) = (*stride, *pad);
                // (gradient index, input index, weight index) for every live tap
                let taps = |f: &mut dyn FnMut(usize, usize, usize)| {
                    for bi in 0..b {
                        for o in 0..co {
                            for c in 0..ci {
                                for t in 0..lo {
                                    let base = (t * stride) as isize - pad as isize;
                                    for kk in 0..k {
                                        let pos = base + kk as isize;
                                        if pos >= 0 && (pos as usize) < l {
                                            f(
                                                (bi * co + o) * lo + t,
                                                (bi * ci + c) * l + pos as usize,
                                                (o * ci + c) * k + kk,
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                };
                acc(*x, &mut |s| taps(&mut |gi, xi, wi| s[xi] += g[gi] * wd[wi]));
                acc(*w, &mut |s| taps(&mut |gi, xi, wi| s[wi] += g[gi] * xd[xi]));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let sx = nodes[x.0].value.shape();
                let (b, c) = (sx[0], sx[1]);
                let l = if sx.len() == 3 { sx[2] } else { 1 };
                let idx = |bi: usize, ch: usize, t: usize| (bi * c + ch) * l + t;
                let gd = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        for t in 0..l {
                            let k = idx(bi, ch, t);
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                acc(*gamma, &mut |s| s.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v));
                acc(*beta, &mut |s| s.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v));
                let count = (b * l) as f64;
                acc(*x, &mut |s| {
                    for bi in 0..b {
                        for ch in 0..c {
                            for t in 0..l {
                                let k = idx(bi, ch, t);
                                s[k] += if *train {
                                    gd[ch] * inv_std[ch] / count
                                        * (count * g[k] - sum_g[ch] - xhat[k] * sum_gx[ch])
                                } else {
                                    gd[ch] * inv_std[ch] * g[k]
                                };
                            }
                        }
                    }
                });
            }
            Op::KlDiv(p, q) => {
                let (pd, qd) = (val(*p), val(*q));
                let n = *nodes[p.0].value.shape().last().unwrap();
                acc(*p, &mut |s| {
                    for k in 0..s.len() {
                        if pd[k] > 0.0 {
                            s[k] += g[k / n] * (pd[k].ln() - qd[k].max(LOG_FLOOR).ln() + 1.0);
                        }
                    }
                });
                acc(*q, &mut |s| {
                    for k in 0..s.len() {
                        if pd[k] > 0.0 && qd[k] > LOG_FLOOR {
                            s[k] -= g[k / n] * pd[k] / qd[k];
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let shape = nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let width = nodes[p.0].value.shape()[*axis];
                    acc(p, &mut |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + width) * inner];
                            let dst = &mut s[o * width * inner..(o + 1) * width * inner];
                            dst.iter_mut().zip(src).for_each(|(a, v)| *a += v);
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, n, inner) =
                    split_axis(nodes[a.0].value.shape(), *axis).expect("checked at record time");
                let width = nodes[i].value.shape()[*axis];
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * n + start) * inner..(o * n + start + width) * inner];
                        let src = &g[o * width * inner..(o + 1) * width * inner];
                        dst.iter_mut().zip(src).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::IndexSelect(a, axis, indices) => {
                let (outer, n, inner) =
                    split_axis(nodes[a.0].value.shape(), *axis).expect("checked at record time");
                let m = indices.len();
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for (r, &src_i) in indices.iter().enumerate() {
                            for ii in 0..inner {
                                s[(o * n + src_i) * inner + ii] += g[(o * m + r) * inner + ii];
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}
