//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is deliberately narrow: a bias may be added along the last
//! axis ([`Graph::add_row_bias`]) or along the channel axis of a
//! channel-major signal ([`Graph::add_channel_bias`]). Every other shape
//! disagreement is an error.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{transpose_blocks, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity used by the feed-forward and convolution layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    /// tanh approximation of GELU.
    #[default]
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                let t = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Per-(instance, column) centering and scaling constants for the
/// instance-normalization ops. Both slices are `[batch × columns]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnStats {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Activation(Var, Activation),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Mean(Var),
    Sum(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Var,
    },
    Standardize {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Rc<ColumnStats>,
    },
    Destandardize {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Rc<ColumnStats>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c = beta·c + op(a)·op(b)` with `op(a)` of shape `m × k` and `op(b)` of
/// shape `k × n`. When `a_t` is set, `a` is stored as `k × m`; likewise `b`
/// is stored as `n × k` when `b_t` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Batch size, channels and time extent of a `[F × T]` or `[B × F × T]` signal.
fn signal_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [f, t] => Some((1, f, t)),
        [b, f, t] => Some((b, f, t)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a differentiable leaf, populated by
    /// [`Graph::backward`]. `None` for constants and interior nodes.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_vec(
            t.shape().to_vec(),
            t.data().iter().map(|x| x * factor).collect(),
        );
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Adds `bias[N]` to every row of `x[..., N]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(Error::shape("add_row_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let out = Tensor::from_vec(sx.to_vec(), data);
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Adds `bias[F]` along the channel axis of `x[F × T]` or `x[B × F × T]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let (_, f, t) = signal_dims(sx).ok_or_else(|| Error::shape("add_channel_bias", sx, sb))?;
        if sb != [f] {
            return Err(Error::shape("add_channel_bias", sx, sb));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / t) % f];
        }
        let out = Tensor::from_vec(sx.to_vec(), data);
        Ok(self.push(out, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// `A[M×K] · B[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::from_vec([m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `A[B×M×K] · B[B×K×N]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push(Tensor::from_vec([bs, m, n], out), Op::BatchMatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(x)
            .reshape(shape.to_vec())
            .map_err(|_| Error::shape("reshape", self.shape(x), shape))?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let n = *t.shape().last().ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::from_vec(t.shape().to_vec(), data);
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().ok_or_else(|| Error::Contract("layer_norm of a scalar".into()))?;
        if n < 2 {
            return Err(Error::Config(format!("layer_norm needs at least 2 features, got {n}")));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::shape("layer_norm", &sx, self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let rows = xd.len() / n;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_vec(sx, out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(
            t.shape().to_vec(),
            t.data().iter().map(|&v| act.apply(v)).collect(),
        );
        self.push(out, Op::Activation(x, act), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_vec(shape, data);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) on axis {axis} out of range for {sx:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = split_axis(&sx, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let out = Tensor::from_vec(shape, data);
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Zero-padded "same" 1-D convolution (cross-correlation) of a
    /// channel-major signal `x[F_in × T]` or `x[B × F_in × T]` with
    /// `w[F_out × F_in × k]`, `k` odd.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (bs, fin, t) = signal_dims(sx).ok_or_else(|| Error::shape("conv1d_same", sx, sw))?;
        if sw.len() != 3 || sw[1] != fin {
            return Err(Error::shape("conv1d_same", sx, sw));
        }
        let (fout, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d_same needs an odd kernel, got {k}")));
        }
        if sb != [fout] {
            return Err(Error::shape("conv1d_same", sw, sb));
        }
        let pad = (k - 1) / 2;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bs * fout * t];
        for bi in 0..bs {
            for o in 0..fout {
                let orow = &mut out[(bi * fout + o) * t..(bi * fout + o + 1) * t];
                orow.fill(bd[o]);
                for i in 0..fin {
                    let xrow = &xd[(bi * fin + i) * t..(bi * fin + i + 1) * t];
                    for j in 0..k {
                        let wv = wd[(o * fin + i) * k + j];
                        // output step s reads input step s + j - pad
                        let lo = pad.saturating_sub(j);
                        let hi = (t + pad).saturating_sub(j).min(t);
                        for s in lo..hi {
                            orow[s] += wv * xrow[s + j - pad];
                        }
                    }
                }
            }
        }
        let mut shape = sx.to_vec();
        let r = shape.len();
        shape[r - 2] = fout;
        let out = Tensor::from_vec(shape, out);
        Ok(self.push(out, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    /// Point-wise (kernel 1) convolution: `w[F_out × F_in]` applied at every
    /// time step of `x[F_in × T]` or `x[B × F_in × T]`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (bs, fin, t) = signal_dims(sx).ok_or_else(|| Error::shape("pointwise_conv", sx, sw))?;
        if sw.len() != 2 || sw[1] != fin {
            return Err(Error::shape("pointwise_conv", sx, sw));
        }
        let fout = sw[0];
        if sb != [fout] {
            return Err(Error::shape("pointwise_conv", sw, sb));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bs * fout * t];
        for bi in 0..bs {
            let oblk = &mut out[bi * fout * t..(bi + 1) * fout * t];
            for (o, row) in oblk.chunks_exact_mut(t).enumerate() {
                row.fill(bd[o]);
            }
            gemm(fout, fin, t, wd, false, &xd[bi * fin * t..(bi + 1) * fin * t], false, oblk, 1.0);
        }
        let mut shape = sx.to_vec();
        let r = shape.len();
        shape[r - 2] = fout;
        let out = Tensor::from_vec(shape, out);
        Ok(self.push(out, Op::Pointwise { x, w, b }, &[x, w, b]))
    }

    fn check_instance_affine(
        &self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &ColumnStats,
    ) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        let (bs, t, c) = signal_dims(sx).ok_or_else(|| Error::shape(op, sx, self.shape(gamma)))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape(op, sx, self.shape(p)));
            }
        }
        if stats.center.len() != bs * c || stats.scale.len() != bs * c {
            return Err(Error::Contract(format!(
                "{op}: statistics cover {} columns but input has {bs}×{c}",
                stats.center.len()
            )));
        }
        Ok((bs, t, c))
    }

    /// `y[b,t,c] = gamma[c]·(x[b,t,c] − center[b,c]) / scale[b,c] + beta[c]`
    /// for `x[T × C]` or `x[B × T × C]`. The statistics are constants.
    pub fn standardize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Rc<ColumnStats>,
    ) -> Result<Var> {
        let (_, t, c) = self.check_instance_affine("standardize", x, gamma, beta, &stats)?;
        let (xd, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let data = xd
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let col = i % c;
                let sc = (i / (t * c)) * c + col;
                g[col] * (v - stats.center[sc]) / stats.scale[sc] + b[col]
            })
            .collect();
        let out = Tensor::from_vec(self.shape(x).to_vec(), data);
        Ok(self.push(
            out,
            Op::Standardize {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Exact inverse of [`Graph::standardize`]:
    /// `y = (x − beta[c]) / gamma[c] · scale[b,c] + center[b,c]`, with `gamma`
    /// entries smaller than `eps` in magnitude replaced by `±eps`.
    pub fn destandardize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Rc<ColumnStats>,
        eps: f64,
    ) -> Result<Var> {
        let (_, t, c) = self.check_instance_affine("destandardize", x, gamma, beta, &stats)?;
        let (xd, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let data = xd
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let col = i % c;
                let sc = (i / (t * c)) * c + col;
                (v - b[col]) / guard_gamma(g[col], eps) * stats.scale[sc] + stats.center[sc]
            })
            .collect();
        let out = Tensor::from_vec(self.shape(x).to_vec(), data);
        Ok(self.push(
            out,
            Op::Destandardize {
                x,
                gamma,
                beta,
                stats,
                eps,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout with keep-probability `1 − p`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let keep = 1.0 - p;
        let shape = self.shape(x).to_vec();
        let mask = Tensor::from_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of differentiable leaves
    /// accumulate across calls until [`Graph::zero_grad`]. Leaves not reachable
    /// from `loss` receive a zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let shape = node.value.shape().to_vec();
            let acc = node.grad.get_or_insert_with(|| Tensor::zeros(shape));
            if let Some(Some(g)) = grads.get(i) {
                for (a, b) in acc.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |ga| { add_into(ga, g) });
                acc!(*b, |gb| { add_into(gb, g) });
            }
            Op::Sub(a, b) => {
                acc!(*a, |ga| { add_into(ga, g) });
                acc!(*b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc!(*b, |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(a, f) => {
                acc!(*a, |ga| {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi * f;
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                acc!(*x, |gx| { add_into(gx, g) });
                let n = shp(*b)[0];
                acc!(*b, |gb| {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::AddChannelBias(x, b) => {
                acc!(*x, |gx| { add_into(gx, g) });
                let (_, f, t) = signal_dims(shp(*x)).unwrap();
                acc!(*b, |gb| {
                    for (r, row) in g.chunks_exact(t).enumerate() {
                        gb[r % f] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k, n) = (shp(*a)[0], shp(*a)[1], shp(*b)[1]);
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |ga| { gemm(m, n, k, g, false, bv, true, ga, 1.0) });
                acc!(*b, |gb| { gemm(k, m, n, av, true, g, false, gb, 1.0) });
            }
            Op::BatchMatMul(a, b) => {
                let (bs, m, k, n) = (shp(*a)[0], shp(*a)[1], shp(*a)[2], shp(*b)[2]);
                let (av, bv) = (val(*a), val(*b));
                acc!(*a, |ga| {
                    for s in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..],
                            false,
                            &bv[s * k * n..],
                            true,
                            &mut ga[s * m * k..],
                            1.0,
                        );
                    }
                });
                acc!(*b, |gb| {
                    for s in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av[s * m * k..],
                            true,
                            &g[s * m * n..],
                            false,
                            &mut gb[s * k * n..],
                            1.0,
                        );
                    }
                });
            }
            Op::Reshape(x) => {
                acc!(*x, |gx| { add_into(gx, g) });
            }
            Op::Transpose(x) => {
                let s = shp(*x);
                let r = s.len();
                // g is laid out with the last two axes of x swapped
                let (m, n) = (s[r - 1], s[r - 2]);
                let mut tg = vec![0.0; g.len()];
                transpose_blocks(g, &mut tg, m, n);
                acc!(*x, |gx| { add_into(gx, &tg) });
            }
            Op::Softmax(x) => {
                let y = nodes[i].value.data();
                let n = *shp(*x).last().unwrap();
                acc!(*x, |gx| {
                    for ((gr, yr), out) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma);
                let n = gam.len();
                acc!(*x, |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            gx[r * n + j] += is * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                acc!(*gamma, |gg| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc!(*beta, |gb| {
                    for gr in g.chunks_exact(n) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Activation(x, act) => {
                let xv = val(*x);
                acc!(*x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * act.derivative(*xi);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = shp(v)[*axis];
                    acc!(v, |gv| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            add_into(&mut gv[o * ext * inner..(o + 1) * ext * inner], src);
                        }
                    });
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, extent, inner) = split_axis(shp(*x), *axis);
                let len = nodes[i].value.shape()[*axis];
                acc!(*x, |gx| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        add_into(&mut gx[dst..dst + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc!(*x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g[0] / n;
                    }
                });
            }
            Op::Sum(x) => {
                acc!(*x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let (bs, fin, t) = signal_dims(shp(*x)).unwrap();
                let (fout, k) = (shp(*w)[0], shp(*w)[2]);
                let pad = (k - 1) / 2;
                let (xd, wd) = (val(*x), val(*w));
                acc!(*x, |gx| {
                    for bi in 0..bs {
                        for o in 0..fout {
                            let grow = &g[(bi * fout + o) * t..(bi * fout + o + 1) * t];
                            for ci in 0..fin {
                                let xrow = &mut gx[(bi * fin + ci) * t..(bi * fin + ci + 1) * t];
                                for j in 0..k {
                                    let wv = wd[(o * fin + ci) * k + j];
                                    let lo = pad.saturating_sub(j);
                                    let hi = (t + pad).saturating_sub(j).min(t);
                                    for s in lo..hi {
                                        xrow[s + j - pad] += wv * grow[s];
                                    }
                                }
                            }
                        }
                    }
                });
                acc!(*w, |gw| {
                    for bi in 0..bs {
                        for o in 0..fout {
                            let grow = &g[(bi * fout + o) * t..(bi * fout + o + 1) * t];
                            for ci in 0..fin {
                                let xrow = &xd[(bi * fin + ci) * t..(bi * fin + ci + 1) * t];
                                for j in 0..k {
                                    let lo = pad.saturating_sub(j);
                                    let hi = (t + pad).saturating_sub(j).min(t);
                                    let mut s_acc = 0.0;
                                    for s in lo..hi {
                                        s_acc += grow[s] * xrow[s + j - pad];
                                    }
                                    gw[(o * fin + ci) * k + j] += s_acc;
                                }
                            }
                        }
                    }
                });
                acc!(*b, |gb| {
                    for (r, row) in g.chunks_exact(t).enumerate() {
                        gb[r % fout] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Pointwise { x, w, b } => {
                let (bs, fin, t) = signal_dims(shp(*x)).unwrap();
                let fout = shp(*w)[0];
                let (xd, wd) = (val(*x), val(*w));
                acc!(*x, |gx| {
                    for bi in 0..bs {
                        gemm(
                            fin,
                            fout,
                            t,
                            wd,
                            true,
                            &g[bi * fout * t..],
                            false,
                            &mut gx[bi * fin * t..],
                            1.0,
                        );
                    }
                });
                acc!(*w, |gw| {
                    for bi in 0..bs {
                        gemm(fout, t, fin, &g[bi * fout * t..], false, &xd[bi * fin * t..], true, gw, 1.0);
                    }
                });
                acc!(*b, |gb| {
                    for (r, row) in g.chunks_exact(t).enumerate() {
                        gb[r % fout] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Standardize {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (_, t, c) = signal_dims(shp(*x)).unwrap();
                let (xd, gam) = (val(*x), val(*gamma));
                let sc = |idx: usize| (idx / (t * c)) * c + idx % c;
                acc!(*x, |gx| {
                    for (idx, o) in gx.iter_mut().enumerate() {
                        *o += g[idx] * gam[idx % c] / stats.scale[sc(idx)];
                    }
                });
                acc!(*gamma, |gg| {
                    for (idx, gi) in g.iter().enumerate() {
                        let s = sc(idx);
                        gg[idx % c] += gi * (xd[idx] - stats.center[s]) / stats.scale[s];
                    }
                });
                acc!(*beta, |gb| {
                    for (idx, gi) in g.iter().enumerate() {
                        gb[idx % c] += gi;
                    }
                });
            }
            Op::Destandardize {
                x,
                gamma,
                beta,
                stats,
                eps,
            } => {
                let (_, t, c) = signal_dims(shp(*x)).unwrap();
                let (xd, gam, bet) = (val(*x), val(*gamma), val(*beta));
                let sc = |idx: usize| (idx / (t * c)) * c + idx % c;
                acc!(*x, |gx| {
                    for (idx, o) in gx.iter_mut().enumerate() {
                        *o += g[idx] * stats.scale[sc(idx)] / guard_gamma(gam[idx % c], *eps);
                    }
                });
                acc!(*gamma, |gg| {
                    for (idx, gi) in g.iter().enumerate() {
                        let col = idx % c;
                        if gam[col].abs() >= *eps {
                            gg[col] -= gi * (xd[idx] - bet[col]) * stats.scale[sc(idx)] / (gam[col] * gam[col]);
                        }
                    }
                });
                acc!(*beta, |gb| {
                    for (idx, gi) in g.iter().enumerate() {
                        let col = idx % c;
                        gb[col] -= gi * stats.scale[sc(idx)] / guard_gamma(gam[col], *eps);
                    }
                });
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

pub(crate) fn guard_gamma(g: f64, eps: f64) -> f64 {
    if g.abs() >= eps {
        g
    } else if g < 0.0 {
        -eps
    } else {
        eps
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
