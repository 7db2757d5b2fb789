//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value. Nodes are appended in
//! evaluation order, so the node vector is already topologically sorted and
//! [`Graph::backward`] only needs a single reverse sweep.

use std::collections::HashMap;

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{col2im, gemm, im2col, ConvGeom, Mat};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_perm, inverse_perm, numel, permute_data, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Gelu,
    Relu,
    /// `x * sigmoid(x)`
    Silu,
    Neg,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        axis: usize,
        pad: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample2x(Var),
    Roll {
        x: Var,
        axis: usize,
        shift: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward evaluation.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<(u64, usize), Var>,
    macs: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_fwd(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        Unary::Relu => x.max(0.0),
        Unary::Silu => x * sigmoid(x),
        Unary::Neg => -x,
        Unary::Sqrt => x.sqrt(),
    }
}

/// Derivative given input `x` and output `y`.
fn unary_deriv(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Gelu => {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Unary::Neg => -1.0,
        Unary::Sqrt => 0.5 / y,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            macs: 0,
        }
    }

    /// A graph that never records backward information.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Multiply-accumulates performed by the forward products recorded so far
    /// (matmul, bmm, linear, conv2d, conv1d).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let value = Tensor::from_parts(shape, data).with_requires_grad(requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it participates in differentiation iff the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad() && self.grad_enabled;
        let t = t.with_requires_grad(rg);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Leaf for a stored parameter; repeated calls within one graph share the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id);
        let leaf = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec())
            .with_requires_grad(store.is_trainable(id));
        let v = self.leaf(leaf);
        self.params.insert(key, v);
        v
    }

    /// Gradients of parameter leaves of `store` after [`Graph::backward`].
    pub fn param_grads<'a>(&'a self, store: &'a ParamStore) -> impl Iterator<Item = (ParamId, &'a [f64])> + 'a {
        let uid = store.uid();
        self.params.iter().filter_map(move |(&(s, idx), &v)| {
            if s != uid {
                return None;
            }
            self.grad(v).map(|g| (ParamId::from_index(idx), g))
        })
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v);
        let t = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.constant(t)
    }

    // ---------------------------------------------------------------- elementwise

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| unary_fwd(kind, a)).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(shape, data, Op::Unary(kind, x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = av.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| a + c).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(shape, data, Op::AddConst(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| a * c).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        self.push(shape, data, Op::MulConst(x, c), rg)
    }

    /// `s * x` where `s` is a single-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(invalid("scale_by", sv.shape(), "scale must have one element"));
        }
        let k = sv.data()[0];
        let xv = self.value(x);
        let data = xv.data().iter().map(|&a| a * k).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(shape, data, Op::ScaleBy(x, s), rg))
    }

    // ---------------------------------------------------------------- products

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(1.0, av.data(), Mat::rm(m, k), bv.data(), Mat::rm(k, n), 0.0, &mut out, Mat::rm(m, n));
        self.macs += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched matmul `[..., m, k] x [..., k, n]` with identical leading dims.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                1.0,
                &av.data()[i * m * k..(i + 1) * m * k],
                Mat::rm(m, k),
                &bv.data()[i * k * n..(i + 1) * k * n],
                Mat::rm(k, n),
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
                Mat::rm(m, n),
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.macs += (batch * m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Bmm(a, b), rg))
    }

    /// `x[..., k] · w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let k = *xv.shape().last().ok_or_else(|| invalid("linear", xv.shape(), "rank 0 input"))?;
        if wv.rank() != 2 || wv.shape()[0] != k {
            return Err(mismatch("linear", xv.shape(), wv.shape()));
        }
        let n = wv.shape()[1];
        let rows = xv.numel() / k.max(1);
        let mut out = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [n] {
                return Err(mismatch("linear bias", wv.shape(), bv.shape()));
            }
            for r in 0..rows {
                out[r * n..(r + 1) * n].copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(1.0, xv.data(), Mat::rm(rows, k), wv.data(), Mat::rm(k, n), beta, &mut out, Mat::rm(rows, n));
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.macs += (rows * k * n) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, out, Op::Linear { x, w, b }, rg))
    }

    /// Channels-last 2D convolution: `x[B,H,W,Cin]`, `w[kh,kw,Cin,Cout]`, `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != xs[3] {
            return Err(mismatch("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(invalid("conv2d", xs, "stride must be positive"));
        }
        let (bsz, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", xs, ws));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [cout] {
                    return Err(mismatch("conv2d bias", ws, bv.shape()));
                }
                Some(bv.data())
            }
            None => None,
        };
        let mut out = vec![0.0; bsz * ho * wo * cout];
        let cw = geom.col_width();
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; ho * wo * cw] };
        let img_len = h * wd * cin;
        let out_len = ho * wo * cout;
        for bi in 0..bsz {
            let img = &xv.data()[bi * img_len..(bi + 1) * img_len];
            let dst = &mut out[bi * out_len..(bi + 1) * out_len];
            if let Some(bias) = bias {
                for r in 0..ho * wo {
                    dst[r * cout..(r + 1) * cout].copy_from_slice(bias);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            let src: &[f64] = if pointwise {
                img
            } else {
                im2col(img, &geom, &mut cols);
                &cols
            };
            gemm(1.0, src, Mat::rm(ho * wo, cw), wv.data(), Mat::rm(cw, cout), beta, dst, Mat::rm(ho * wo, cout));
        }
        self.macs += (bsz * ho * wo * cw * cout) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![bsz, ho, wo, cout], out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// 1D convolution along `axis` of a channels-last tensor with zero padding `pad`
    /// on both ends. `w` has shape `[k, Cin, Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, axis: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        let r = xs.len();
        if r < 2 || axis >= r - 1 || ws.len() != 3 || ws[1] != xs[r - 1] {
            return Err(mismatch("conv1d", xs, ws));
        }
        let (k, cin, cout) = (ws[0], ws[1], ws[2]);
        let len = xs[axis];
        if len + 2 * pad < k {
            return Err(mismatch("conv1d", xs, ws));
        }
        let lo = len + 2 * pad - k + 1;
        let outer: usize = xs[..axis].iter().product();
        let mid: usize = xs[axis + 1..r - 1].iter().product();
        let cols = conv1d_cols(xv.data(), outer, len, mid, cin, k, pad, lo);
        let rows = outer * lo * mid;
        let mut out = vec![0.0; rows * cout];
        let beta = if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(mismatch("conv1d bias", ws, bv.shape()));
            }
            for rr in 0..rows {
                out[rr * cout..(rr + 1) * cout].copy_from_slice(bv.data());
            }
            1.0
        } else {
            0.0
        };
        gemm(1.0, &cols, Mat::rm(rows, k * cin), wv.data(), Mat::rm(k * cin, cout), beta, &mut out, Mat::rm(rows, cout));
        let mut shape = xs.to_vec();
        shape[axis] = lo;
        shape[r - 1] = cout;
        self.macs += (rows * k * cin * cout) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, out, Op::Conv1d { x, w, b, axis, pad }, rg))
    }

    // ---------------------------------------------------------------- normalisation

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(invalid("softmax", xv.shape(), format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mx = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// `x - logsumexp(x)` along `axis`; stable for very confident logits.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(invalid("log_softmax", xv.shape(), format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mx = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|l| (src[at(l)] - mx).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[at(l)] = src[at(l)] - lse;
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::LogSoftmax { x, axis }, rg))
    }

    /// Normalises over the last axis, then applies optional per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| invalid("layer_norm", xv.shape(), "rank 0 input"))?;
        self.check_affine("layer_norm", c, gamma, beta)?;
        let rows = xv.numel() / c.max(1);
        let src = xv.data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * rs;
            }
        }
        let out = self.apply_affine(&xhat, c, gamma, beta);
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Group normalisation of `x[N, ..., C]`: statistics per sample (axis 0) and
    /// channel group, pooled over all middle axes.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(invalid("group_norm", &shape, "needs rank >= 2"));
        }
        let c = shape[shape.len() - 1];
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Groups { channels: c, groups });
        }
        self.check_affine("group_norm", c, gamma, beta)?;
        let n = shape[0];
        let s: usize = shape[1..shape.len() - 1].iter().product();
        let cg = c / groups;
        let src = xv.data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; n * groups];
        let count = (s * cg) as f64;
        for ni in 0..n {
            for gi in 0..groups {
                let mut sum = 0.0;
                for si in 0..s {
                    let base = (ni * s + si) * c + gi * cg;
                    sum += src[base..base + cg].iter().sum::<f64>();
                }
                let mean = sum / count;
                let mut var = 0.0;
                for si in 0..s {
                    let base = (ni * s + si) * c + gi * cg;
                    var += src[base..base + cg].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let rs = 1.0 / (var / count + eps).sqrt();
                rstd[ni * groups + gi] = rs;
                for si in 0..s {
                    let base = (ni * s + si) * c + gi * cg;
                    for j in 0..cg {
                        xhat[base + j] = (src[base + j] - mean) * rs;
                    }
                }
            }
        }
        let out = self.apply_affine(&xhat, c, gamma, beta);
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            shape,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Option<Var>, beta: Option<Var>) -> Result<()> {
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(mismatch(op, &[c], self.shape(p)));
            }
        }
        Ok(())
    }

    fn apply_affine(&self, xhat: &[f64], c: usize, gamma: Option<Var>, beta: Option<Var>) -> Vec<f64> {
        let g = gamma.map(|g| self.value(g).data());
        let b = beta.map(|b| self.value(b).data());
        xhat.iter()
            .enumerate()
            .map(|(i, &v)| {
                let j = i % c;
                let v = g.map_or(v, |g| v * g[j]);
                b.map_or(v, |b| v + b[j])
            })
            .collect()
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() {
            return Err(invalid("reshape", xv.shape(), format!("cannot reshape into {shape:?}")));
        }
        let data = xv.data().to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        check_perm(xv.shape(), perm)?;
        let (shape, data) = permute_data(xv.shape(), xv.data(), perm);
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| invalid("concat", &[], "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", &base, format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(shape, out, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid("slice", s, format!("range {start}..{} on axis {axis}", start + len)));
        }
        let (outer, full, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * full + start) * inner;
            out.extend_from_slice(&xv.data()[b..b + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Slice { x, axis, start }, rg))
    }

    /// Nearest-neighbour 2x upsampling of `x[B,H,W,C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(invalid("upsample2x", s, "expected [B,H,W,C]"));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; b * 4 * h * w * c];
        let src = xv.data();
        for bi in 0..b {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let si = ((bi * h + y / 2) * w + xx / 2) * c;
                    let di = ((bi * 2 * h + y) * 2 * w + xx) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![b, 2 * h, 2 * w, c], out, Op::Upsample2x(x), rg))
    }

    /// Cyclic shift along `axis`: `out[i] = x[(i - shift) mod len]`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() {
            return Err(invalid("roll", s, format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(s, axis);
        let shift = shift.rem_euclid(len.max(1) as isize) as usize;
        let out = roll_data(xv.data(), outer, len, inner, shift);
        let shape = s.to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Roll { x, axis, shift }, rg))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() {
            return Err(invalid("sum_axis", s, format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(s, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", self.shape(x), format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, 1.0 / n as f64))
    }

    // ---------------------------------------------------------------- backward

    /// Fills gradients of every leaf that requires grad. Leaf gradients
    /// accumulate across calls; interior gradients are released as the sweep
    /// passes them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.requires_grad() {
            return Ok(());
        }
        let seed = vec![1.0];
        self.nodes[loss.0].value.accumulate_grad(&seed);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[idx].value.take_grad() else {
                continue;
            };
            let contributions = self.node_backward(idx, &gy);
            for (v, g) in contributions {
                if self.rg(v) {
                    self.nodes[v.0].value.accumulate_grad_owned(g);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, gy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xd = self.value(*x).data();
                let g = gy
                    .iter()
                    .zip(xd.iter().zip(y))
                    .map(|(&g, (&xv, &yv))| g * unary_deriv(*kind, xv, yv))
                    .collect();
                out.push((*x, g));
            }
            Op::Add(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.iter().map(|g| -g).collect()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    out.push((*a, gy.iter().zip(bd).map(|(g, v)| g * v).collect()));
                }
                if self.rg(*b) {
                    out.push((*b, gy.iter().zip(ad).map(|(g, v)| g * v).collect()));
                }
            }
            Op::Div(a, b) => {
                let bd = self.value(*b).data();
                if self.rg(*a) {
                    out.push((*a, gy.iter().zip(bd).map(|(g, v)| g / v).collect()));
                }
                if self.rg(*b) {
                    let g = gy
                        .iter()
                        .zip(y.iter().zip(bd))
                        .map(|(g, (yv, bv))| -g * yv / bv)
                        .collect();
                    out.push((*b, g));
                }
            }
            Op::AddConst(x) => out.push((*x, gy.to_vec())),
            Op::MulConst(x, c) => out.push((*x, gy.iter().map(|g| g * c).collect())),
            Op::ScaleBy(x, s) => {
                let k = self.value(*s).data()[0];
                if self.rg(*x) {
                    out.push((*x, gy.iter().map(|g| g * k).collect()));
                }
                if self.rg(*s) {
                    let xd = self.value(*x).data();
                    let d: f64 = gy.iter().zip(xd).map(|(g, v)| g * v).sum();
                    out.push((*s, vec![d]));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(1.0, gy, Mat::rm(m, n), bv.data(), Mat::rm(k, n).t(), 0.0, &mut ga, Mat::rm(m, k));
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(1.0, av.data(), Mat::rm(m, k).t(), gy, Mat::rm(m, n), 0.0, &mut gb, Mat::rm(k, n));
                    out.push((*b, gb));
                }
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let r = av.rank();
                let (m, k, n) = (av.shape()[r - 2], av.shape()[r - 1], bv.shape()[r - 1]);
                let batch: usize = av.shape()[..r - 2].iter().product();
                if self.rg(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            1.0,
                            &gy[i * m * n..(i + 1) * m * n],
                            Mat::rm(m, n),
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            Mat::rm(k, n).t(),
                            0.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            Mat::rm(m, k),
                        );
                    }
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        gemm(
                            1.0,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            Mat::rm(m, k).t(),
                            &gy[i * m * n..(i + 1) * m * n],
                            Mat::rm(m, n),
                            0.0,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            Mat::rm(k, n),
                        );
                    }
                    out.push((*b, gb));
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / k.max(1);
                if self.rg(*x) {
                    let mut gx = vec![0.0; rows * k];
                    gemm(1.0, gy, Mat::rm(rows, n), wv.data(), Mat::rm(k, n).t(), 0.0, &mut gx, Mat::rm(rows, k));
                    out.push((*x, gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(1.0, xv.data(), Mat::rm(rows, k).t(), gy, Mat::rm(rows, n), 0.0, &mut gw, Mat::rm(k, n));
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    out.push((b, column_sums(gy, n)));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let bsz = xv.shape()[0];
                let cout = wv.shape()[3];
                let cw = geom.col_width();
                let npix = geom.ho * geom.wo;
                let img_len = geom.h * geom.w * geom.cin;
                let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1 && geom.pad == 0;
                let need_x = self.rg(*x);
                let need_w = self.rg(*w);
                let mut gx = if need_x { vec![0.0; xv.numel()] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; wv.numel()] } else { Vec::new() };
                let mut cols = vec![0.0; if pointwise { 0 } else { npix * cw }];
                let mut gcols = vec![0.0; if pointwise || !need_x { 0 } else { npix * cw }];
                for bi in 0..bsz {
                    let img = &xv.data()[bi * img_len..(bi + 1) * img_len];
                    let g = &gy[bi * npix * cout..(bi + 1) * npix * cout];
                    if need_w {
                        let src: &[f64] = if pointwise {
                            img
                        } else {
                            im2col(img, geom, &mut cols);
                            &cols
                        };
                        gemm(1.0, src, Mat::rm(npix, cw).t(), g, Mat::rm(npix, cout), 1.0, &mut gw, Mat::rm(cw, cout));
                    }
                    if need_x {
                        if pointwise {
                            let dst = &mut gx[bi * img_len..(bi + 1) * img_len];
                            gemm(1.0, g, Mat::rm(npix, cout), wv.data(), Mat::rm(cw, cout).t(), 0.0, dst, Mat::rm(npix, cw));
                        } else {
                            gemm(
                                1.0,
                                g,
                                Mat::rm(npix, cout),
                                wv.data(),
                                Mat::rm(cw, cout).t(),
                                0.0,
                                &mut gcols,
                                Mat::rm(npix, cw),
                            );
                            col2im(&gcols, geom, &mut gx[bi * img_len..(bi + 1) * img_len]);
                        }
                    }
                }
                if need_x {
                    out.push((*x, gx));
                }
                if need_w {
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    out.push((b, column_sums(gy, cout)));
                }
            }
            Op::Conv1d { x, w, b, axis, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let xs = xv.shape();
                let r = xs.len();
                let (k, cin, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let len = xs[*axis];
                let lo = len + 2 * pad - k + 1;
                let outer: usize = xs[..*axis].iter().product();
                let mid: usize = xs[*axis + 1..r - 1].iter().product();
                let rows = outer * lo * mid;
                if self.rg(*w) {
                    let cols = conv1d_cols(xv.data(), outer, len, mid, cin, k, *pad, lo);
                    let mut gw = vec![0.0; k * cin * cout];
                    gemm(1.0, &cols, Mat::rm(rows, k * cin).t(), gy, Mat::rm(rows, cout), 0.0, &mut gw, Mat::rm(k * cin, cout));
                    out.push((*w, gw));
                }
                if self.rg(*x) {
                    let mut gcols = vec![0.0; rows * k * cin];
                    gemm(1.0, gy, Mat::rm(rows, cout), wv.data(), Mat::rm(k * cin, cout).t(), 0.0, &mut gcols, Mat::rm(rows, k * cin));
                    let mut gx = vec![0.0; xv.numel()];
                    conv1d_uncols(&gcols, &mut gx, outer, len, mid, cin, k, *pad, lo);
                    out.push((*x, gx));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    out.push((b, column_sums(gy, cout)));
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![0.0; gy.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let dot: f64 = (0..len).map(|l| gy[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (gy[at(l)] - dot);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![0.0; gy.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| o * len * inner + l * inner + i;
                        let total: f64 = (0..len).map(|l| gy[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = gy[at(l)] - y[at(l)].exp() * total;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = *node.value.shape().last().unwrap();
                let rows = rstd.len();
                let gd = gamma.map(|g| self.value(g).data());
                if gamma.is_some_and(|g| self.rg(g)) {
                    let gg = (0..c)
                        .map(|j| (0..rows).map(|r| gy[r * c + j] * xhat[r * c + j]).sum())
                        .collect();
                    out.push((gamma.unwrap(), gg));
                }
                if let Some(b) = beta.filter(|b| self.rg(*b)) {
                    out.push((b, column_sums(gy, c)));
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; gy.len()];
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dxhat[j] = gy[r * c + j] * gd.map_or(1.0, |g| g[j]);
                        }
                        let xh = &xhat[r * c..(r + 1) * c];
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[r * c + j] = rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let shape = node.value.shape();
                let c = shape[shape.len() - 1];
                let n = shape[0];
                let s: usize = shape[1..shape.len() - 1].iter().product();
                let cg = c / groups;
                let total = gy.len();
                let gd = gamma.map(|g| self.value(g).data());
                if gamma.is_some_and(|g| self.rg(g)) {
                    let mut gg = vec![0.0; c];
                    for i in 0..total {
                        gg[i % c] += gy[i] * xhat[i];
                    }
                    out.push((gamma.unwrap(), gg));
                }
                if let Some(b) = beta.filter(|b| self.rg(*b)) {
                    out.push((b, column_sums(gy, c)));
                }
                if self.rg(*x) {
                    let mut gx = vec![0.0; total];
                    let count = (s * cg) as f64;
                    for ni in 0..n {
                        for gi in 0..*groups {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for si in 0..s {
                                let base = (ni * s + si) * c + gi * cg;
                                for j in 0..cg {
                                    let d = gy[base + j] * gd.map_or(1.0, |g| g[gi * cg + j]);
                                    m1 += d;
                                    m2 += d * xhat[base + j];
                                }
                            }
                            m1 /= count;
                            m2 /= count;
                            let rs = rstd[ni * groups + gi];
                            for si in 0..s {
                                let base = (ni * s + si) * c + gi * cg;
                                for j in 0..cg {
                                    let d = gy[base + j] * gd.map_or(1.0, |g| g[gi * cg + j]);
                                    gx[base + j] = rs * (d - m1 - xhat[base + j] * m2);
                                }
                            }
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Reshape(x) => out.push((*x, gy.to_vec())),
            Op::Permute(x, perm) => {
                let inv = inverse_perm(perm);
                let (_, g) = permute_data(node.value.shape(), gy, &inv);
                out.push((*x, g));
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut g = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let b = (o * total + offset) * inner;
                            g.extend_from_slice(&gy[b..b + len * inner]);
                        }
                        out.push((v, g));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, full, inner) = split_axis(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut g = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let b = (o * full + start) * inner;
                    g[b..b + len * inner].copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, g));
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut g = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            let di = ((bi * h + yy / 2) * w + xx / 2) * c;
                            let si = ((bi * 2 * h + yy) * 2 * w + xx) * c;
                            for j in 0..c {
                                g[di + j] += gy[si + j];
                            }
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::Roll { x, axis, shift } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let back = (len - shift % len.max(1)) % len.max(1);
                out.push((*x, roll_data(gy, outer, len, inner, back)));
            }
            Op::Sum(x) => out.push((*x, vec![gy[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, vec![gy[0] / n as f64; n]));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        g[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&gy[o * inner..(o + 1) * inner]);
                    }
                }
                out.push((*x, g));
            }
        }
        out
    }
}

fn column_sums(g: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        s[i % n] += v;
    }
    s
}

fn roll_data(src: &[f64], outer: usize, len: usize, inner: usize, shift: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for l in 0..len {
            let dst = (l + shift) % len;
            let s = (o * len + l) * inner;
            let d = (o * len + dst) * inner;
            out[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    out
}

/// Rows `(outer, lo, mid)` of width `k*cin`: the zero-padded taps feeding each output step.
#[allow(clippy::too_many_arguments)]
fn conv1d_cols(x: &[f64], outer: usize, len: usize, mid: usize, cin: usize, k: usize, pad: usize, lo: usize) -> Vec<f64> {
    let width = k * cin;
    let mut cols = vec![0.0; outer * lo * mid * width];
    for o in 0..outer {
        for l in 0..lo {
            for j in 0..k {
                let src_l = (l + j) as isize - pad as isize;
                if src_l < 0 || src_l >= len as isize {
                    continue;
                }
                for m in 0..mid {
                    let row = (o * lo + l) * mid + m;
                    let s = ((o * len + src_l as usize) * mid + m) * cin;
                    cols[row * width + j * cin..row * width + (j + 1) * cin].copy_from_slice(&x[s..s + cin]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn conv1d_uncols(cols: &[f64], gx: &mut [f64], outer: usize, len: usize, mid: usize, cin: usize, k: usize, pad: usize, lo: usize) {
    let width = k * cin;
    for o in 0..outer {
        for l in 0..lo {
            for j in 0..k {
                let src_l = (l + j) as isize - pad as isize;
                if src_l < 0 || src_l >= len as isize {
                    continue;
                }
                for m in 0..mid {
                    let row = (o * lo + l) * mid + m;
                    let s = ((o * len + src_l as usize) * mid + m) * cin;
                    let c = &cols[row * width + j * cin..row * width + (j + 1) * cin];
                    gx[s..s + cin].iter_mut().zip(c).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}
