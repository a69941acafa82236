//! Tape of executed primitives and the reverse pass over it.
//!
//! A [`Graph`] owns every intermediate value. Primitives are appended in
//! execution order, so the tape is already topologically sorted and the
//! reverse pass is a single backwards sweep. A graph is single-threaded and
//! single-use: after [`Graph::backward`] it refuses further work.

use super::kernels::{self, ConvGeom};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    BiasAdd {
        x: Var,
        b: Var,
        axis: usize,
    },
    MatMul(Var, Var),
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
        groups: usize,
    },
    DepthwiseConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Huber(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    BatchStatNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    WindowPartition {
        x: Var,
        window: usize,
    },
    WindowMerge {
        x: Var,
        window: usize,
        batch: usize,
        h: usize,
        w: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; exact zeros when `v` has no
    /// path to the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// True when some path from the loss reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Graph("graph already consumed by backward".into()))
        } else {
            Ok(())
        }
    }

    // ---- elementwise binary -------------------------------------------------

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.check_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape(), data)?
        } else if vb.numel() == 1 {
            let y = vb.item();
            Tensor::new(va.shape(), va.data().iter().map(|&x| f(x, y)).collect())?
        } else if va.numel() == 1 {
            let x = va.item();
            Tensor::new(vb.shape(), vb.data().iter().map(|&y| f(x, y)).collect())?
        } else {
            return Err(Error::shape(
                name,
                format!(
                    "{:?} vs {:?} (only scalar broadcasting is supported)",
                    va.shape(),
                    vb.shape()
                ),
            ));
        };
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|&e| e * s).collect())?;
        self.push("scalar_mul", value, Op::ScalarMul(x, s), &[x])
    }

    /// Adds `b` (length `shape[axis]`) along `axis`.
    pub fn bias_add(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        self.check_live()?;
        let (vx, vb) = (self.value(x), self.value(b));
        if axis >= vx.shape().len() || vb.numel() != vx.shape()[axis] {
            return Err(Error::shape(
                "bias_add",
                format!("bias {:?} along axis {axis} of {:?}", vb.shape(), vx.shape()),
            ));
        }
        let (outer, n, inner) = strides_split(vx.shape(), axis);
        let mut data = vx.data().to_vec();
        let bias = vb.data();
        for o in 0..outer {
            for (c, &bc) in bias.iter().enumerate().take(n) {
                let base = (o * n + c) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += bc);
            }
        }
        let value = Tensor::new(vx.shape(), data)?;
        self.push("bias_add", value, Op::BiasAdd { x, b, axis }, &[x, b])
    }

    // ---- linear algebra -----------------------------------------------------

    /// `(M,K)·(K,N)` or batched `(B,M,K)·(B,K,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n),
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::matmul(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(&shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `x (..., d_in) · wᵀ + b` with `w` of shape `(d_out, d_in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let d_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != d_in {
            return Err(Error::shape("linear", format!("input {sx:?} with weight {sw:?}")));
        }
        let d_out = sw[0];
        if let Some(b) = b {
            if self.value(b).numel() != d_out {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {d_out} outputs", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).numel() / d_in;
        let mut out = vec![T::zero(); rows * d_out];
        kernels::matmul(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bias).for_each(|(o, &bv)| *o += bv);
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { x, w, b }, &inputs)
    }

    /// NCHW convolution; weight `(C_out, C_in/groups, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        self.check_live()?;
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, c_in, h, wd) = match sx.as_slice() {
            &[n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be NCHW, got {sx:?}"))),
        };
        let (c_out, cg_in, kh, kw) = match sw.as_slice() {
            &[o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(Error::shape("conv2d", format!("weight must be 4-d, got {sw:?}"))),
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || cg_in != c_in / groups {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, groups {groups}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).numel() != c_out {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {c_out} channels", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom::new(c_in, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")))?;
        let cg_out = c_out / groups;
        let out_plane = geom.h_out * geom.w_out;
        let krows = cg_in * kh * kw;
        let mut out = vec![T::zero(); n * c_out * out_plane];
        {
            let dx = self.value(x).data();
            let dw = self.value(w).data();
            let mut cols = if geom.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); krows * out_plane]
            };
            for s in 0..n {
                let img = &dx[s * c_in * h * wd..(s + 1) * c_in * h * wd];
                for g in 0..groups {
                    let colm: &[T] = if geom.is_pointwise() {
                        &img[g * cg_in * out_plane..(g + 1) * cg_in * out_plane]
                    } else {
                        kernels::im2col(img, &geom, g * cg_in, cg_in, &mut cols);
                        &cols
                    };
                    let wg = &dw[g * cg_out * krows..(g + 1) * cg_out * krows];
                    let o0 = (s * c_out + g * cg_out) * out_plane;
                    kernels::matmul(
                        cg_out,
                        krows,
                        out_plane,
                        wg,
                        false,
                        colm,
                        false,
                        &mut out[o0..o0 + cg_out * out_plane],
                        false,
                    );
                }
            }
            if let Some(b) = b {
                let bias = self.value(b).data();
                for s in 0..n {
                    for (c, &bc) in bias.iter().enumerate() {
                        let o0 = (s * c_out + c) * out_plane;
                        out[o0..o0 + out_plane].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c_out, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom, groups }, &inputs)
    }

    /// Per-channel convolution; weight `(C, 1, kh, kw)`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_live()?;
        if stride == 0 {
            return Err(Error::invalid("depthwise_conv2d", "stride must be positive"));
        }
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, c, h, wd) = match sx.as_slice() {
            &[n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("input must be NCHW, got {sx:?}"),
                ))
            }
        };
        let (kh, kw) = match sw.as_slice() {
            &[o, 1, kh, kw] if o == c => (kh, kw),
            _ => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("weight {sw:?} for {c} channels"),
                ))
            }
        };
        if let Some(b) = b {
            if self.value(b).numel() != c {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("bias {:?} for {c} channels", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad).ok_or_else(|| {
            Error::shape(
                "depthwise_conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            )
        })?;
        let out_plane = geom.h_out * geom.w_out;
        let mut out = vec![T::zero(); n * c * out_plane];
        {
            let dx = self.value(x).data();
            let dw = self.value(w).data();
            for s in 0..n {
                depthwise_sample(dx, dw, &geom, s, &mut out);
            }
            if let Some(b) = b {
                let bias = self.value(b).data();
                for s in 0..n {
                    for (ch, &bc) in bias.iter().enumerate() {
                        let o0 = (s * c + ch) * out_plane;
                        out[o0..o0 + out_plane].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, geom.h_out, geom.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "depthwise_conv2d",
            value,
            Op::DepthwiseConv2d { x, w, b, geom },
            &inputs,
        )
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect())?;
        self.push(name, value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |e| e.max(T::zero()), Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |e| T::one() / (T::one() + (-e).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |e| e.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&e| e <= T::zero()) {
            return Err(Error::invalid("log", "input must be strictly positive"));
        }
        self.unary("log", x, |e| e.ln(), Op::Log(x))
    }

    /// Elementwise smooth-L1 with unit threshold.
    pub fn huber(&mut self, x: Var) -> Result<Var> {
        self.unary("huber", x, kernels::huber, Op::Huber(x))
    }

    // ---- normalization ------------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        if axis >= v.shape().len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", v.shape())));
        }
        let (outer, n, inner) = strides_split(v.shape(), axis);
        if n == 0 {
            return Err(Error::shape("softmax", "empty axis"));
        }
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[idx(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        self.push("softmax", value, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes over the last axis, then scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let d = *v.shape().last().unwrap();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} for feature dim {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let src = v.data();
        let rows = src.len() / d;
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(rows);
        let dn = T::from_usize(d).unwrap();
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rs * g[j] + bt[j];
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { x, gamma, beta, rstd },
            &[x, gamma, beta],
        )
    }

    /// Per-channel standardization of an NCHW batch using the batch's own
    /// statistics over (N, H, W). No affine part.
    pub fn batch_stat_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let (n, c, plane) = match v.shape() {
            &[n, c, h, w] => (n, c, h * w),
            s => {
                return Err(Error::shape(
                    "batch_stat_norm",
                    format!("input must be NCHW, got {s:?}"),
                ))
            }
        };
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = Vec::with_capacity(c);
        let count = T::from_usize(n * plane).unwrap();
        for ch in 0..c {
            let chan = |s: usize| &src[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            let mean = (0..n).map(|s| chan(s).iter().copied().sum::<T>()).sum::<T>() / count;
            let var = (0..n)
                .map(|s| chan(s).iter().map(|&e| (e - mean) * (e - mean)).sum::<T>())
                .sum::<T>()
                / count;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for s in 0..n {
                let o0 = (s * c + ch) * plane;
                for (o, &e) in out[o0..o0 + plane].iter_mut().zip(chan(s)) {
                    *o = (e - mean) * rs;
                }
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        self.push("batch_stat_norm", value, Op::BatchStatNorm { x, rstd }, &[x])
    }

    // ---- reductions ---------------------------------------------------------

    fn check_axis(&self, name: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(name, format!("axis {axis} of {:?}", self.shape(x))));
        }
        Ok(())
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_live()?;
        self.check_axis("sum", x, axis)?;
        let value = self.reduce_sum(x, axis, T::one())?;
        self.push("sum", value, Op::Sum { x, axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_live()?;
        self.check_axis("mean", x, axis)?;
        let n = self.shape(x)[axis];
        let value = self.reduce_sum(x, axis, T::one() / T::from_usize(n).unwrap())?;
        self.push("mean", value, Op::Mean { x, axis }, &[x])
    }

    fn reduce_sum(&self, x: Var, axis: usize, scale: T) -> Result<Tensor<T>> {
        let v = self.value(x);
        let (outer, n, inner) = strides_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|e| *e *= scale);
        Tensor::new(&reduced_shape(v.shape(), axis), out)
    }

    /// Sum of every element, as a 1-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_live()?;
        self.check_axis("max", x, axis)?;
        let v = self.value(x);
        let (outer, n, inner) = strides_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for j in 1..n {
                    let idx = (o * n + j) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = src[best];
                argmax[o * inner + i] = best;
            }
        }
        let value = Tensor::new(&reduced_shape(v.shape(), axis), out)?;
        self.push("max", value, Op::Max { x, argmax }, &[x])
    }

    // ---- layout -------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_live()?;
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reorders axes; output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.check_live()?;
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("transpose", format!("permutation {perm:?} of {shape:?}")));
        }
        let mut out = vec![T::zero(); self.value(x).numel()];
        kernels::permute(self.value(x).data(), &shape, perm, &mut out);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(&out_shape, out)?;
        self.push("transpose", value, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_live()?;
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of axis {axis} in {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = strides_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        self.push("slice", value, Op::Slice { x, axis, start }, &[x])
    }

    /// `(B, H, W, C)` → `(B·(H/ws)·(W/ws), ws·ws, C)`, windows in row-major
    /// order, tokens row-major inside each window.
    pub fn window_partition(&mut self, x: Var, window: usize) -> Result<Var> {
        self.check_live()?;
        let shape = self.shape(x).to_vec();
        let (b, h, w, c) = match shape.as_slice() {
            &[b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(Error::shape(
                    "window_partition",
                    format!("input must be (B,H,W,C), got {shape:?}"),
                ))
            }
        };
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "window_partition",
                format!("window {window} does not tile {h}x{w}"),
            ));
        }
        let (nh, nw) = (h / window, w / window);
        let mut out = vec![T::zero(); b * h * w * c];
        kernels::permute(
            self.value(x).data(),
            &[b, nh, window, nw, window, c],
            &WINDOW_PERM,
            &mut out,
        );
        let value = Tensor::new(&[b * nh * nw, window * window, c], out)?;
        self.push("window_partition", value, Op::WindowPartition { x, window }, &[x])
    }

    /// Inverse of [`Graph::window_partition`].
    pub fn window_merge(&mut self, x: Var, window: usize, batch: usize, h: usize, w: usize) -> Result<Var> {
        self.check_live()?;
        let shape = self.shape(x).to_vec();
        if window == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) {
            return Err(Error::shape(
                "window_merge",
                format!("window {window} does not tile {h}x{w}"),
            ));
        }
        let (nh, nw) = (h / window, w / window);
        let c = match shape.as_slice() {
            &[bw, n, c] if bw == batch * nh * nw && n == window * window => c,
            _ => {
                return Err(Error::shape(
                    "window_merge",
                    format!("{shape:?} cannot merge into ({batch},{h},{w},C) with window {window}"),
                ))
            }
        };
        let mut out = vec![T::zero(); batch * h * w * c];
        kernels::permute(
            self.value(x).data(),
            &[batch, nh, nw, window, window, c],
            &kernels::invert_perm(&WINDOW_PERM),
            &mut out,
        );
        let value = Tensor::new(&[batch, h, w, c], out)?;
        self.push("window_merge", value, Op::WindowMerge { x, window, batch, h, w }, &[x])
    }

    // ---- reverse pass -------------------------------------------------------

    /// Propagates d`loss`/d(·) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_live()?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        // Intermediate gradients were consumed above; keep only leaves.
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_broadcast(*a, g, T::one(), grads);
                self.acc_broadcast(*b, g, T::one(), grads);
            }
            Op::Sub(a, b) => {
                self.acc_broadcast(*a, g, T::one(), grads);
                self.acc_broadcast(*b, g, -T::one(), grads);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                for (this, other) in [(*a, vb), (*b, va)] {
                    if !self.rg(this) {
                        continue;
                    }
                    let prod: Vec<T> = if other.numel() == 1 {
                        g.iter().map(|&e| e * other.item()).collect()
                    } else {
                        g.iter().zip(other.data()).map(|(&e, &o)| e * o).collect()
                    };
                    self.acc_broadcast(this, &prod, T::one(), grads);
                }
            }
            Op::ScalarMul(x, s) => {
                if self.rg(*x) {
                    let dst = slot(grads, *x, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &e)| *d += e * *s);
                }
            }
            Op::BiasAdd { x, b, axis } => {
                if self.rg(*x) {
                    let dst = slot(grads, *x, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &e)| *d += e);
                }
                if self.rg(*b) {
                    let (outer, n, inner) = strides_split(node.value.shape(), *axis);
                    let dst = slot(grads, *b, n);
                    for o in 0..outer {
                        for (c, d) in dst.iter_mut().enumerate() {
                            let base = (o * n + c) * inner;
                            *d += g[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k) = if sa.len() == 2 {
                    (1, sa[0], sa[1])
                } else {
                    (sa[0], sa[1], sa[2])
                };
                let n = *sb.last().unwrap();
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let dst = slot(grads, *a, batch * m * k);
                    for bi in 0..batch {
                        kernels::matmul(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &db[bi * k * n..(bi + 1) * k * n],
                            true,
                            &mut dst[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.rg(*b) {
                    let dst = slot(grads, *b, batch * k * n);
                    for bi in 0..batch {
                        kernels::matmul(
                            k,
                            m,
                            n,
                            &da[bi * m * k..(bi + 1) * m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut dst[bi * k * n..(bi + 1) * k * n],
                            true,
                        );
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (d_out, d_in) = (sw[0], sw[1]);
                let rows = g.len() / d_out;
                if self.rg(*x) {
                    let dst = slot(grads, *x, rows * d_in);
                    kernels::matmul(rows, d_out, d_in, g, false, self.value(*w).data(), false, dst, true);
                }
                if self.rg(*w) {
                    let dst = slot(grads, *w, d_out * d_in);
                    kernels::matmul(d_out, rows, d_in, g, true, self.value(*x).data(), false, dst, true);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let dst = slot(grads, *b, d_out);
                        for row in g.chunks(d_out) {
                            dst.iter_mut().zip(row).for_each(|(d, &e)| *d += e);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, groups } => {
                self.conv_backward(*x, *w, *b, geom, *groups, g, grads);
            }
            Op::DepthwiseConv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let c = geom.c_in;
                let (in_len, out_len) = (c * geom.h * geom.w, c * geom.h_out * geom.w_out);
                let dx_all = self.value(*x).data();
                let wdata = self.value(*w).data();
                let mut dx = self
                    .rg(*x)
                    .then(|| grads[x.0].take().unwrap_or_else(|| vec![T::zero(); n * in_len]));
                let mut dw = self
                    .rg(*w)
                    .then(|| grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wdata.len()]));
                for s in 0..n {
                    kernels::depthwise_backward(
                        &dx_all[s * in_len..(s + 1) * in_len],
                        wdata,
                        geom,
                        &g[s * out_len..(s + 1) * out_len],
                        dx.as_deref_mut().map(|d| &mut d[s * in_len..(s + 1) * in_len]),
                        dw.as_deref_mut(),
                    );
                }
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
                if let Some(b) = b {
                    self.channel_bias_grad(*b, n, c, geom.h_out * geom.w_out, g, grads);
                }
            }
            Op::Relu(x) => self.acc_map(
                *x,
                g,
                self.value(*x).data(),
                |e, v| if v > T::zero() { e } else { T::zero() },
                grads,
            ),
            Op::Gelu(x) => self.acc_map(*x, g, self.value(*x).data(), |e, v| e * kernels::gelu_grad(v), grads),
            Op::Sigmoid(x) => self.acc_map(*x, g, out, |e, y| e * y * (T::one() - y), grads),
            Op::Exp(x) => self.acc_map(*x, g, out, |e, y| e * y, grads),
            Op::Log(x) => self.acc_map(*x, g, self.value(*x).data(), |e, v| e / v, grads),
            Op::Huber(x) => self.acc_map(*x, g, self.value(*x).data(), |e, v| e * kernels::huber_grad(v), grads),
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let (outer, n, inner) = strides_split(node.value.shape(), *axis);
                    let dst = slot(grads, *x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: T = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..n {
                                dst[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                let rows = g.len() / d;
                let dn = T::from_usize(d).unwrap();
                let src = self.value(*x).data();
                let mut xhat = vec![T::zero(); d];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx_rows = if self.rg(*x) {
                    Some(vec![T::zero(); g.len()])
                } else {
                    None
                };
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() / dn;
                    let rs = rstd[r];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rs;
                    }
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    if let Some(dx) = dx_rows.as_mut() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let gx = gr[j] * gam[j];
                            s1 += gx;
                            s2 += gx * xhat[j];
                        }
                        for j in 0..d {
                            let gx = gr[j] * gam[j];
                            dx[r * d + j] = rs * (gx - s1 / dn - xhat[j] * s2 / dn);
                        }
                    }
                }
                if let Some(dx) = dx_rows {
                    let dst = slot(grads, *x, g.len());
                    dst.iter_mut().zip(dx).for_each(|(d, e)| *d += e);
                }
                if self.rg(*gamma) {
                    let dst = slot(grads, *gamma, d);
                    dst.iter_mut().zip(dgamma).for_each(|(d, e)| *d += e);
                }
                if self.rg(*beta) {
                    let dst = slot(grads, *beta, d);
                    dst.iter_mut().zip(dbeta).for_each(|(d, e)| *d += e);
                }
            }
            Op::BatchStatNorm { x, rstd } => {
                if self.rg(*x) {
                    let (n, c, plane) = match node.value.shape() {
                        &[n, c, h, w] => (n, c, h * w),
                        _ => unreachable!(),
                    };
                    let count = T::from_usize(n * plane).unwrap();
                    let dst = slot(grads, *x, g.len());
                    for ch in 0..c {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for s in 0..n {
                            let o0 = (s * c + ch) * plane;
                            for k in o0..o0 + plane {
                                s1 += g[k];
                                s2 += g[k] * out[k];
                            }
                        }
                        let rs = rstd[ch];
                        for s in 0..n {
                            let o0 = (s * c + ch) * plane;
                            for k in o0..o0 + plane {
                                dst[k] += rs * (g[k] - s1 / count - out[k] * s2 / count);
                            }
                        }
                    }
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                if self.rg(*x) {
                    let shape = self.shape(*x);
                    let (outer, n, inner) = strides_split(shape, *axis);
                    let scale = if matches!(node.op, Op::Mean { .. }) {
                        T::one() / T::from_usize(n).unwrap()
                    } else {
                        T::one()
                    };
                    let dst = slot(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for k in 0..inner {
                                dst[base + k] += g[o * inner + k] * scale;
                            }
                        }
                    }
                }
            }
            Op::Max { x, argmax, .. } => {
                if self.rg(*x) {
                    let len = self.value(*x).numel();
                    let dst = slot(grads, *x, len);
                    for (k, &src) in argmax.iter().enumerate() {
                        dst[src] += g[k];
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    let dst = slot(grads, *x, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, &e)| *d += e);
                }
            }
            Op::Permute { x, perm } => {
                if self.rg(*x) {
                    let inv = kernels::invert_perm(perm);
                    let mut tmp = vec![T::zero(); g.len()];
                    kernels::permute(g, node.value.shape(), &inv, &mut tmp);
                    let dst = slot(grads, *x, g.len());
                    dst.iter_mut().zip(tmp).for_each(|(d, e)| *d += e);
                }
            }
            Op::Slice { x, axis, start } => {
                if self.rg(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (outer, n, inner) = strides_split(&shape, *axis);
                    let len = node.value.shape()[*axis];
                    let dst = slot(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &e)| *d += e);
                    }
                }
            }
            Op::WindowPartition { x, window } => {
                if self.rg(*x) {
                    let s = self.shape(*x);
                    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                    let (nh, nw) = (h / window, w / window);
                    let mut tmp = vec![T::zero(); g.len()];
                    kernels::permute(
                        g,
                        &[b, nh, nw, *window, *window, c],
                        &kernels::invert_perm(&WINDOW_PERM),
                        &mut tmp,
                    );
                    let dst = slot(grads, *x, g.len());
                    dst.iter_mut().zip(tmp).for_each(|(d, e)| *d += e);
                }
            }
            Op::WindowMerge { x, window, batch, h, w } => {
                if self.rg(*x) {
                    let c = *node.value.shape().last().unwrap();
                    let (nh, nw) = (h / window, w / window);
                    let mut tmp = vec![T::zero(); g.len()];
                    kernels::permute(g, &[*batch, nh, *window, nw, *window, c], &WINDOW_PERM, &mut tmp);
                    let dst = slot(grads, *x, g.len());
                    dst.iter_mut().zip(tmp).for_each(|(d, e)| *d += e);
                }
            }
        }
        Ok(())
    }

    /// Accumulates `scale·g` into `v`, summing when `v` was scalar-broadcast.
    fn acc_broadcast(&self, v: Var, g: &[T], scale: T, grads: &mut [Option<Vec<T>>]) {
        if !self.rg(v) {
            return;
        }
        let len = self.value(v).numel();
        let dst = slot(grads, v, len);
        if len == g.len() {
            dst.iter_mut().zip(g).for_each(|(d, &e)| *d += e * scale);
        } else {
            dst[0] += g.iter().copied().sum::<T>() * scale;
        }
    }

    /// `grad[x] += f(g, saved)` elementwise, where `saved` is the input or
    /// output value the local derivative needs.
    fn acc_map(&self, x: Var, g: &[T], saved: &[T], f: impl Fn(T, T) -> T, grads: &mut [Option<Vec<T>>]) {
        if !self.rg(x) {
            return;
        }
        let dst = slot(grads, x, g.len());
        for ((d, &e), &v) in dst.iter_mut().zip(g).zip(saved) {
            *d += f(e, v);
        }
    }

    fn channel_bias_grad(&self, b: Var, n: usize, c: usize, plane: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        if !self.rg(b) {
            return;
        }
        let dst = slot(grads, b, c);
        for s in 0..n {
            for (ch, d) in dst.iter_mut().enumerate() {
                let o0 = (s * c + ch) * plane;
                *d += g[o0..o0 + plane].iter().copied().sum::<T>();
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        groups: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let sw = self.shape(w);
        let (c_out, cg_in) = (sw[0], sw[1]);
        let n = self.shape(x)[0];
        let c_in = geom.c_in;
        let cg_out = c_out / groups;
        let out_plane = geom.h_out * geom.w_out;
        let in_len = c_in * geom.h * geom.w;
        let krows = cg_in * geom.kh * geom.kw;
        let xdata = self.value(x).data();
        let wdata = self.value(w).data();
        let need_dx = self.rg(x);
        let need_dw = self.rg(w);
        let mut dx = need_dx.then(|| grads[x.0].take().unwrap_or_else(|| vec![T::zero(); n * in_len]));
        let mut dw = need_dw.then(|| grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wdata.len()]));
        let pointwise = geom.is_pointwise();
        let mut cols = vec![T::zero(); krows * out_plane];
        for s in 0..n {
            let img = &xdata[s * in_len..(s + 1) * in_len];
            for grp in 0..groups {
                let o0 = (s * c_out + grp * cg_out) * out_plane;
                let gout = &g[o0..o0 + cg_out * out_plane];
                if let Some(dw) = dw.as_deref_mut() {
                    let colm: &[T] = if pointwise {
                        &img[grp * cg_in * out_plane..(grp + 1) * cg_in * out_plane]
                    } else {
                        kernels::im2col(img, geom, grp * cg_in, cg_in, &mut cols);
                        &cols
                    };
                    let wg = &mut dw[grp * cg_out * krows..(grp + 1) * cg_out * krows];
                    kernels::matmul(cg_out, out_plane, krows, gout, false, colm, true, wg, true);
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let wg = &wdata[grp * cg_out * krows..(grp + 1) * cg_out * krows];
                    let dimg = &mut dx[s * in_len..(s + 1) * in_len];
                    if pointwise {
                        let dst = &mut dimg[grp * cg_in * out_plane..(grp + 1) * cg_in * out_plane];
                        kernels::matmul(krows, cg_out, out_plane, wg, true, gout, false, dst, true);
                    } else {
                        kernels::matmul(krows, cg_out, out_plane, wg, true, gout, false, &mut cols, false);
                        kernels::col2im_add(&cols, geom, grp * cg_in, cg_in, dimg);
                    }
                }
            }
        }
        if let Some(dx) = dx {
            grads[x.0] = Some(dx);
        }
        if let Some(dw) = dw {
            grads[w.0] = Some(dw);
        }
        if let Some(b) = b {
            self.channel_bias_grad(b, n, c_out, out_plane, g, grads);
        }
    }
}

const WINDOW_PERM: [usize; 6] = [0, 1, 3, 2, 4, 5];

fn depthwise_sample<T: Real>(x: &[T], w: &[T], geom: &ConvGeom, s: usize, out: &mut [T]) {
    let in_len = geom.c_in * geom.h * geom.w;
    let out_len = geom.c_in * geom.h_out * geom.w_out;
    kernels::depthwise_forward(
        &x[s * in_len..(s + 1) * in_len],
        w,
        geom,
        &mut out[s * out_len..(s + 1) * out_len],
    );
}
