use super::kernels::{self, ConvGeom};
use super::{axis_extents, Tensor};
use crate::error::{Error, Result};

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Unary {
        kind: Unary,
        a: Var,
    },
    AddScalar {
        a: Var,
    },
    MulScalar {
        a: Var,
        c: f64,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        b_batched: bool,
    },
    Reduce {
        kind: Reduction,
        a: Var,
        axes: Vec<usize>,
        argmax: Vec<usize>,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    AxisAdd {
        a: Var,
        v: Var,
        axis: usize,
    },
    Upsample {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations. Nodes are appended as ops run, so
/// every node sits after all of its producers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sum_of(x: &[f64]) -> f64 {
    x.iter().sum()
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

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf; its gradient is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(Binary::Div, a, b)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        let shape = if sa.shape() == sb.shape() || sb.numel() == 1 {
            sa.shape().to_vec()
        } else if sa.numel() == 1 {
            sb.shape().to_vec()
        } else {
            return Err(Error::shape("elementwise", sa.shape(), sb.shape()));
        };
        let (xa, xb) = (sa.data(), sb.data());
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = match (xa.len() == n, xb.len() == n) {
            (true, true) => xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect(),
            (true, false) => xa.iter().map(|&x| f(x, xb[0])).collect(),
            (false, true) => xb.iter().map(|&y| f(xa[0], y)).collect(),
            (false, false) => vec![f(xa[0], xb[0])],
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Binary { kind, a, b }, rg))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Neg => -v,
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sigmoid => sigmoid(v),
                Unary::Relu => v.max(0.0),
            })
            .collect();
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        let rg = self.rg(a);
        self.push(value, Op::Unary { kind, a }, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.data(a).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {v} is not positive"),
            });
        }
        Ok(self.unary(Unary::Log, a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|v| v + c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::AddScalar { a }, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::MulScalar { a, c }, rg)
    }

    /// `c − a`
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let neg = self.mul_scalar(a, -1.0);
        self.add_scalar(neg, c)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a);
        let value = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let rg = self.rg(a);
        self.push(value, Op::Clamp { a, lo, hi }, rg)
    }

    // ---- linear algebra ---------------------------------------------------

    /// Matrix product. Accepts `[n,k]·[k,m]`, batched `[B,n,k]·[B,k,m]`, and
    /// `[B,n,k]·[k,m]` with the right operand shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::shape("matmul", &sa, &sb);
        let (batch, n, k, m, b_batched, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                (1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]])
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], sb[2], true, vec![sa[0], sa[1], sb[2]])
            }
            (3, 2) => {
                if sa[2] != sb[0] {
                    return Err(mismatch());
                }
                (1, sa[0] * sa[1], sa[2], sb[1], false, vec![sa[0], sa[1], sb[1]])
            }
            _ => return Err(mismatch()),
        };
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * n * m];
        for bi in 0..batch {
            let boff = if b_batched { bi * k * m } else { 0 };
            kernels::gemm_nn(
                &xa[bi * n * k..(bi + 1) * n * k],
                &xb[boff..boff + k * m],
                &mut out[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                b_batched,
            },
            rg,
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn reduce(&mut self, kind: Reduction, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(Error::Axis {
                op: "reduce",
                axis: bad,
                shape,
            });
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect();
        let out_n: usize = out_shape.iter().product();
        let map = kernels::reduce_map(&shape, &axes);
        let x = self.data(a);
        let mut out = vec![0.0; out_n];
        let mut argmax = Vec::new();
        match kind {
            Reduction::Sum | Reduction::Mean => {
                for (i, &o) in map.iter().enumerate() {
                    out[o] += x[i];
                }
                if kind == Reduction::Mean {
                    let count = (x.len() / out_n.max(1)) as f64;
                    out.iter_mut().for_each(|v| *v /= count);
                }
            }
            Reduction::Max => {
                if x.is_empty() {
                    return Err(Error::Degenerate {
                        op: "max",
                        detail: "empty tensor".into(),
                    });
                }
                out.fill(f64::NEG_INFINITY);
                argmax = vec![0; out_n];
                for (i, &o) in map.iter().enumerate() {
                    if x[i] > out[o] {
                        out[o] = x[i];
                        argmax[o] = i;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Reduce {
                kind,
                a,
                axes,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(Reduction::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(Reduction::Mean, a, axes)
    }

    pub fn max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(Reduction::Max, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes).expect("all axes are valid")
    }

    // ---- normalisation ----------------------------------------------------

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(x[base + j * inner]);
                }
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { a, axis }, rg))
    }

    /// Layer normalisation along `axis` with per-position `gain` and `bias`
    /// (both of length `shape[axis]`); biased variance, epsilon 1e-5.
    pub fn layernorm(&mut self, a: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "layernorm",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        if len < 2 {
            return Err(Error::Degenerate {
                op: "layernorm",
                detail: format!("normalised axis has length {len}"),
            });
        }
        for p in [gain, bias] {
            if self.value(p).numel() != len {
                return Err(Error::shape("layernorm", &shape, self.shape(p)));
            }
        }
        let (x, g, b) = (self.data(a), self.data(gain), self.data(bias));
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mean = (0..len).map(|j| x[base + j * inner]).sum::<f64>() / len as f64;
                let var = (0..len)
                    .map(|j| (x[base + j * inner] - mean).powi(2))
                    .sum::<f64>()
                    / len as f64;
                let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
                inv_std[o * inner + i] = r;
                for j in 0..len {
                    let idx = base + j * inner;
                    let h = (x[idx] - mean) * r;
                    xhat[idx] = h;
                    out[idx] = h * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                a,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- convolution and resampling ---------------------------------------

    /// Grouped 2-D convolution of `input[B,C,H,W]` with `kernel[C',C/groups,k,k]`.
    /// Output spatial size is `(H + 2·padding − k)/stride + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        let mismatch = || Error::shape("conv2d", &si, &sk);
        if si.len() != 4 || sk.len() != 4 || sk[2] != sk[3] || sk[2] % 2 == 0 {
            return Err(mismatch());
        }
        if stride == 0 || groups == 0 || si[1] % groups != 0 || sk[0] % groups != 0 {
            return Err(mismatch());
        }
        if sk[1] != si[1] / groups {
            return Err(mismatch());
        }
        let ksize = sk[2];
        if si[2] + 2 * padding < ksize || si[3] + 2 * padding < ksize {
            return Err(mismatch());
        }
        if let Some(b) = bias {
            if self.value(b).numel() != sk[0] {
                return Err(Error::shape("conv2d bias", &sk, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch: si[0],
            in_ch: si[1],
            out_ch: sk[0],
            groups,
            in_h: si[2],
            in_w: si[3],
            out_h: (si[2] + 2 * padding - ksize) / stride + 1,
            out_w: (si[3] + 2 * padding - ksize) / stride + 1,
            ksize,
            stride,
            padding,
        };
        let plane = geom.out_h * geom.out_w;
        let mut out = vec![0.0; geom.batch * geom.out_ch * plane];
        if let Some(b) = bias {
            let bv = self.data(b);
            for (idx, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(bv[idx % geom.out_ch]);
            }
        }
        kernels::conv2d_forward(&geom, self.data(input), self.data(kernel), &mut out);
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor {
                shape: vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w],
                data: out,
            },
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Bilinear resize of the last two axes to `out_h × out_w`
    /// (half-pixel centres, align-corners = false).
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || out_h == 0 || out_w == 0 || shape.contains(&0) {
            return Err(Error::shape("upsample", &shape, &[out_h, out_w]));
        }
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let planes: usize = shape[..nd - 2].iter().product();
        let ty = kernels::bilinear_taps(h, out_h);
        let tx = kernels::bilinear_taps(w, out_w);
        let x = self.data(a);
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    dst[oy * out_w + ox] = (1.0 - ly) * ((1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1])
                        + ly * ((1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1]);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[nd - 2] = out_h;
        out_shape[nd - 1] = out_w;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Upsample { a },
            rg,
        ))
    }

    // ---- structural -------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => {
                return Err(Error::Degenerate {
                    op: "concat",
                    detail: "no inputs".into(),
                })
            }
        };
        if axis >= first.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "slice",
                axis,
                shape,
            });
        }
        if start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[start, len]));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let x = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Slice { a, axis, start },
            rg,
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "split",
                axis,
                shape,
            });
        }
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape("split", &shape, sizes));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", &shape, perm));
        }
        let map = kernels::permute_map(&shape, perm);
        let x = self.data(a);
        let data = map.iter().map(|&s| x[s]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Adds vector `v` (length `shape[axis]`) along `axis` of `a`.
    pub fn axis_add(&mut self, a: Var, v: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "axis_add",
                axis,
                shape,
            });
        }
        if self.value(v).numel() != shape[axis] {
            return Err(Error::shape("axis_add", &shape, self.shape(v)));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let (x, vv) = (self.data(a), self.data(v));
        let mut out = x.to_vec();
        for o in 0..outer {
            for (j, &add) in vv.iter().enumerate() {
                let base = (o * len + j) * inner;
                out[base..base + inner].iter_mut().for_each(|e| *e += add);
            }
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Tensor { shape, data: out }, Op::AxisAdd { a, v, axis }, rg))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Back-propagates from a single-element `loss`, accumulating into the
    /// stored gradient of every differentiable node it reaches.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => add_into(acc, &g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Accumulator for the adjoint of `v`, or `None` when `v` needs no gradient.
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::Binary { kind, a, b } => {
                let (xa, xb) = (self.data(a), self.data(b));
                let at = |x: &[f64], j: usize| if x.len() == 1 { x[0] } else { x[j] };
                if let Some(ga) = self.slot(adj, a) {
                    let scalar = ga.len() == 1 && g.len() != 1;
                    for (j, &gj) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gj,
                            Binary::Mul => gj * at(xb, j),
                            Binary::Div => gj / at(xb, j),
                        };
                        ga[if scalar { 0 } else { j }] += d;
                    }
                }
                if let Some(gb) = self.slot(adj, b) {
                    let scalar = gb.len() == 1 && g.len() != 1;
                    for (j, &gj) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gj,
                            Binary::Sub => -gj,
                            Binary::Mul => gj * at(xa, j),
                            Binary::Div => {
                                let bv = at(xb, j);
                                -gj * at(xa, j) / (bv * bv)
                            }
                        };
                        gb[if scalar { 0 } else { j }] += d;
                    }
                }
            }
            &Op::Unary { kind, a } => {
                let x = self.data(a);
                if let Some(ga) = self.slot(adj, a) {
                    for j in 0..g.len() {
                        ga[j] += match kind {
                            Unary::Neg => -g[j],
                            Unary::Exp => g[j] * y[j],
                            Unary::Log => g[j] / x[j],
                            Unary::Sigmoid => g[j] * y[j] * (1.0 - y[j]),
                            Unary::Relu => {
                                if x[j] > 0.0 {
                                    g[j]
                                } else {
                                    0.0
                                }
                            }
                        };
                    }
                }
            }
            &Op::AddScalar { a } => {
                if let Some(ga) = self.slot(adj, a) {
                    add_into(ga, g);
                }
            }
            &Op::MulScalar { a, c } => {
                if let Some(ga) = self.slot(adj, a) {
                    for (d, &gj) in ga.iter_mut().zip(g) {
                        *d += gj * c;
                    }
                }
            }
            &Op::Clamp { a, lo, hi } => {
                let x = self.data(a);
                if let Some(ga) = self.slot(adj, a) {
                    for j in 0..g.len() {
                        if x[j] >= lo && x[j] <= hi {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                b_batched,
            } => {
                let (xa, xb) = (self.data(a), self.data(b));
                if let Some(ga) = self.slot(adj, a) {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * m } else { 0 };
                        kernels::gemm_nt(
                            &g[bi * n * m..(bi + 1) * n * m],
                            &xb[boff..boff + k * m],
                            &mut ga[bi * n * k..(bi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                }
                if let Some(gb) = self.slot(adj, b) {
                    for bi in 0..batch {
                        let boff = if b_batched { bi * k * m } else { 0 };
                        kernels::gemm_tn(
                            &xa[bi * n * k..(bi + 1) * n * k],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut gb[boff..boff + k * m],
                            n,
                            k,
                            m,
                        );
                    }
                }
            }
            Op::Reduce {
                kind,
                a,
                axes,
                argmax,
            } => {
                let shape = self.shape(*a).to_vec();
                if let Some(ga) = self.slot(adj, *a) {
                    match kind {
                        Reduction::Max => {
                            for (o, &src) in argmax.iter().enumerate() {
                                ga[src] += g[o];
                            }
                        }
                        Reduction::Sum | Reduction::Mean => {
                            let scale = if *kind == Reduction::Mean {
                                g.len() as f64 / ga.len() as f64
                            } else {
                                1.0
                            };
                            let map = kernels::reduce_map(&shape, axes);
                            for (j, &o) in map.iter().enumerate() {
                                ga[j] += g[o] * scale;
                            }
                        }
                    }
                }
            }
            &Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(a), axis);
                if let Some(ga) = self.slot(adj, a) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let dot: f64 = (0..len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                ga[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            } => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                let gv = self.data(*gain).to_vec();
                if let Some(ggain) = self.slot(adj, *gain) {
                    for (idx, (&gj, &h)) in g.iter().zip(xhat).enumerate() {
                        ggain[(idx / inner) % len] += gj * h;
                    }
                }
                if let Some(gbias) = self.slot(adj, *bias) {
                    for (idx, &gj) in g.iter().enumerate() {
                        gbias[(idx / inner) % len] += gj;
                    }
                }
                if let Some(ga) = self.slot(adj, *a) {
                    let nf = len as f64;
                    let mut dxhat = vec![0.0; len];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for j in 0..len {
                                let idx = base + j * inner;
                                dxhat[j] = g[idx] * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xhat[idx];
                            }
                            let r = inv_std[o * inner + ii];
                            for j in 0..len {
                                let idx = base + j * inner;
                                ga[idx] += r / nf * (nf * dxhat[j] - s1 - xhat[idx] * s2);
                            }
                        }
                    }
                }
            }
            &Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                if let Some(b) = bias {
                    let plane = geom.out_h * geom.out_w;
                    if let Some(gb) = self.slot(adj, b) {
                        for (idx, chunk) in g.chunks(plane).enumerate() {
                            gb[idx % geom.out_ch] += sum_of(chunk);
                        }
                    }
                }
                let xin = self.data(input);
                let wk = self.data(kernel);
                if let Some(gk) = self.slot(adj, kernel) {
                    kernels::conv2d_backward_kernel(&geom, g, xin, gk);
                }
                if let Some(gi) = self.slot(adj, input) {
                    kernels::conv2d_backward_input(&geom, g, wk, gi);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(&node.value.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if let Some(gv) = self.slot(adj, v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut gv[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let (outer, full, inner) = axis_extents(self.shape(a), axis);
                let len = node.value.shape[axis];
                if let Some(ga) = self.slot(adj, a) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut ga[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.slot(adj, a) {
                    add_into(ga, g);
                }
            }
            Op::Permute { a, perm } => {
                let map = kernels::permute_map(self.shape(*a), perm);
                if let Some(ga) = self.slot(adj, *a) {
                    for (j, &src) in map.iter().enumerate() {
                        ga[src] += g[j];
                    }
                }
            }
            &Op::AxisAdd { a, v, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(a), axis);
                if let Some(ga) = self.slot(adj, a) {
                    add_into(ga, g);
                }
                if let Some(gv) = self.slot(adj, v) {
                    for o in 0..outer {
                        for (j, acc) in gv.iter_mut().enumerate() {
                            let base = (o * len + j) * inner;
                            *acc += sum_of(&g[base..base + inner]);
                        }
                    }
                }
            }
            &Op::Upsample { a } => {
                let shape = self.shape(a);
                let nd = shape.len();
                let (h, w) = (shape[nd - 2], shape[nd - 1]);
                let (oh, ow) = (node.value.shape[nd - 2], node.value.shape[nd - 1]);
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                if let Some(ga) = self.slot(adj, a) {
                    for (p, gp) in g.chunks(oh * ow).enumerate() {
                        let dst = &mut ga[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                                let gv = gp[oy * ow + ox];
                                dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                                dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                                dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                                dst[y1 * w + x1] += gv * ly * lx;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item().unwrap(), 0.5);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn exp_of_one() {
        let mut tape = Tape::new();
        let x = tape.scalar(1.0);
        let y = tape.exp(x);
        assert!(close(tape.value(y).item().unwrap(), std::f64::consts::E, 1e-12));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn elementwise_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        match tape.add(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![3, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full([2, 2], 3.0));
        let s = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(a, s).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(s).unwrap().item().unwrap(), 12.0);
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert!(tape.matmul(a, x).is_err());
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., 2., 3.]));
        let s = tape.sum_all(x);
        assert_eq!(tape.value(s).item().unwrap(), 6.0);
        let half = tape.constant(Tensor::full([4, 5, 2], 0.5));
        let m = tape.mean_all(half);
        assert_eq!(tape.value(m).item().unwrap(), 0.5);
        let mx = tape.max(x, &[0]).unwrap();
        assert_eq!(tape.value(mx).item().unwrap(), 3.0);
        assert!(tape.sum(x, &[1]).is_err());

        let mean = tape.mean_all(x);
        tape.backward(mean).unwrap();
        for g in tape.grad(x).unwrap().data() {
            assert!(close(*g, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_known_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let y = tape.softmax(x, 0).unwrap();
        let want = [0.090031, 0.244728, 0.665241];
        for (v, w) in tape.value(y).data().iter().zip(want) {
            assert!(close(*v, w, 1e-5));
        }
        let z = tape.constant(t(&[3], &[0., 0., 0.]));
        let u = tape.softmax(z, 0).unwrap();
        for v in tape.value(u).data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn layernorm_constant_slice_and_degenerate_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[5., 5., 5., 5.]));
        let g = tape.constant(Tensor::full([4], 1.0));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layernorm(x, g, b, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let single = tape.constant(t(&[3, 1], &[1., 2., 3.]));
        let g1 = tape.constant(Tensor::full([1], 1.0));
        let b1 = tape.constant(Tensor::zeros([1]));
        assert!(matches!(
            tape.layernorm(single, g1, b1, 1),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn conv_identity_and_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 1, 5, 5], |i| i as f64));
        let k = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
        let y = tape.conv2d(x, k, None, 1, 0, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let ones = tape.constant(Tensor::full([1, 1, 5, 5], 1.0));
        let k3 = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let z = tape.conv2d(ones, k3, None, 1, 1, 1).unwrap();
        assert_eq!(tape.shape(z), &[1, 1, 5, 5]);
        assert_eq!(tape.value(z).data()[12], 9.0);
        assert_eq!(tape.value(z).data()[0], 4.0);

        let strided = tape.conv2d(ones, k3, None, 2, 1, 1).unwrap();
        assert_eq!(tape.shape(strided), &[1, 1, 3, 3]);

        let bad = tape.constant(Tensor::zeros([2, 3, 3, 3]));
        assert!(tape.conv2d(ones, bad, None, 1, 1, 1).is_err());
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([2, 3], |i| i as f64 * 0.1));
        let b = tape.constant(Tensor::from_fn([1, 3], |i| -(i as f64)));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[3, 3]);
        let parts = tape.split(c, &[2, 1], 0).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
        assert!(tape.split(c, &[2, 2], 0).is_err());
        let wrong = tape.constant(Tensor::zeros([1, 2]));
        assert!(tape.concat(&[a, wrong], 0).is_err());
    }

    #[test]
    fn backward_simple_losses() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., -2., 0.5]));
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 3]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., -2., 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);

        // a second pass accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -8.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let mut empty = Tape::new();
        assert!(empty.backward(Var(0)).is_err());
    }

    #[test]
    fn axis_add_per_row() {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::zeros([2, 2, 2]));
        let v = tape.param(t(&[2], &[1.0, -1.0]));
        let y = tape.axis_add(m, v, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 1., 1., 1., -1., -1., -1., -1.]);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 2.5));
        let y = tape.upsample_bilinear(x, 12, 12).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| close(v, 2.5, 1e-12)));
    }
}
