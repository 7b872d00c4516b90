use super::kernels::{self, ConvGeom, MatRef};
use super::shape::{broadcast_shape, broadcast_strides, for_each_broadcast2, strides};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and grouping of a 3-D convolution; padding is always SAME.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub depthwise: bool,
}

impl ConvSpec {
    pub const DENSE: ConvSpec = ConvSpec {
        stride: [1, 1, 1],
        depthwise: false,
    };
    pub const DEPTHWISE: ConvSpec = ConvSpec {
        stride: [1, 1, 1],
        depthwise: true,
    };

    /// Dense conv with stride 2 over H and W, stride 1 over T.
    pub const DOWN2: ConvSpec = ConvSpec {
        stride: [1, 2, 2],
        depthwise: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Relu,
    Softplus,
}

enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Affine(Var, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        outer: usize,
        c: usize,
        inner: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        depthwise: bool,
    },
    Mean(Var),
    Sum(Var),
    Upsample {
        x: Var,
        planes: usize,
        input: (usize, usize),
        output: (usize, usize),
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Relu, _) => "relu",
            Op::Unary(Unary::Softplus, _) => "softplus",
            Op::Affine(..) => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv { .. } => "conv3d",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, which is a
/// topological order, so backward is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(node))
    }

    /// Adds a leaf; `requires_grad` leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        let v = self.push(value, Op::Leaf, &[])?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let name = Op::<T>::Binary(kind, a, b).name();
        let out_shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n = out_shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let (sa, sb) = (
                broadcast_strides(av.shape(), &out_shape),
                broadcast_strides(bv.shape(), &out_shape),
            );
            let (ad, bd) = (av.data(), bv.data());
            for_each_broadcast2(&out_shape, &sa, &sb, |_, i, j| data.push(f(ad[i], bd[j])));
            data
        };
        self.push(Tensor::new(&out_shape, data)?, Op::Binary(kind, a, b), &[a, b])
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| match kind {
            Unary::Sigmoid => sigmoid(v),
            Unary::Relu => v.max(T::zero()),
            Unary::Softplus => v.max(T::zero()) + (-v.abs()).exp().ln_1p(),
        });
        self.push(out, Op::Unary(kind, x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    /// `scale·x + shift` for scalar constants.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    /// Matrix product of rank-2 or rank-3 operands (a leading batch axis of extent 1,
    /// or a missing one, broadcasts).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` transposes the trailing two axes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("matmul", &sa, &sb);
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(bad());
        }
        let split = |s: &[usize]| {
            if s.len() == 3 {
                (s[0], s[1], s[2])
            } else {
                (1, s[0], s[1])
            }
        };
        let (ba, ra, ca) = split(&sa);
        let (bb, rb, cb) = split(&sb);
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ka != kb || (ba != bb && ba != 1 && bb != 1) {
            return Err(bad());
        }
        let batch = ba.max(bb);
        let mut out = vec![T::zero(); batch * m * n];
        kernels::gemm_acc(
            batch,
            m,
            ka,
            n,
            self.value(a).data(),
            MatRef::dense(ra, ca, ba > 1, ta),
            self.value(b).data(),
            MatRef::dense(rb, cb, bb > 1, tb),
            &mut out,
            MatRef::dense(m, n, true, false),
        );
        let shape = if sa.len() == 3 || sb.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let op = Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k: ka,
            n,
        };
        self.push(Tensor::new(&shape, out)?, op, &[a, b])
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let row = *xv.shape().last().ok_or_else(|| Error::invalid("softmax", "rank-0 input"))?;
        if row == 0 {
            return Err(Error::invalid("softmax", "empty last axis"));
        }
        let out = Tensor::new(xv.shape(), kernels::softmax_rows(xv.data(), row))?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization across `axis`, with per-channel affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("layer_norm", format!("axis {axis} for shape {shape:?}")));
        }
        let c = shape[axis];
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("layer_norm", self.shape(p), &[c]));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (xhat, rstd) = kernels::layer_norm_stats(self.value(x).data(), outer, c, inner, T::of(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xhat.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let ch = (idx / inner) % c;
            *o = xhat[idx] * g[ch] + b[ch];
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            outer,
            c,
            inner,
            xhat,
            rstd,
        };
        self.push(Tensor::new(&shape, out)?, op, &[x, gamma, beta])
    }

    /// 3-D convolution over a `B×C×T×H×W` input with SAME padding.
    ///
    /// `w` is `Cout×Cin×kt×kh×kw` (dense) or `C×1×kt×kh×kw` (depthwise); `b` is `[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::shape("conv3d", &xs, &ws));
        }
        let kernel = [ws[2], ws[3], ws[4]];
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid("conv3d", format!("even kernel extent {kernel:?}")));
        }
        if spec.stride.iter().any(|&s| s == 0) {
            return Err(Error::invalid("conv3d", "zero stride"));
        }
        let (cin, cout) = (xs[1], ws[0]);
        let channels_ok = if spec.depthwise {
            ws[1] == 1 && cout == cin
        } else {
            ws[1] == cin
        };
        if !channels_ok {
            return Err(Error::shape("conv3d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv3d", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom::new(xs[0], cin, cout, [xs[2], xs[3], xs[4]], kernel, spec.stride);
        let bias = b.map(|b| self.value(b).data());
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let out = if spec.depthwise {
            kernels::conv_depthwise_forward(&geom, xd, wd, bias)
        } else {
            kernels::conv_dense_forward(&geom, xd, wd, bias)
        };
        let shape = [xs[0], cout, geom.output[0], geom.output[1], geom.output[2]];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let op = Op::Conv {
            x,
            w,
            b,
            geom,
            depthwise: spec.depthwise,
        };
        self.push(Tensor::new(&shape, out)?, op, &inputs)
    }

    /// 2-D convolution over `N×C×H×W` with SAME padding; `w` is `Cout×Cin×kh×kw`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let x5 = self.reshape(x, &[xs[0], xs[1], 1, xs[2], xs[3]])?;
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let spec = ConvSpec {
            stride: [1, stride, stride],
            depthwise: false,
        };
        let y = self.conv3d(x5, w5, b, spec)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1], ys[3], ys[4]])
    }

    /// Mean over `axes`, keeping them as extent-1 axes.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut out_shape = xs.clone();
        for &a in axes {
            if a >= xs.len() {
                return Err(Error::invalid("mean", format!("axis {a} for shape {xs:?}")));
            }
            out_shape[a] = 1;
        }
        let count: usize = axes.iter().map(|&a| xs[a]).product();
        if count == 0 {
            return Err(Error::invalid("mean", "empty reduction"));
        }
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let so = broadcast_strides(&out_shape, &xs);
        let xd = self.value(x).data();
        let zero = vec![0; xs.len()];
        for_each_broadcast2(&xs, &zero, &so, |i, _, o| out[o] += xd[i]);
        let inv = T::one() / T::of(count as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(&out_shape, out)?, Op::Mean(x), &[x])
    }

    /// Spatial mean of a `B×C×T×H×W` map, giving `B×C×T×1×1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 5 {
            return Err(Error::invalid("global_avg_pool", "expected a rank-5 feature map"));
        }
        self.mean_axes(x, &[3, 4])
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Bilinear resize of the two trailing axes (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid(
                "upsample_bilinear",
                format!("input {xs:?} to {out_h}x{out_w}"),
            ));
        }
        let r = xs.len();
        let (ih, iw) = (xs[r - 2], xs[r - 1]);
        let planes = xs[..r - 2].iter().product();
        let data = kernels::upsample_forward(self.value(x).data(), planes, (ih, iw), (out_h, out_w));
        let mut shape = xs.clone();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let op = Op::Upsample {
            x,
            planes,
            input: (ih, iw),
            output: (out_h, out_w),
        };
        self.push(Tensor::new(&shape, data)?, op, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} for shape {xs:?}")));
        }
        let data = permute_data(self.value(x).data(), &xs, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        self.push(Tensor::new(&shape, data)?, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Affine map over the last axis: `x·Wᵀ + b` with `W: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let inner = *xs.last().ok_or_else(|| Error::invalid("linear", "rank-0 input"))?;
        if ws.len() != 2 || ws[1] != inner {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let x2 = self.reshape(x, &[rows, inner])?;
        let mut y = self.matmul_t(x2, w, false, true)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = ws[0];
        self.reshape(y, &out_shape)
    }

    /// Stack of linear layers with ReLU between them (none after the last).
    pub fn mlp(&mut self, x: Var, layers: &[(Var, Option<Var>)]) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = self.linear(h, w, b)?;
            if i + 1 < layers.len() {
                h = self.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Reverse sweep from a scalar `loss`, accumulating gradients of every node that
    /// depends on a `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let gd = g.data();
                let os = out.shape();
                let (sa, sb) = (broadcast_strides(av.shape(), os), broadcast_strides(bv.shape(), os));
                let (ad, bd) = (av.data(), bv.data());
                if self.wants(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for_each_broadcast2(os, &sa, &sb, |o, i, j| {
                        da[i] += match kind {
                            Binary::Add | Binary::Sub => gd[o],
                            Binary::Mul => gd[o] * bd[j],
                            Binary::Div => gd[o] / bd[j],
                        }
                    });
                    accumulate(grads, a, Tensor::new(av.shape(), da).unwrap());
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for_each_broadcast2(os, &sa, &sb, |o, i, j| {
                        db[j] += match kind {
                            Binary::Add => gd[o],
                            Binary::Sub => -gd[o],
                            Binary::Mul => gd[o] * ad[i],
                            Binary::Div => -gd[o] * ad[i] / (bd[j] * bd[j]),
                        }
                    });
                    accumulate(grads, b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            &Op::Unary(kind, x) => {
                if !self.wants(x) {
                    return;
                }
                let xd = self.value(x).data();
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(xd)
                    .map(|((&gv, &y), &xv)| match kind {
                        Unary::Sigmoid => gv * y * (T::one() - y),
                        Unary::Relu => {
                            if xv > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Softplus => gv * sigmoid(xv),
                    })
                    .collect();
                accumulate(grads, x, Tensor::new(out.shape(), d).unwrap());
            }
            &Op::Affine(x, s) => {
                if self.wants(x) {
                    accumulate(grads, x, g.map(|v| v * s));
                }
            }
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                let a_batched = av.rank() == 3 && av.shape()[0] > 1;
                let b_batched = bv.rank() == 3 && bv.shape()[0] > 1;
                // stored extents
                let (ra, ca) = if ta { (k, m) } else { (m, k) };
                let (rb, cb) = if tb { (n, k) } else { (k, n) };
                let gref = MatRef::dense(m, n, true, false);
                if self.wants(a) {
                    let mut da = vec![T::zero(); av.len()];
                    if !ta {
                        // dA = dC · op(B)ᵀ
                        kernels::gemm_acc(
                            batch,
                            m,
                            n,
                            k,
                            g.data(),
                            gref,
                            bv.data(),
                            MatRef::dense(rb, cb, b_batched, !tb),
                            &mut da,
                            MatRef::dense(ra, ca, a_batched, false),
                        );
                    } else {
                        // dA (k×m) = op(B) · dCᵀ
                        kernels::gemm_acc(
                            batch,
                            k,
                            n,
                            m,
                            bv.data(),
                            MatRef::dense(rb, cb, b_batched, tb),
                            g.data(),
                            MatRef::dense(m, n, true, true),
                            &mut da,
                            MatRef::dense(ra, ca, a_batched, false),
                        );
                    }
                    accumulate(grads, a, Tensor::new(av.shape(), da).unwrap());
                }
                if self.wants(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    if !tb {
                        // dB = op(A)ᵀ · dC
                        kernels::gemm_acc(
                            batch,
                            k,
                            m,
                            n,
                            av.data(),
                            MatRef::dense(ra, ca, a_batched, !ta),
                            g.data(),
                            gref,
                            &mut db,
                            MatRef::dense(rb, cb, b_batched, false),
                        );
                    } else {
                        // dB (n×k) = dCᵀ · op(A)
                        kernels::gemm_acc(
                            batch,
                            n,
                            m,
                            k,
                            g.data(),
                            MatRef::dense(m, n, true, true),
                            av.data(),
                            MatRef::dense(ra, ca, a_batched, ta),
                            &mut db,
                            MatRef::dense(rb, cb, b_batched, false),
                        );
                    }
                    accumulate(grads, b, Tensor::new(bv.shape(), db).unwrap());
                }
            }
            &Op::Softmax(x) => {
                if self.wants(x) {
                    let row = *out.shape().last().unwrap();
                    let mut dx = vec![T::zero(); out.len()];
                    kernels::softmax_rows_backward(out.data(), g.data(), row, &mut dx);
                    accumulate(grads, x, Tensor::new(out.shape(), dx).unwrap());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                outer,
                c,
                inner,
                xhat,
                rstd,
            } => {
                let (outer, c, inner) = (*outer, *c, *inner);
                let gd = g.data();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (i, (&gv, &xh)) in gd.iter().zip(xhat).enumerate() {
                        let ch = (i / inner) % c;
                        dg[ch] += gv * xh;
                        db[ch] += gv;
                    }
                    if self.wants(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(&[c], dg).unwrap());
                    }
                    if self.wants(*beta) {
                        accumulate(grads, *beta, Tensor::new(&[c], db).unwrap());
                    }
                }
                if self.wants(*x) {
                    let dxhat: Vec<T> = gd
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * gam[(i / inner) % c])
                        .collect();
                    let mut dx = vec![T::zero(); gd.len()];
                    kernels::layer_norm_backward(&dxhat, xhat, rstd, outer, c, inner, &mut dx);
                    accumulate(grads, *x, Tensor::new(out.shape(), dx).unwrap());
                }
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                depthwise,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|&b| self.wants(b)).map(|_| vec![T::zero(); geom.cout]);
                let f = if *depthwise {
                    kernels::conv_depthwise_backward
                } else {
                    kernels::conv_dense_backward
                };
                f(
                    geom,
                    xv.data(),
                    wv.data(),
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, Tensor::new(wv.shape(), dw).unwrap());
                }
                if let (Some(db), Some(b)) = (db, *b) {
                    accumulate(grads, b, Tensor::new(&[geom.cout], db).unwrap());
                }
            }
            &Op::Mean(x) => {
                if self.wants(x) {
                    let xs = self.shape(x);
                    let count = (xs.iter().product::<usize>() / out.len()) as f64;
                    let inv = T::one() / T::of(count);
                    let so = broadcast_strides(out.shape(), xs);
                    let zero = vec![0; xs.len()];
                    let gd = g.data();
                    let mut dx = vec![T::zero(); xs.iter().product()];
                    for_each_broadcast2(xs, &zero, &so, |i, _, o| dx[i] = gd[o] * inv);
                    accumulate(grads, x, Tensor::new(xs, dx).unwrap());
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    accumulate(grads, x, Tensor::full(self.shape(x), g.item()));
                }
            }
            &Op::Upsample {
                x,
                planes,
                input,
                output,
            } => {
                if self.wants(x) {
                    let mut dx = vec![T::zero(); self.value(x).len()];
                    kernels::upsample_backward(g.data(), planes, input, output, &mut dx);
                    accumulate(grads, x, Tensor::new(self.shape(x), dx).unwrap());
                }
            }
            &Op::Reshape(x) => {
                if self.wants(x) {
                    accumulate(grads, x, g.clone().reshaped(self.shape(x)).unwrap());
                }
            }
            Op::Permute(x, perm) => {
                if self.wants(*x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let data = permute_data(g.data(), out.shape(), &inv);
                    accumulate(grads, *x, Tensor::new(self.shape(*x), data).unwrap());
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let st = strides(shape);
    let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let zero = vec![0; shape.len()];
    let mut out = Vec::with_capacity(data.len());
    for_each_broadcast2(&out_shape, &src, &zero, |_, i, _| out.push(data[i]));
    out
}
