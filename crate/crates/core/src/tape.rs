//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records a computation as a flat list of nodes in topological
//! order. Every op stores its output value; [`Tape::backward`] sweeps the
//! list in reverse and accumulates cotangents into parent nodes. The op set
//! covers exactly what the segmentation energies need: elementwise
//! arithmetic, smooth activations, channel plumbing, 2-D convolution with
//! stride/padding, pooling and nearest upsampling, instance normalization,
//! a fully connected layer, channel softmax, and the forward-difference
//! stencil.
//!
//! Values are owned `ArrayD<f64>` in standard (C) layout. The tape is
//! rebuilt for every evaluation; gradients for constant inputs are skipped
//! via a `needs_grad` flag propagated at construction.

use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};

use crate::grad::{forward_grad_adjoint, forward_grad_raw};

/// Handle for a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Square(usize),
    Sqrt(usize),
    Ln(usize),
    Sigmoid(usize),
    Softplus(usize),
    Silu(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Clamp(usize, f64, f64),
    Reshape(usize),
    SliceCh0(usize, usize),
    RepeatCh(usize, usize),
    ReduceCh(usize),
    ConcatCh(usize, usize),
    Softmax0(usize),
    SumAll(usize),
    GradXy(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        replicate: bool,
    },
    AvgPool2(usize),
    Upsample2(usize),
    InstanceNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    needs_grad: bool,
    op: Op,
}

/// A recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a zero-dimensional (scalar) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "scalar() called on non-scalar node");
        *val.first().unwrap()
    }

    /// Gradient accumulated at `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> ArrayD<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => ArrayD::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Mul(a.0, b.0))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        let ng = self.needs(a);
        self.push(value, ng, Op::AddScalar(a.0))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        let ng = self.needs(a);
        self.push(value, ng, Op::MulScalar(a.0, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * x);
        let ng = self.needs(a);
        self.push(value, ng, Op::Square(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.sqrt());
        let ng = self.needs(a);
        self.push(value, ng, Op::Sqrt(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.ln());
        let ng = self.needs(a);
        self.push(value, ng, Op::Ln(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|&x| stable_sigmoid(x));
        let ng = self.needs(a);
        self.push(value, ng, Op::Sigmoid(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let ng = self.needs(a);
        self.push(value, ng, Op::Softplus(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|&x| x * stable_sigmoid(x));
        let ng = self.needs(a);
        self.push(value, ng, Op::Silu(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|&x| x.max(0.0));
        let ng = self.needs(a);
        self.push(value, ng, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.nodes[a.0].value.map(|&x| if x > 0.0 { x } else { slope * x });
        let ng = self.needs(a);
        self.push(value, ng, Op::LeakyRelu(a.0, slope))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.map(|&x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(value, ng, Op::Clamp(a.0, lo, hi))
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shapes");
        let ng = self.needs(a);
        self.push(value, ng, Op::Reshape(a.0))
    }

    /// Extracts channel `idx` along axis 0, dropping the axis.
    pub fn slice_ch0(&mut self, a: Var, idx: usize) -> Var {
        let value = self.nodes[a.0].value.index_axis(Axis(0), idx).to_owned();
        let ng = self.needs(a);
        self.push(value, ng, Op::SliceCh0(a.0, idx))
    }

    /// Repeats a singleton channel axis 1 of an `(N,1,H,W)` tensor `k` times.
    pub fn repeat_ch(&mut self, a: Var, k: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.shape()[1], 1, "repeat_ch expects a singleton channel");
        let mut shape = v.shape().to_vec();
        shape[1] = k;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for c in 0..k {
            out.index_axis_mut(Axis(1), c)
                .assign(&v.index_axis(Axis(1), 0));
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::RepeatCh(a.0, k))
    }

    /// Sums over channel axis 1 of `(N,C,H,W)`, keeping the axis.
    pub fn reduce_ch(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut shape = v.shape().to_vec();
        shape[1] = 1;
        let summed = v.sum_axis(Axis(1)).insert_axis(Axis(1));
        let value = summed.into_shape_with_order(IxDyn(&shape)).unwrap();
        let ng = self.needs(a);
        self.push(value, ng, Op::ReduceCh(a.0))
    }

    /// Concatenates along channel axis 1.
    pub fn concat_ch(&mut self, a: Var, b: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let value = ndarray::concatenate(Axis(1), &[va.view(), vb.view()])
            .expect("concat_ch: incompatible shapes");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::ConcatCh(a.0, b.0))
    }

    /// Numerically stabilized softmax over axis 0.
    pub fn softmax0(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut out = v.clone();
        let c = v.shape()[0];
        let inner: usize = v.shape()[1..].iter().product();
        {
            let flat = out.as_slice_mut().expect("contiguous");
            for px in 0..inner {
                let mut maxv = f64::NEG_INFINITY;
                for ch in 0..c {
                    maxv = maxv.max(flat[ch * inner + px]);
                }
                let mut denom = 0.0;
                for ch in 0..c {
                    let e = (flat[ch * inner + px] - maxv).exp();
                    flat[ch * inner + px] = e;
                    denom += e;
                }
                for ch in 0..c {
                    flat[ch * inner + px] /= denom;
                }
            }
        }
        let ng = self.needs(a);
        self.push(out, ng, Op::Softmax0(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.sum();
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        let ng = self.needs(a);
        self.push(value, ng, Op::SumAll(a.0))
    }

    /// Forward-difference stencil over the trailing two axes:
    /// `(.., H, W) -> (.., 2, H, W)`.
    pub fn grad_xy(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let nd = v.ndim();
        assert!(nd >= 2, "grad_xy needs at least 2 axes");
        let h = v.shape()[nd - 2];
        let w = v.shape()[nd - 1];
        let lead: usize = v.shape()[..nd - 2].iter().product();
        let flat = v
            .view()
            .into_shape_with_order((lead, h, w))
            .expect("contiguous");
        let mut out = ndarray::Array4::zeros((lead, 2, h, w));
        for l in 0..lead {
            let slice = flat.index_axis(Axis(0), l).to_owned();
            out.index_axis_mut(Axis(0), l)
                .assign(&forward_grad_raw(&slice));
        }
        let mut shape = v.shape()[..nd - 2].to_vec();
        shape.extend_from_slice(&[2, h, w]);
        let value = out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap();
        let ng = self.needs(a);
        self.push(value, ng, Op::GradXy(a.0))
    }

    // ---- network layers ----

    /// 2-D convolution with zero padding:
    /// `x (N,Cin,H,W)`, `w (Cout,Cin,kh,kw)`, `b (Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        self.conv2d_padded(x, w, b, stride, pad, false)
    }

    /// 2-D convolution with replicate (edge-clamped) padding, which keeps
    /// constant inputs mapping to constant outputs.
    pub fn conv2d_replicate(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        self.conv2d_padded(x, w, b, stride, pad, true)
    }

    fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        replicate: bool,
    ) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d input must be 4-d");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d weight must be 4-d");
        let bv = &self.nodes[b.0].value;
        let (n, cin, h, wd) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(bv.len(), cout, "conv2d bias length mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let wmat = wv.to_shape((cout, k)).expect("weight reshape");
        let mut out = ndarray::Array4::zeros((n, cout, oh, ow));
        let mut col = ndarray::Array2::zeros((k, oh * ow));
        for s in 0..n {
            im2col(&xv.index_axis(Axis(0), s), kh, kw, stride, pad, replicate, &mut col);
            let y = wmat.dot(&col);
            let mut out_s = out.index_axis_mut(Axis(0), s);
            for c in 0..cout {
                let bias = bv[[c]];
                let row = y.row(c);
                for oi in 0..oh {
                    for oj in 0..ow {
                        out_s[[c, oi, oj]] = row[oi * ow + oj] + bias;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            out.into_dyn(),
            ng,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
                replicate,
            },
        )
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("avg_pool2 input must be 4-d");
        let (n, c, h, w) = v.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let mut out = ndarray::Array4::zeros((n, c, h / 2, w / 2));
        for s in 0..n {
            for ch in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        out[[s, ch, i, j]] = 0.25
                            * (v[[s, ch, 2 * i, 2 * j]]
                                + v[[s, ch, 2 * i, 2 * j + 1]]
                                + v[[s, ch, 2 * i + 1, 2 * j]]
                                + v[[s, ch, 2 * i + 1, 2 * j + 1]]);
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), ng, Op::AvgPool2(a.0))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample2 input must be 4-d");
        let (n, c, h, w) = v.dim();
        let mut out = ndarray::Array4::zeros((n, c, 2 * h, 2 * w));
        for s in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let x = v[[s, ch, i, j]];
                        out[[s, ch, 2 * i, 2 * j]] = x;
                        out[[s, ch, 2 * i, 2 * j + 1]] = x;
                        out[[s, ch, 2 * i + 1, 2 * j]] = x;
                        out[[s, ch, 2 * i + 1, 2 * j + 1]] = x;
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), ng, Op::Upsample2(a.0))
    }

    /// Instance normalization over the spatial axes with per-channel affine
    /// parameters: `x (N,C,H,W)`, `gamma (C)`, `beta (C)`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("instance_norm input must be 4-d");
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let (n, c, h, w) = v.dim();
        assert_eq!(g.len(), c);
        assert_eq!(b.len(), c);
        let area = (h * w) as f64;
        let mut out = ndarray::Array4::zeros((n, c, h, w));
        for s in 0..n {
            for ch in 0..c {
                let slice = v.index_axis(Axis(0), s);
                let slice = slice.index_axis(Axis(0), ch);
                let mean = slice.sum() / area;
                let var = slice.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / area;
                let inv = 1.0 / (var + eps).sqrt();
                let (gc, bc) = (g[[ch]], b[[ch]]);
                for i in 0..h {
                    for j in 0..w {
                        out[[s, ch, i, j]] = gc * (slice[[i, j]] - mean) * inv + bc;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out.into_dyn(),
            ng,
            Op::InstanceNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Fully connected layer: `x (N,K)`, `w (O,K)`, `b (O)` -> `(N,O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.nodes[x.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear input must be 2-d");
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight must be 2-d");
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.dim().1, wv.dim().1, "linear shape mismatch");
        assert_eq!(bv.len(), wv.dim().0);
        let mut y = xv.dot(&wv.t());
        for mut row in y.rows_mut() {
            for (o, out) in row.iter_mut().enumerate() {
                *out += bv[[o]];
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            y.into_dyn(),
            ng,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
        )
    }

    // ---- backward ----

    /// Accumulates gradients of `root` (a scalar node) into every node that
    /// contributed to it. Existing gradients are cleared first.
    pub fn backward(&mut self, root: Var) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        assert!(
            self.nodes[root.0].value.ndim() == 0,
            "backward root must be a scalar node"
        );
        self.nodes[root.0].grad = Some(ArrayD::ones(IxDyn(&[])));
        for i in (0..=root.0).rev() {
            let (parents, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.is_none() || !node.needs_grad {
                continue;
            }
            let g = node.grad.as_ref().unwrap();
            backprop(&node.op, g, &node.value, parents);
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn grad_slot<'a>(nodes: &'a mut [Node], idx: usize) -> &'a mut ArrayD<f64> {
    let shape = nodes[idx].value.raw_dim();
    nodes[idx].grad.get_or_insert_with(|| ArrayD::zeros(shape))
}

fn wants(nodes: &[Node], idx: usize) -> bool {
    nodes[idx].needs_grad
}

fn backprop(op: &Op, g: &ArrayD<f64>, value: &ArrayD<f64>, nodes: &mut [Node]) {
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(nodes, a) {
                *grad_slot(nodes, a) += g;
            }
            if wants(nodes, b) {
                *grad_slot(nodes, b) += g;
            }
        }
        Op::Sub(a, b) => {
            if wants(nodes, a) {
                *grad_slot(nodes, a) += g;
            }
            if wants(nodes, b) {
                *grad_slot(nodes, b) -= g;
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, a) {
                let da = g * &nodes[b].value;
                *grad_slot(nodes, a) += &da;
            }
            if wants(nodes, b) {
                let db = g * &nodes[a].value;
                *grad_slot(nodes, b) += &db;
            }
        }
        Op::AddScalar(a) => {
            if wants(nodes, a) {
                *grad_slot(nodes, a) += g;
            }
        }
        Op::MulScalar(a, c) => {
            if wants(nodes, a) {
                let da = g * c;
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::Square(a) => {
            if wants(nodes, a) {
                let da = 2.0 * g * &nodes[a].value;
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::Sqrt(a) => {
            if wants(nodes, a) {
                let da = 0.5 * g / value;
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::Ln(a) => {
            if wants(nodes, a) {
                let da = g / &nodes[a].value;
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::Sigmoid(a) => {
            if wants(nodes, a) {
                let da = g * &value.map(|&y| y * (1.0 - y));
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::Softplus(a) => {
            if wants(nodes, a) {
                let da = g * &nodes[a].value.map(|&x| stable_sigmoid(x));
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::Silu(a) => {
            if wants(nodes, a) {
                let da = g * &nodes[a].value.map(|&x| {
                    let s = stable_sigmoid(x);
                    s + x * s * (1.0 - s)
                });
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::Relu(a) => {
            if wants(nodes, a) {
                let da = g * &nodes[a].value.map(|&x| if x > 0.0 { 1.0 } else { 0.0 });
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::LeakyRelu(a, slope) => {
            if wants(nodes, a) {
                let da = g * &nodes[a].value.map(|&x| if x > 0.0 { 1.0 } else { slope });
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::Clamp(a, lo, hi) => {
            if wants(nodes, a) {
                let mask = nodes[a].value.map(|&x| if x > lo && x < hi { 1.0 } else { 0.0 });
                let da = g * &mask;
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::Reshape(a) => {
            if wants(nodes, a) {
                let shape = nodes[a].value.raw_dim();
                let da = g.clone().into_shape_with_order(shape).unwrap();
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::SliceCh0(a, idx) => {
            if wants(nodes, a) {
                grad_slot(nodes, a)
                    .index_axis_mut(Axis(0), idx)
                    .zip_mut_with(g, |d, &s| *d += s);
            }
        }
        Op::RepeatCh(a, k) => {
            if wants(nodes, a) {
                let mut acc = g.index_axis(Axis(1), 0).to_owned();
                for c in 1..k {
                    acc += &g.index_axis(Axis(1), c);
                }
                grad_slot(nodes, a)
                    .index_axis_mut(Axis(1), 0)
                    .zip_mut_with(&acc, |d, &s| *d += s);
            }
        }
        Op::ReduceCh(a) => {
            if wants(nodes, a) {
                let gsq = g.index_axis(Axis(1), 0);
                let slot = grad_slot(nodes, a);
                let c = slot.shape()[1];
                for ch in 0..c {
                    slot.index_axis_mut(Axis(1), ch)
                        .zip_mut_with(&gsq, |d, &s| *d += s);
                }
            }
        }
        Op::ConcatCh(a, b) => {
            let ca = nodes[a].value.shape()[1];
            if wants(nodes, a) {
                let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                *grad_slot(nodes, a) += &ga;
            }
            if wants(nodes, b) {
                let gb = g.slice_axis(Axis(1), ndarray::Slice::from(ca..)).to_owned();
                *grad_slot(nodes, b) += &gb;
            }
        }
        Op::Softmax0(a) => {
            if wants(nodes, a) {
                let s = value;
                let c = s.shape()[0];
                let inner: usize = s.shape()[1..].iter().product();
                let sflat = s.as_slice().unwrap();
                let gflat = g.as_slice().unwrap();
                let mut da = ArrayD::zeros(s.raw_dim());
                {
                    let dflat = da.as_slice_mut().unwrap();
                    for px in 0..inner {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            dot += gflat[ch * inner + px] * sflat[ch * inner + px];
                        }
                        for ch in 0..c {
                            let idx = ch * inner + px;
                            dflat[idx] = sflat[idx] * (gflat[idx] - dot);
                        }
                    }
                }
                *grad_slot(nodes, a) += &da;
            }
        }
        Op::SumAll(a) => {
            if wants(nodes, a) {
                let gv = *g.first().unwrap();
                grad_slot(nodes, a).map_inplace(|d| *d += gv);
            }
        }
        Op::GradXy(a) => {
            if wants(nodes, a) {
                let nd = g.ndim();
                let h = g.shape()[nd - 2];
                let w = g.shape()[nd - 1];
                let lead: usize = g.shape()[..nd - 3].iter().product();
                let gflat = g
                    .view()
                    .into_shape_with_order((lead, 2, h, w))
                    .expect("contiguous");
                let slot = grad_slot(nodes, a);
                let mut sflat = slot
                    .view_mut()
                    .into_shape_with_order((lead, h, w))
                    .expect("contiguous");
                for l in 0..lead {
                    let p = gflat.index_axis(Axis(0), l).to_owned();
                    let adj = forward_grad_adjoint(&p);
                    sflat.index_axis_mut(Axis(0), l).zip_mut_with(&adj, |d, &s| *d += s);
                }
            }
        }
        Op::Conv2d { x, w, b, stride, pad, replicate } => {
            let xv = nodes[x]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned();
            let wv = nodes[w]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned();
            let (n, cin, _, _) = xv.dim();
            let (cout, _, kh, kw) = wv.dim();
            let k = cin * kh * kw;
            let gv = g.view().into_dimensionality::<Ix4>().unwrap();
            let (_, _, oh, ow) = gv.dim();
            let wmat = wv.view().into_shape_with_order((cout, k)).unwrap();

            if wants(nodes, b) {
                let mut db = ArrayD::zeros(IxDyn(&[cout]));
                for c in 0..cout {
                    db[[c]] = gv.index_axis(Axis(1), c).sum();
                }
                *grad_slot(nodes, b) += &db;
            }

            let want_w = wants(nodes, w);
            let want_x = wants(nodes, x);
            if want_w || want_x {
                let mut dw = ndarray::Array2::<f64>::zeros((cout, k));
                let mut dx = ndarray::Array4::<f64>::zeros(xv.dim());
                let mut col = ndarray::Array2::zeros((k, oh * ow));
                for s in 0..n {
                    let gs = gv
                        .index_axis(Axis(0), s)
                        .to_shape((cout, oh * ow))
                        .unwrap()
                        .to_owned();
                    if want_w {
                        im2col(&xv.index_axis(Axis(0), s), kh, kw, stride, pad, replicate, &mut col);
                        dw += &gs.dot(&col.t());
                    }
                    if want_x {
                        let dcol = wmat.t().dot(&gs);
                        col2im(
                            &dcol,
                            &mut dx.index_axis_mut(Axis(0), s),
                            kh,
                            kw,
                            stride,
                            pad,
                            replicate,
                        );
                    }
                }
                if want_w {
                    let dwd = dw
                        .into_dyn()
                        .into_shape_with_order(nodes[w].value.raw_dim())
                        .unwrap();
                    *grad_slot(nodes, w) += &dwd;
                }
                if want_x {
                    *grad_slot(nodes, x) += &dx.into_dyn();
                }
            }
        }
        Op::AvgPool2(a) => {
            if wants(nodes, a) {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, oh, ow) = gv.dim();
                let slot = grad_slot(nodes, a);
                let mut sv = slot.view_mut().into_dimensionality::<Ix4>().unwrap();
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let q = 0.25 * gv[[s, ch, i, j]];
                                sv[[s, ch, 2 * i, 2 * j]] += q;
                                sv[[s, ch, 2 * i, 2 * j + 1]] += q;
                                sv[[s, ch, 2 * i + 1, 2 * j]] += q;
                                sv[[s, ch, 2 * i + 1, 2 * j + 1]] += q;
                            }
                        }
                    }
                }
            }
        }
        Op::Upsample2(a) => {
            if wants(nodes, a) {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let slot = grad_slot(nodes, a);
                let mut sv = slot.view_mut().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = sv.dim();
                for s in 0..n {
                    for ch in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                sv[[s, ch, i, j]] += gv[[s, ch, 2 * i, 2 * j]]
                                    + gv[[s, ch, 2 * i, 2 * j + 1]]
                                    + gv[[s, ch, 2 * i + 1, 2 * j]]
                                    + gv[[s, ch, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
            }
        }
        Op::InstanceNorm { x, gamma, beta, eps } => {
            let xv = nodes[x]
                .value
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned();
            let gm = nodes[gamma].value.clone();
            let gv = g.view().into_dimensionality::<Ix4>().unwrap();
            let (n, c, h, w) = xv.dim();
            let area = (h * w) as f64;
            let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
            let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
            let mut dx = ndarray::Array4::<f64>::zeros(xv.dim());
            for s in 0..n {
                for ch in 0..c {
                    let xs = xv.index_axis(Axis(0), s);
                    let xs = xs.index_axis(Axis(0), ch);
                    let gs = gv.index_axis(Axis(0), s);
                    let gs = gs.index_axis(Axis(0), ch);
                    let mean = xs.sum() / area;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / area;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat = xs.map(|&v| (v - mean) * inv);
                    let dy_sum = gs.sum();
                    let dyxhat_sum: f64 = gs.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                    dbeta[[ch]] += dy_sum;
                    dgamma[[ch]] += dyxhat_sum;
                    let gc = gm[[ch]];
                    for i in 0..h {
                        for j in 0..w {
                            let t = gs[[i, j]] - dy_sum / area - xhat[[i, j]] * dyxhat_sum / area;
                            dx[[s, ch, i, j]] = gc * inv * t;
                        }
                    }
                }
            }
            if wants(nodes, gamma) {
                *grad_slot(nodes, gamma) += &dgamma;
            }
            if wants(nodes, beta) {
                *grad_slot(nodes, beta) += &dbeta;
            }
            if wants(nodes, x) {
                *grad_slot(nodes, x) += &dx.into_dyn();
            }
        }
        Op::Linear { x, w, b } => {
            let xv = nodes[x]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let wv = nodes[w]
                .value
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            if wants(nodes, b) {
                let db = gv.sum_axis(Axis(0)).into_dyn();
                *grad_slot(nodes, b) += &db;
            }
            if wants(nodes, w) {
                let dw = gv.t().dot(&xv).into_dyn();
                *grad_slot(nodes, w) += &dw;
            }
            if wants(nodes, x) {
                let dx = gv.dot(&wv).into_dyn();
                *grad_slot(nodes, x) += &dx;
            }
        }
    }
}

fn im2col(
    x: &ndarray::ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    replicate: bool,
    col: &mut ndarray::Array2<f64>,
) {
    let (cin, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(col.dim(), (cin * kh * kw, oh * ow));
    col.fill(0.0);
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let ii = oi * stride + ki;
                    let src_i = if replicate {
                        (ii.max(pad) - pad).min(h - 1)
                    } else {
                        if ii < pad || ii >= h + pad {
                            continue;
                        }
                        ii - pad
                    };
                    for oj in 0..ow {
                        let jj = oj * stride + kj;
                        let src_j = if replicate {
                            (jj.max(pad) - pad).min(w - 1)
                        } else {
                            if jj < pad || jj >= w + pad {
                                continue;
                            }
                            jj - pad
                        };
                        col[[row, oi * ow + oj]] = x[[ci, src_i, src_j]];
                    }
                }
            }
        }
    }
}

fn col2im(
    dcol: &ndarray::Array2<f64>,
    dx: &mut ndarray::ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    replicate: bool,
) {
    let (cin, h, w) = dx.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(dcol.dim(), (cin * kh * kw, oh * ow));
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let ii = oi * stride + ki;
                    let src_i = if replicate {
                        (ii.max(pad) - pad).min(h - 1)
                    } else {
                        if ii < pad || ii >= h + pad {
                            continue;
                        }
                        ii - pad
                    };
                    for oj in 0..ow {
                        let jj = oj * stride + kj;
                        let src_j = if replicate {
                            (jj.max(pad) - pad).min(w - 1)
                        } else {
                            if jj < pad || jj >= w + pad {
                                continue;
                            }
                            jj - pad
                        };
                        dx[[ci, src_i, src_j]] += dcol[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
}
