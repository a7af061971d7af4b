//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order; node ids are
//! indices into that tape, so a reverse sweep over the tape is a valid
//! topological order for backpropagation.

use crate::error::{NnError, Result};
use crate::gemm::{gemm, transpose};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `k / 2` zeros on every side.
    Same,
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        }
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        /// im2col buffers per batch item; empty for pointwise convs or
        /// when the graph does not record.
        cols: Vec<Vec<T>>,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Upsample(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    ScaleChannels {
        input: NodeId,
        scales: Vec<T>,
    },
    Custom {
        inputs: Vec<NodeId>,
        grads: Vec<Vec<T>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Concat { .. } => "concat_channels",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Upsample(_) => "upsample_nearest2x",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation. Confined to one thread at a time; build one graph
/// per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that keeps what backward needs.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only graph: no im2col buffers or pooling indices are kept and
    /// [`Graph::backward`] is refused.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(NnError::NonFinite { op: op.name() });
        }
        let op = if self.record || matches!(op, Op::Param(_) | Op::Leaf) {
            op
        } else {
            strip(op)
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<NodeId> {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    /// Cross-correlation of `input` (N×Cin×H×W) with `weight` (Cout×Cin×k×k).
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = self.value(input).dims4(OP)?;
        let [cout, wcin, kh, kw] = self.value(weight).dims4(OP)?;
        if wcin != cin {
            return Err(NnError::ChannelMismatch {
                op: OP,
                expected: wcin,
                got: cin,
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(NnError::InvalidArgument {
                op: OP,
                reason: format!("kernel must be square with odd size, got {kh}×{kw}"),
            });
        }
        if stride == 0 {
            return Err(NnError::InvalidArgument {
                op: OP,
                reason: "stride must be positive".into(),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(NnError::ShapeMismatch {
                    op: OP,
                    expected: vec![cout],
                    got: self.shape(b).to_vec(),
                });
            }
        }
        let k = kh;
        let pad = padding.amount(k);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(NnError::InvalidArgument {
                op: OP,
                reason: format!("input {h}×{w} smaller than kernel {k} with padding {pad}"),
            });
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let kdim = cin * k * k;
        let plane = oh * ow;

        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![T::zero(); n * cout * plane];
        let mut cols = Vec::new();
        for s in 0..n {
            let xs = &x[s * cin * h * w..(s + 1) * cin * h * w];
            let os = &mut out[s * cout * plane..(s + 1) * cout * plane];
            if pointwise {
                gemm(cout, kdim, plane, wt, xs, os);
            } else {
                let col = im2col(xs, cin, h, w, k, stride, pad, oh, ow);
                gemm(cout, kdim, plane, wt, &col, os);
                if self.record {
                    cols.push(col);
                }
            }
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (co, row) in os.chunks_mut(plane).enumerate() {
                    let bias = bv[co];
                    row.iter_mut().for_each(|v| *v = *v + bias);
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            Tensor::from_vec(&[n, cout, oh, ow], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
            needs,
        )
    }

    /// 2×2 max pooling with stride 2. Odd extents are padded with −∞, so the
    /// output is `ceil(H/2) × ceil(W/2)`.
    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(input).dims4("maxpool2d")?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(if self.record { n * c * oh * ow } else { 0 });
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let idx = base + y * w + xx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    if self.record {
                        argmax.push(best as u32);
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push(
            Tensor::from_vec(&[n, c, oh, ow], out)?,
            Op::MaxPool { input, argmax },
            needs,
        )
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.value(a).dims4(OP)?;
        let [nb, cb, hb, wb] = self.value(b).dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(NnError::ShapeMismatch {
                op: OP,
                expected: vec![n, cb, h, w],
                got: vec![nb, cb, hb, wb],
            });
        }
        let plane = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&bv[s * cb * plane..(s + 1) * cb * plane]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_vec(&[n, ca + cb, h, w], out)?,
            Op::Concat { a, b },
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.map(x, |v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(v, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.map(x, sigmoid);
        let needs = self.needs(x);
        self.push(v, Op::Sigmoid(x), needs)
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample_nearest2x(&mut self, x: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = self.value(x).dims4("upsample_nearest2x")?;
        self.upsample_nearest_to(x, 2 * h, 2 * w)
    }

    /// Nearest-neighbour 2× upsampling cropped to `oh × ow`, used when a
    /// ceil-pooled level is matched against its finer neighbour.
    pub fn upsample_nearest_to(&mut self, x: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        const OP: &str = "upsample_nearest2x";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        if oh > 2 * h || ow > 2 * w || oh.div_ceil(2) != h || ow.div_ceil(2) != w {
            return Err(NnError::InvalidArgument {
                op: OP,
                reason: format!("cannot upsample {h}×{w} to {oh}×{ow}"),
            });
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                let row = base + (y / 2) * w;
                out.extend((0..ow).map(|xx| xv[row + xx / 2]));
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(&[n, c, oh, ow], out)?, Op::Upsample(x), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(v, Op::Sum(x), needs)
    }

    /// Multiplies channel `c` of an N×C×H×W tensor by the constant `scales[c]`.
    pub fn scale_channels(&mut self, x: NodeId, scales: &[T]) -> Result<NodeId> {
        const OP: &str = "scale_channels";
        let [n, c, h, w] = self.value(x).dims4(OP)?;
        if scales.len() != c {
            return Err(NnError::ChannelMismatch {
                op: OP,
                expected: scales.len(),
                got: c,
            });
        }
        let plane = h * w;
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scales[(i / plane) % c])
            .collect();
        let needs = self.needs(x);
        debug_assert_eq!(out.len(), n * c * plane);
        self.push(
            Tensor::from_vec(&[n, c, h, w], out)?,
            Op::ScaleChannels {
                input: x,
                scales: scales.to_vec(),
            },
            needs,
        )
    }

    /// Registers a scalar computed outside the graph together with its local
    /// gradient with respect to each input. Losses with closed-form
    /// gradients plug in here.
    pub fn custom_scalar(&mut self, inputs: &[NodeId], value: T, grads: Vec<Vec<T>>) -> Result<NodeId> {
        const OP: &str = "custom";
        if grads.len() != inputs.len() {
            return Err(NnError::InvalidArgument {
                op: OP,
                reason: format!("{} inputs but {} gradients", inputs.len(), grads.len()),
            });
        }
        for (&i, g) in inputs.iter().zip(&grads) {
            if g.len() != self.value(i).len() {
                return Err(NnError::ShapeMismatch {
                    op: OP,
                    expected: self.shape(i).to_vec(),
                    got: vec![g.len()],
                });
            }
        }
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(
            Tensor::scalar(value),
            Op::Custom {
                inputs: inputs.to_vec(),
                grads,
            },
            needs,
        )
    }

    fn map(&self, x: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::from_vec(t.shape(), t.data().iter().map(|&v| f(v)).collect())
            .expect("shape preserved")
    }

    fn zip(&self, a: NodeId, b: NodeId, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NnError::ShapeMismatch {
                op,
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        Tensor::from_vec(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.record {
            return Err(NnError::InvalidArgument {
                op: "backward",
                reason: "graph was built in inference mode".into(),
            });
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => params.push((*pid, NodeId(i))),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                    cols,
                } => self.conv_backward(&g, *input, *weight, *bias, *stride, *pad, cols, NodeId(i), &mut grads)?,
                Op::MaxPool { input, argmax } => {
                    if self.needs(*input) {
                        let dst = slot(&mut grads, *input, self.value(*input).len());
                        for (gv, &src) in g.iter().zip(argmax) {
                            dst[src as usize] = dst[src as usize] + *gv;
                        }
                    }
                }
                Op::Concat { a, b } => {
                    let [n, ca, h, w] = self.value(*a).dims4("concat_channels")?;
                    let cb = self.shape(*b)[1];
                    let plane = h * w;
                    for s in 0..n {
                        let off = s * (ca + cb) * plane;
                        if self.needs(*a) {
                            let dst = slot(&mut grads, *a, n * ca * plane);
                            accumulate(&mut dst[s * ca * plane..(s + 1) * ca * plane], &g[off..off + ca * plane]);
                        }
                        if self.needs(*b) {
                            let dst = slot(&mut grads, *b, n * cb * plane);
                            accumulate(
                                &mut dst[s * cb * plane..(s + 1) * cb * plane],
                                &g[off + ca * plane..off + (ca + cb) * plane],
                            );
                        }
                    }
                }
                Op::Relu(x) => {
                    if self.needs(*x) {
                        let xv = self.value(*x).data();
                        let dst = slot(&mut grads, *x, xv.len());
                        for ((d, gv), v) in dst.iter_mut().zip(&g).zip(xv) {
                            if *v > T::zero() {
                                *d = *d + *gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if self.needs(*x) {
                        let yv = node.value.data();
                        let dst = slot(&mut grads, *x, yv.len());
                        for ((d, gv), y) in dst.iter_mut().zip(&g).zip(yv) {
                            *d = *d + *gv * *y * (T::one() - *y);
                        }
                    }
                }
                Op::Upsample(x) => {
                    if self.needs(*x) {
                        let [n, c, h, w] = self.value(*x).dims4("upsample_nearest2x")?;
                        let [_, _, oh, ow] = node.value.dims4("upsample_nearest2x")?;
                        let dst = slot(&mut grads, *x, n * c * h * w);
                        for plane in 0..n * c {
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let di = plane * h * w + (y / 2) * w + xx / 2;
                                    dst[di] = dst[di] + g[plane * oh * ow + y * ow + xx];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &x in [a, b] {
                        if self.needs(x) {
                            accumulate(slot(&mut grads, x, g.len()), &g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (&x, &other) in [(a, b), (b, a)] {
                        if self.needs(x) {
                            let ov = self.value(other).data();
                            let dst = slot(&mut grads, x, g.len());
                            for ((d, gv), o) in dst.iter_mut().zip(&g).zip(ov) {
                                *d = *d + *gv * *o;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if self.needs(*x) {
                        let g0 = g[0];
                        slot(&mut grads, *x, self.value(*x).len())
                            .iter_mut()
                            .for_each(|d| *d = *d + g0);
                    }
                }
                Op::ScaleChannels { input, scales } => {
                    if self.needs(*input) {
                        let [_, c, h, w] = self.value(*input).dims4("scale_channels")?;
                        let plane = h * w;
                        let dst = slot(&mut grads, *input, g.len());
                        for (idx, (d, gv)) in dst.iter_mut().zip(&g).enumerate() {
                            *d = *d + *gv * scales[(idx / plane) % c];
                        }
                    }
                }
                Op::Custom { inputs, grads: local } => {
                    let g0 = g[0];
                    for (&x, lg) in inputs.iter().zip(local) {
                        if self.needs(x) {
                            let dst = slot(&mut grads, x, lg.len());
                            for (d, l) in dst.iter_mut().zip(lg) {
                                *d = *d + g0 * *l;
                            }
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        params.reverse();
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_vec(self.nodes[i].value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads, params })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &[T],
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        cols: &[Vec<T>],
        out: NodeId,
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let [n, cin, h, w] = self.value(input).dims4("conv2d")?;
        let [cout, _, k, _] = self.value(weight).dims4("conv2d")?;
        let [_, _, oh, ow] = self.value(out).dims4("conv2d")?;
        let plane = oh * ow;
        let kdim = cin * k * k;
        let pointwise = cols.is_empty();
        let x = self.value(input).data();
        let wt = self.value(weight).data();

        if let Some(b) = bias.filter(|&b| self.needs(b)) {
            let db = slot(grads, b, cout);
            for s in 0..n {
                for (co, row) in g[s * cout * plane..(s + 1) * cout * plane].chunks(plane).enumerate() {
                    db[co] = db[co] + row.iter().copied().sum::<T>();
                }
            }
        }
        if self.needs(weight) {
            let mut dw = vec![T::zero(); cout * kdim];
            for s in 0..n {
                let col: &[T] = if pointwise {
                    &x[s * cin * h * w..(s + 1) * cin * h * w]
                } else {
                    &cols[s]
                };
                let col_t = transpose(kdim, plane, col);
                gemm(cout, plane, kdim, &g[s * cout * plane..(s + 1) * cout * plane], &col_t, &mut dw);
            }
            accumulate(slot(grads, weight, cout * kdim), &dw);
        }
        if self.needs(input) {
            let w_t = transpose(cout, kdim, wt);
            let mut dx = vec![T::zero(); n * cin * h * w];
            for s in 0..n {
                let gs = &g[s * cout * plane..(s + 1) * cout * plane];
                let dxs = &mut dx[s * cin * h * w..(s + 1) * cin * h * w];
                if pointwise {
                    gemm(kdim, cout, plane, &w_t, gs, dxs);
                } else {
                    let mut dcol = vec![T::zero(); kdim * plane];
                    gemm(kdim, cout, plane, &w_t, gs, &mut dcol);
                    col2im(&dcol, dxs, cin, h, w, k, stride, pad, oh, ow);
                }
            }
            accumulate(slot(grads, input, dx.len()), &dx);
        }
        Ok(())
    }
}

fn strip<T>(op: Op<T>) -> Op<T> {
    match op {
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
            ..
        } => Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
            cols: Vec::new(),
        },
        Op::MaxPool { input, .. } => Op::MaxPool {
            input,
            argmax: Vec::new(),
        },
        Op::Custom { inputs, .. } => Op::Custom {
            inputs,
            grads: Vec::new(),
        },
        other => other,
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut Vec<T> {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let plane = oh * ow;
    let mut col = vec![T::zero(); c * k * k * plane];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + iy as usize * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            col[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let plane = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + iy as usize * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let di = dst + ix as usize;
                            dx[di] = dx[di] + col[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, NodeId)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient per parameter node, in tape order. A parameter loaded into the
    /// graph twice appears twice.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.get(node).map(|g| (pid, g)))
    }
}
