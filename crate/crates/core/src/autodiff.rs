//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends a node recording its parents.
//! Nodes are only ever appended, so tape order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. A fresh graph is built for
//! each forward pass.
//!
//! Piecewise ops (`relu`, `abs`, `clamp`, `max_scalar`, `min_scalar`) use
//! gradient 1 for the pass-through branch including the boundary itself.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_offsets, broadcast_shape, numel, reduce_to_shape, Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts { stride: 1, padding: 0 }
    }
}

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Pow(Var, Var),
    PowScalar(Var, T),
    Affine(Var, T),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Clamp(Var, T, T),
    MaxScalar(Var, T),
    MinScalar(Var, T),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        opts: Conv2dOpts,
    },
    AvgPool2d(Var, usize),
    SumAll(Var),
    SumAxes(Var),
    L2Norm(Var),
    BroadcastTo(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    LogSoftmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics emitted by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Element> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate, used for running averages.
    pub var: Vec<T>,
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    track_kinks: bool,
    kink_signature: u64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn c<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Index pattern of one operand of a broadcast binary op.
enum Offsets {
    Same,
    Mapped(Vec<usize>),
}

impl Offsets {
    fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            Offsets::Same
        } else {
            Offsets::Mapped(broadcast_offsets(src, out))
        }
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Offsets::Same => i,
            Offsets::Mapped(v) => v[i],
        }
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            track_kinks: false,
            kink_signature: 0,
        }
    }

    /// Record which side of each kink every piecewise op lands on. Used by
    /// finite-difference checks to exclude perturbations that cross a kink.
    pub fn with_kink_tracking(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Every node, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.len()).map(Var)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        ensure_finite(&value, "leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.constant(Tensor::scalar(v))
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

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Cut the gradient path: returns a constant holding `v`'s value.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var], name: &'static str) -> Result<Var> {
        ensure_finite(&value, name)?;
        let rg = self.rg(parents);
        Ok(self.push(value, op, rg))
    }

    fn note_kinks(&mut self, sides: impl Iterator<Item = u8>) {
        let mut h = self.kink_signature;
        for s in sides {
            h = (h.rotate_left(7) ^ s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        }
        self.kink_signature = h ^ 0xA5;
    }

    // ---- elementwise binary ---------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let oa = Offsets::new(&sa, &out_shape);
        let ob = Offsets::new(&sb, &out_shape);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let data: Vec<T> = (0..n).map(|i| f(va[oa.at(i)], vb[ob.at(i)])).collect();
        Ok((Tensor::new(out_shape.clone(), data)?, out_shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "add", |x, y| x + y)?;
        self.finish(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.finish(t, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.finish(t, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary(a, b, "div", |x, y| x / y)?;
        self.finish(t, Op::Div(a, b), &[a, b], "div")
    }

    /// `a^b` elementwise for `a >= 0`; `0^b` is taken as 0 for `b > 0`.
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < T::zero()) {
            return Err(Error::OutOfRange {
                op: "pow",
                detail: "negative base".into(),
            });
        }
        let (t, _) = self.binary(a, b, "pow", |x, y| x.powf(y))?;
        self.finish(t, Op::Pow(a, b), &[a, b], "pow")
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, x: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(x).map(f);
        self.finish(t, op, &[x], name)
    }

    pub fn pow_scalar(&mut self, x: Var, p: T) -> Result<Var> {
        self.unary(x, Op::PowScalar(x, p), "pow_scalar", |v| v.powf(p))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `x * s`.
    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, Op::Affine(x, s), "scale", |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, Op::Affine(x, T::one()), "add_scalar", |v| v + s)
    }

    /// `s - x`.
    pub fn rsub_scalar(&mut self, s: T, x: Var) -> Result<Var> {
        self.unary(x, Op::Affine(x, -T::one()), "rsub_scalar", |v| s - v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), "exp", |v| v.exp())
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ln(x), "ln", |v| v.ln())
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x), "sqrt", |v| v.sqrt())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        if self.track_kinks {
            let sides: Vec<u8> = self.value(x).data().iter().map(|&v| (v >= T::zero()) as u8).collect();
            self.note_kinks(sides.into_iter());
        }
        self.unary(x, Op::Relu(x), "relu", |v| v.max(T::zero()))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        if self.track_kinks {
            let sides: Vec<u8> = self.value(x).data().iter().map(|&v| (v >= T::zero()) as u8).collect();
            self.note_kinks(sides.into_iter());
        }
        self.unary(x, Op::Abs(x), "abs", |v| v.abs())
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        if self.track_kinks {
            let sides: Vec<u8> = self
                .value(x)
                .data()
                .iter()
                .map(|&v| if v < lo { 0 } else if v > hi { 2 } else { 1 })
                .collect();
            self.note_kinks(sides.into_iter());
        }
        self.unary(x, Op::Clamp(x, lo, hi), "clamp", |v| v.max(lo).min(hi))
    }

    pub fn max_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        if self.track_kinks {
            let sides: Vec<u8> = self.value(x).data().iter().map(|&v| (v >= s) as u8).collect();
            self.note_kinks(sides.into_iter());
        }
        self.unary(x, Op::MaxScalar(x, s), "max_scalar", |v| v.max(s))
    }

    pub fn min_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        if self.track_kinks {
            let sides: Vec<u8> = self.value(x).data().iter().map(|&v| (v <= s) as u8).collect();
            self.note_kinks(sides.into_iter());
        }
        self.unary(x, Op::MinScalar(x, s), "min_scalar", |v| v.min(s))
    }

    // ---- linear algebra and convolution ---------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        self.finish(t, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// 2-D convolution. `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if opts.stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![sw[0]],
                });
            }
        }
        let geo = ConvGeometry::new(&sx, &sw, opts)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); geo.n * geo.cout * geo.out_hw()];
        out.par_chunks_mut(geo.cout * geo.out_hw())
            .enumerate()
            .for_each(|(n, out_n)| {
                let mut cols = vec![T::zero(); geo.col_rows() * geo.out_hw()];
                im2col(&xv[n * geo.in_image()..(n + 1) * geo.in_image()], &geo, &mut cols);
                T::gemm(false, false, geo.cout, geo.out_hw(), geo.col_rows(), T::one(), wv, &cols, T::zero(), out_n);
                if let Some(bv) = bv {
                    for (co, chunk) in out_n.chunks_mut(geo.out_hw()).enumerate() {
                        for v in chunk {
                            *v = *v + bv[co];
                        }
                    }
                }
            });
        let t = Tensor::new(vec![geo.n, geo.cout, geo.ho, geo.wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.finish(t, Op::Conv2d { x, w, b, opts }, &parents, "conv2d")
    }

    /// Non-overlapping `k x k` average pooling over the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("avg_pool2d with window {k}"),
            });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let inv = T::one() / c::<T>((k * k) as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); nc * ho * wo];
        for p in 0..nc {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc = acc + src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[p * ho * wo + oy * wo + ox] = acc * inv;
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        self.finish(t, Op::AvgPool2d(x, k), &[x], "avg_pool2d")
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.finish(t, Op::SumAll(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / c::<T>(n as f64))
    }

    /// Sum over `axes`, keeping them as size-1 extents when `keepdim`.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= s.len()) {
            return Err(Error::InvalidArgument(format!("sum_axes {axes:?} on shape {s:?}")));
        }
        let kept: Vec<usize> = s
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let summed = reduce_to_shape(self.value(x), &kept);
        let v = self.finish(summed, Op::SumAxes(x), &[x], "sum_axes")?;
        if keepdim {
            Ok(v)
        } else {
            let squeezed: Vec<usize> = s
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            self.reshape(v, &squeezed)
        }
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x).get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes, keepdim)?;
        self.scale(s, T::one() / c::<T>(count as f64))
    }

    /// Euclidean norm over the last axis.
    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (outer, inner) = match s.split_last() {
            Some((&last, rest)) => (numel(rest), last),
            None => (1, 1),
        };
        let xv = self.value(x).data();
        let out: Vec<T> = (0..outer)
            .map(|r| xv[r * inner..(r + 1) * inner].iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let shape = if s.is_empty() { vec![] } else { s[..s.len() - 1].to_vec() };
        let t = Tensor::new(shape, out)?;
        self.finish(t, Op::L2Norm(x), &[x], "l2norm")
    }

    /// `log(softmax(x))` over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let inner = *s.last().ok_or_else(|| Error::InvalidArgument("log_softmax on scalar".into()))?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (row, o) in xv.chunks(inner).zip(out.chunks_mut(inner)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = v - lse;
            }
        }
        let t = Tensor::new(s, out)?;
        self.finish(t, Op::LogSoftmax(x), &[x], "log_softmax")
    }

    // ---- shape manipulation -----------------------------------------------

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = crate::tensor::broadcast_to(self.value(x), shape)?;
        self.finish(t, Op::BroadcastTo(x), &[x], "broadcast_to")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.finish(t, Op::Reshape(x), &[x], "reshape")
    }

    /// Elements `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::OutOfRange {
                op: "slice",
                detail: format!("axis {axis} range {start}..{} on shape {s:?}", start + len),
            });
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&xv[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        self.finish(t, Op::Slice { x, axis, start }, &[x], "slice")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} on rank {}", first.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.finish(t, Op::Concat(xs.to_vec(), axis), xs, "concat")
    }

    // ---- normalization ------------------------------------------------------

    /// Batch normalization over every axis except axis 1.
    ///
    /// In training mode uses the batch's own statistics and returns them;
    /// otherwise normalizes with the supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: s,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (n, ch, sp) = (s[0], s[1], numel(&s[2..]));
        let m = n * sp;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); ch];
        let mut var_b = vec![T::zero(); ch];
        let train = running.is_none();
        match running {
            None => {
                if m < 2 {
                    return Err(Error::InvalidArgument("batch_norm needs at least 2 values per channel".into()));
                }
                for b in 0..n {
                    for cc in 0..ch {
                        let base = (b * ch + cc) * sp;
                        mean[cc] = mean[cc] + xv[base..base + sp].iter().copied().sum::<T>();
                    }
                }
                let inv_m = T::one() / c::<T>(m as f64);
                mean.iter_mut().for_each(|v| *v = *v * inv_m);
                for b in 0..n {
                    for cc in 0..ch {
                        let base = (b * ch + cc) * sp;
                        let mu = mean[cc];
                        var_b[cc] = var_b[cc] + xv[base..base + sp].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                }
                var_b.iter_mut().for_each(|v| *v = *v * inv_m);
            }
            Some((rm, rv)) => {
                if rm.len() != ch || rv.len() != ch {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm running stats",
                        lhs: vec![rm.len()],
                        rhs: vec![ch],
                    });
                }
                mean.copy_from_slice(rm);
                var_b.copy_from_slice(rv);
            }
        }
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for cc in 0..ch {
                let base = (b * ch + cc) * sp;
                for i in base..base + sp {
                    let h = (xv[i] - mean[cc]) * inv_std[cc];
                    xhat[i] = h;
                    out[i] = gv[cc] * h + bv[cc];
                }
            }
        }
        let stats = train.then(|| {
            let unbias = c::<T>(m as f64 / (m as f64 - 1.0));
            BatchStats {
                mean: mean.clone(),
                var: var_b.iter().map(|&v| v * unbias).collect(),
            }
        });
        let t = Tensor::new(s, out)?;
        let v = self.finish(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    // ---- backward -------------------------------------------------------------

    /// Populate gradients of `root` with respect to every node that requires
    /// them. `root` must hold a single element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let rv = self.value(root);
        if !(rv.numel() == 1 && rv.rank() <= 1) {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let root_shape = rv.shape().to_vec();
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::ones(&root_shape));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contribution: Tensor<T>, child: usize) -> Result<()> {
        if target.0 >= child {
            return Err(Error::GraphCycle(child));
        }
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        debug_assert_eq!(contribution.shape(), self.shape(target));
        match &mut self.grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of a broadcast binary op given the local partials.
    fn binary_grads(
        &self,
        a: Var,
        b: Var,
        out: usize,
        g: &Tensor<T>,
        partials: impl Fn(T, T, T) -> (T, T),
    ) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
        let out_shape = self.nodes[out].value.shape().to_vec();
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let oa = Offsets::new(&sa, &out_shape);
        let ob = Offsets::new(&sb, &out_shape);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let ov = self.nodes[out].value.data();
        let (wa, wb) = (self.wants(a), self.wants(b));
        let mut ga = if wa { vec![T::zero(); va.len()] } else { Vec::new() };
        let mut gb = if wb { vec![T::zero(); vb.len()] } else { Vec::new() };
        for (i, &gi) in g.data().iter().enumerate() {
            let (ia, ib) = (oa.at(i), ob.at(i));
            let (da, db) = partials(va[ia], vb[ib], ov[i]);
            if wa {
                ga[ia] = ga[ia] + da * gi;
            }
            if wb {
                gb[ib] = gb[ib] + db * gi;
            }
        }
        (
            wa.then(|| Tensor::new(sa, ga).expect("grad shape")),
            wb.then(|| Tensor::new(sb, gb).expect("grad shape")),
        )
    }

    fn unary_grad(&self, x: Var, out: usize, g: &Tensor<T>, d: impl Fn(T, T) -> T) -> Tensor<T> {
        let xv = self.value(x).data();
        let ov = self.nodes[out].value.data();
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi * d(xv[i], ov[i]))
            .collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("grad shape")
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        // Temporarily take the op so `self` can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, i: usize, op: &Op<T>, g: &Tensor<T>) -> Result<()> {
        let one = T::one();
        let zero = T::zero();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (ga, gb) = self.binary_grads(a, b, i, g, |_, _, _| (one, one));
                self.push_pair(a, ga, b, gb, i)?;
            }
            Op::Sub(a, b) => {
                let (ga, gb) = self.binary_grads(a, b, i, g, |_, _, _| (one, -one));
                self.push_pair(a, ga, b, gb, i)?;
            }
            Op::Mul(a, b) => {
                let (ga, gb) = self.binary_grads(a, b, i, g, |x, y, _| (y, x));
                self.push_pair(a, ga, b, gb, i)?;
            }
            Op::Div(a, b) => {
                let (ga, gb) = self.binary_grads(a, b, i, g, |_, y, o| (one / y, -o / y));
                self.push_pair(a, ga, b, gb, i)?;
            }
            Op::Pow(a, b) => {
                let (ga, gb) = self.binary_grads(a, b, i, g, |x, y, o| {
                    let dx = if x > zero {
                        y * o / x
                    } else if y == one {
                        one
                    } else {
                        zero
                    };
                    let dy = if x > zero { o * x.ln() } else { zero };
                    (dx, dy)
                });
                self.push_pair(a, ga, b, gb, i)?;
            }
            Op::PowScalar(x, p) => {
                let gx = self.unary_grad(x, i, g, |v, _| p * v.powf(p - one));
                self.accumulate(x, gx, i)?;
            }
            Op::Affine(x, s) => {
                let gx = g.map(|v| v * s);
                self.accumulate(x, gx, i)?;
            }
            Op::Exp(x) => {
                let gx = self.unary_grad(x, i, g, |_, o| o);
                self.accumulate(x, gx, i)?;
            }
            Op::Ln(x) => {
                let gx = self.unary_grad(x, i, g, |v, _| one / v);
                self.accumulate(x, gx, i)?;
            }
            Op::Sqrt(x) => {
                let half = c::<T>(0.5);
                let gx = self.unary_grad(x, i, g, |_, o| if o > zero { half / o } else { zero });
                self.accumulate(x, gx, i)?;
            }
            Op::Sigmoid(x) => {
                let gx = self.unary_grad(x, i, g, |_, o| o * (one - o));
                self.accumulate(x, gx, i)?;
            }
            Op::Relu(x) => {
                let gx = self.unary_grad(x, i, g, |v, _| if v >= zero { one } else { zero });
                self.accumulate(x, gx, i)?;
            }
            Op::Abs(x) => {
                let gx = self.unary_grad(x, i, g, |v, _| if v >= zero { one } else { -one });
                self.accumulate(x, gx, i)?;
            }
            Op::Clamp(x, lo, hi) => {
                let gx = self.unary_grad(x, i, g, |v, _| if v >= lo && v <= hi { one } else { zero });
                self.accumulate(x, gx, i)?;
            }
            Op::MaxScalar(x, s) => {
                let gx = self.unary_grad(x, i, g, |v, _| if v >= s { one } else { zero });
                self.accumulate(x, gx, i)?;
            }
            Op::MinScalar(x, s) => {
                let gx = self.unary_grad(x, i, g, |v, _| if v <= s { one } else { zero });
                self.accumulate(x, gx, i)?;
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(a) {
                    let mut ga = vec![zero; m * k];
                    T::gemm(false, true, m, k, n, one, g.data(), self.value(b).data(), zero, &mut ga);
                    self.accumulate(a, Tensor::new(sa, ga)?, i)?;
                }
                if self.wants(b) {
                    let mut gb = vec![zero; k * n];
                    T::gemm(true, false, k, n, m, one, self.value(a).data(), g.data(), zero, &mut gb);
                    self.accumulate(b, Tensor::new(sb, gb)?, i)?;
                }
            }
            Op::Conv2d { x, w, b, opts } => self.conv2d_backward(i, x, w, b, opts, g)?,
            Op::AvgPool2d(x, k) => {
                let s = self.shape(x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let inv = one / c::<T>((k * k) as f64);
                let gd = g.data();
                let mut gx = vec![zero; nc * h * w];
                for p in 0..nc {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gd[p * ho * wo + oy * wo + ox] * inv;
                            for dy in 0..k {
                                for dx in 0..k {
                                    gx[p * h * w + (oy * k + dy) * w + ox * k + dx] = gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, Tensor::new(s, gx)?, i)?;
            }
            Op::SumAll(x) => {
                let gx = Tensor::full(self.shape(x), g.item());
                self.accumulate(x, gx, i)?;
            }
            Op::SumAxes(x) => {
                let gx = crate::tensor::broadcast_to(g, self.shape(x))?;
                self.accumulate(x, gx, i)?;
            }
            Op::BroadcastTo(x) => {
                let gx = reduce_to_shape(g, self.shape(x));
                self.accumulate(x, gx, i)?;
            }
            Op::L2Norm(x) => {
                let s = self.shape(x).to_vec();
                let inner = s.last().copied().unwrap_or(1);
                let xv = self.value(x).data();
                let ov = self.nodes[i].value.data();
                let gd = g.data();
                let gx: Vec<T> = xv
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let r = j / inner;
                        if ov[r] > zero {
                            gd[r] * v / ov[r]
                        } else {
                            zero
                        }
                    })
                    .collect();
                self.accumulate(x, Tensor::new(s, gx)?, i)?;
            }
            Op::LogSoftmax(x) => {
                let s = self.shape(x).to_vec();
                let inner = *s.last().unwrap();
                let ov = self.nodes[i].value.data();
                let mut gx = vec![zero; ov.len()];
                for ((orow, grow), xrow) in ov.chunks(inner).zip(g.data().chunks(inner)).zip(gx.chunks_mut(inner)) {
                    let gsum: T = grow.iter().copied().sum();
                    for j in 0..inner {
                        xrow[j] = grow[j] - orow[j].exp() * gsum;
                    }
                }
                self.accumulate(x, Tensor::new(s, gx)?, i)?;
            }
            Op::Reshape(x) => {
                let gx = g.reshape(self.shape(x))?;
                self.accumulate(x, gx, i)?;
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(x).to_vec();
                let len = self.nodes[i].value.shape()[axis];
                let outer = numel(&s[..axis]);
                let inner = numel(&s[axis + 1..]);
                let mut gx = vec![zero; numel(&s)];
                for o in 0..outer {
                    let dst = o * s[axis] * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(x, Tensor::new(s, gx)?, i)?;
            }
            Op::Concat(ref xs, axis) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer = numel(&out_shape[..axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let total = out_shape[axis];
                let mut offset = 0;
                for &v in xs {
                    let s = self.shape(v).to_vec();
                    let len = s[axis];
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(numel(&s));
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gv.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(v, Tensor::new(s, gv)?, i)?;
                    }
                    offset += len;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                train,
            } => {
                let s = self.shape(x).to_vec();
                let (n, ch, sp) = (s[0], s[1], numel(&s[2..]));
                let m = c::<T>((n * sp) as f64);
                let gd = g.data();
                let mut sum_g = vec![zero; ch];
                let mut sum_gx = vec![zero; ch];
                for b in 0..n {
                    for cc in 0..ch {
                        let base = (b * ch + cc) * sp;
                        for j in base..base + sp {
                            sum_g[cc] = sum_g[cc] + gd[j];
                            sum_gx[cc] = sum_gx[cc] + gd[j] * xhat[j];
                        }
                    }
                }
                if self.wants(beta) {
                    self.accumulate(beta, Tensor::new(vec![ch], sum_g.clone())?, i)?;
                }
                if self.wants(gamma) {
                    self.accumulate(gamma, Tensor::new(vec![ch], sum_gx.clone())?, i)?;
                }
                if self.wants(x) {
                    let gv = self.value(gamma).data().to_vec();
                    let mut gx = vec![zero; gd.len()];
                    for b in 0..n {
                        for cc in 0..ch {
                            let base = (b * ch + cc) * sp;
                            let k = gv[cc] * inv_std[cc];
                            for j in base..base + sp {
                                gx[j] = if train {
                                    k * (gd[j] - sum_g[cc] / m - xhat[j] * sum_gx[cc] / m)
                                } else {
                                    k * gd[j]
                                };
                            }
                        }
                    }
                    self.accumulate(x, Tensor::new(s, gx)?, i)?;
                }
            }
        }
        Ok(())
    }

    fn push_pair(&mut self, a: Var, ga: Option<Tensor<T>>, b: Var, gb: Option<Tensor<T>>, i: usize) -> Result<()> {
        if let Some(ga) = ga {
            self.accumulate(a, ga, i)?;
        }
        if let Some(gb) = gb {
            self.accumulate(b, gb, i)?;
        }
        Ok(())
    }

    fn conv2d_backward(&mut self, i: usize, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts, g: &Tensor<T>) -> Result<()> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geo = ConvGeometry::new(&sx, &sw, opts)?;
        let gd = g.data();
        let out_img = geo.cout * geo.out_hw();
        if let Some(b) = b {
            if self.wants(b) {
                let mut gb = vec![T::zero(); geo.cout];
                for n in 0..geo.n {
                    for (co, gbv) in gb.iter_mut().enumerate() {
                        let base = n * out_img + co * geo.out_hw();
                        *gbv = *gbv + gd[base..base + geo.out_hw()].iter().copied().sum::<T>();
                    }
                }
                self.accumulate(b, Tensor::new(vec![geo.cout], gb)?, i)?;
            }
        }
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        if !want_x && !want_w {
            return Ok(());
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut gx = if want_x { vec![T::zero(); xv.len()] } else { vec![T::zero(); geo.n] };
        let chunk = if want_x { geo.in_image() } else { 1 };
        let partial_w: Vec<Vec<T>> = gx
            .par_chunks_mut(chunk)
            .enumerate()
            .map(|(n, gx_n)| {
                let g_n = &gd[n * out_img..(n + 1) * out_img];
                let mut cols = vec![T::zero(); geo.col_rows() * geo.out_hw()];
                let mut gw_n = Vec::new();
                if want_w {
                    im2col(&xv[n * geo.in_image()..(n + 1) * geo.in_image()], &geo, &mut cols);
                    gw_n = vec![T::zero(); wv.len()];
                    T::gemm(false, true, geo.cout, geo.col_rows(), geo.out_hw(), T::one(), g_n, &cols, T::zero(), &mut gw_n);
                }
                if want_x {
                    T::gemm(true, false, geo.col_rows(), geo.out_hw(), geo.cout, T::one(), wv, g_n, T::zero(), &mut cols);
                    col2im(&cols, &geo, gx_n);
                }
                gw_n
            })
            .collect();
        if want_w {
            let mut gw = vec![T::zero(); wv.len()];
            for p in &partial_w {
                for (a, &v) in gw.iter_mut().zip(p) {
                    *a = *a + v;
                }
            }
            self.accumulate(w, Tensor::new(sw, gw)?, i)?;
        }
        if want_x {
            self.accumulate(x, Tensor::new(sx, gx)?, i)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], opts: Conv2dOpts) -> Result<Self> {
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let (ph, pw) = (h + 2 * opts.padding, w + 2 * opts.padding);
        if ph < k || pw < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d kernel larger than padded input",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride: opts.stride,
            pad: opts.padding,
            ho: (ph - k) / opts.stride + 1,
            wo: (pw - k) / opts.stride + 1,
        })
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    fn in_image(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Element>(x: &[T], geo: &ConvGeometry, cols: &mut [T]) {
    let ohw = geo.out_hw();
    for ci in 0..geo.cin {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (ci * geo.k + ky) * geo.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..geo.ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    let line = &mut dst[oy * geo.wo..(oy + 1) * geo.wo];
                    if iy < 0 || iy >= geo.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * geo.h + iy as usize) * geo.w..(ci * geo.h + iy as usize + 1) * geo.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        *v = if ix < 0 || ix >= geo.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], geo: &ConvGeometry, x: &mut [T]) {
    let ohw = geo.out_hw();
    for ci in 0..geo.cin {
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = (ci * geo.k + ky) * geo.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..geo.ho {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let base = (ci * geo.h + iy as usize) * geo.w;
                    for ox in 0..geo.wo {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            x[base + ix as usize] = x[base + ix as usize] + src[oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
