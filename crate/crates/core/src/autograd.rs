//! Tape-based reverse-mode autodiff over NHWC tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so reverse iteration is a valid topological order for
//! [`Graph::backward`].

use crate::tensor::{Float, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cout: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Upsample2x(Var),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    LeakyRelu(Var, T),
    Tanh(Var),
    Abs(Var),
    Softplus(Var),
    Mean(Var),
    Sum(Var),
    GlobalAvgPool(Var),
    GroupMean(Var, usize),
    ConcatLast(Var, Var),
    Crop { x: Var, origins: Vec<(usize, usize)>, size: usize },
    Reshape(Var),
    ConcatBatch(Vec<Var>),
    SliceBatch { x: Var, start: usize },
    PermuteBatch(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    frozen: Option<(Vec<bool>, usize)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn leading(shape: &[usize]) -> usize {
    shape[0]
}

fn inner(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), frozen: None }
    }

    /// A tape whose leaky relu and abs nodes take their branch from `pattern`
    /// (as produced by [`Graph::kink_pattern`]) instead of the sign of their input.
    /// Building the same expression then evaluates the smooth piece the pattern
    /// came from. Forward values only; gradients still follow the input signs.
    pub fn with_kink_pattern(pattern: Vec<bool>) -> Self {
        Self { nodes: Vec::new(), frozen: Some((pattern, 0)) }
    }

    fn branches(&mut self, a: Var) -> Vec<bool> {
        let x = self.nodes[a.0].value.data();
        match &mut self.frozen {
            None => x.iter().map(|&v| v > T::zero()).collect(),
            Some((pattern, at)) => {
                let end = *at + x.len();
                assert!(end <= pattern.len(), "kink pattern is shorter than the expression");
                let b = pattern[*at..end].to_vec();
                *at = end;
                b
            }
        }
    }

    fn piecewise(&self, a: Var, pos: &[bool], f: impl Fn(T, bool) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::new(x.shape(), x.data().iter().zip(pos).map(|(&v, &p)| f(v, p)).collect())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Which side of zero every input to a non-differentiable point (leaky relu,
    /// abs) sits on. Two evaluations with equal patterns lie in the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut signs = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu(a, _) | Op::Abs(a) = node.op {
                signs.extend(self.nodes[a.0].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        signs
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let pos = self.branches(a);
        let out = self.piecewise(a, &pos, |x, p| if p { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let pos = self.branches(a);
        let out = self.piecewise(a, &pos, |x, p| if p { x } else { -x });
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(out, Op::Reshape(a), &[a])
    }

    /// 2-D convolution. `x` is (N,H,W,Cin), `w` is (k,k,Cin,Cout), `b` is (Cout).
    /// Zero padding of `pad` pixels on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 4, "conv2d input must be NHWC");
        assert_eq!(ws.len(), 4, "conv2d weight must be (k,k,cin,cout)");
        assert_eq!(ws[0], ws[1], "square kernels only");
        assert_eq!(ws[2], xs[3], "conv2d channel mismatch: input {} weight {}", xs[3], ws[2]);
        let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, cout) = (ws[0], ws[3]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel larger than padded input");
        let geom =
            ConvGeom { n, h, w: wd, cin, k, stride, pad, ho: (h + 2 * pad - k) / stride + 1, wo: (wd + 2 * pad - k) / stride + 1, cout };
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * cout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        T::gemm(geom.rows(), geom.patch(), cout, &cols, false, self.value(w).data(), false, &mut out, true);
        let value = Tensor::new(&[n, geom.ho, geom.wo, cout], out);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    /// Nearest-neighbour 2× upsampling of an NHWC tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let si = ((b * h + y / 2) * w + xx / 2) * c;
                    let di = ((b * 2 * h + y) * 2 * w + xx) * c;
                    out[di..di + c].copy_from_slice(&src[si..si + c]);
                }
            }
        }
        self.push(Tensor::new(&[n, 2 * h, 2 * w, c], out), Op::Upsample2x(x), &[x])
    }

    /// `y[n,h,w,c] = x[n,h,w,c] * scale[n,c] + shift[n,c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c) = (s[0], s[3]);
        assert_eq!(self.shape(scale), &[n, c], "scale shape");
        assert_eq!(self.shape(shift), &[n, c], "shift shape");
        let hw = s[1] * s[2];
        let (xv, sc, sh) = (self.value(x).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            let (sc, sh) = (&sc[b * c..(b + 1) * c], &sh[b * c..(b + 1) * c]);
            for p in 0..hw {
                let base = (b * hw + p) * c;
                for ch in 0..c {
                    out[base + ch] = xv[base + ch] * sc[ch] + sh[ch];
                }
            }
        }
        self.push(Tensor::new(&s, out), Op::ChannelAffine { x, scale, shift }, &[x, scale, shift])
    }

    /// Normalizes every (sample, channel) plane of `x` to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let s = self.shape(x).to_vec();
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let xv = self.value(x).data();
        let inv_hw = T::one() / T::from_usize(hw).unwrap();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for b in 0..n {
            let plane = &xv[b * hw * c..(b + 1) * hw * c];
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for px in plane.chunks_exact(c) {
                for (m, &v) in mean.iter_mut().zip(px) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_hw);
            for px in plane.chunks_exact(c) {
                for ((q, &m), &v) in var.iter_mut().zip(&mean).zip(px) {
                    *q += (v - m) * (v - m);
                }
            }
            let inv = &mut inv_std[b * c..(b + 1) * c];
            for (i, q) in inv.iter_mut().zip(&var) {
                *i = T::one() / (*q * inv_hw + eps).sqrt();
            }
            for (o, px) in out[b * hw * c..(b + 1) * hw * c].chunks_exact_mut(c).zip(plane.chunks_exact(c)) {
                for ch in 0..c {
                    o[ch] = (px[ch] - mean[ch]) * inv[ch];
                }
            }
        }
        self.push(Tensor::new(&s, out), Op::InstanceNorm { x, inv_std }, &[x])
    }

    /// `x` (N,I) times `w` (I,O) plus `b` (O).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 2, "linear input must be (N, I)");
        assert_eq!(xs[1], ws[0], "linear shape mismatch");
        let (n, i, o) = (xs[0], ws[0], ws[1]);
        let mut out = vec![T::zero(); n * o];
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bias);
        }
        T::gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        self.push(Tensor::new(&[n, o], out), Op::Linear { x, w, b }, &[x, w, b])
    }

    /// (N,H,W,C) → (N,C).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let xv = self.value(x).data();
        let inv = T::one() / T::from_usize(hw).unwrap();
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for p in 0..hw {
                let base = (b * hw + p) * c;
                for ch in 0..c {
                    out[b * c + ch] += xv[base + ch];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(&[n, c], out), Op::GlobalAvgPool(x), &[x])
    }

    /// (N·G, F) → (N, F), averaging each run of `groups` consecutive rows.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        assert!(groups > 0 && s[0].is_multiple_of(groups), "rows not divisible into groups");
        let (n, f) = (s[0] / groups, s[1]);
        let xv = self.value(x).data();
        let inv = T::one() / T::from_usize(groups).unwrap();
        let mut out = vec![T::zero(); n * f];
        for b in 0..n {
            for g in 0..groups {
                let src = &xv[(b * groups + g) * f..(b * groups + g + 1) * f];
                for (o, &v) in out[b * f..(b + 1) * f].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(&[n, f], out), Op::GroupMean(x, groups), &[x])
    }

    /// Concatenates two (N,A) and (N,B) matrices into (N,A+B).
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[0], sb[0], "concat row mismatch");
        let (n, fa, fb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (fa + fb));
        for r in 0..n {
            out.extend_from_slice(&av[r * fa..(r + 1) * fa]);
            out.extend_from_slice(&bv[r * fb..(r + 1) * fb]);
        }
        self.push(Tensor::new(&[n, fa + fb], out), Op::ConcatLast(a, b), &[a, b])
    }

    /// Square crops of side `size`, one origin (row, col) per batch entry.
    pub fn crop(&mut self, x: Var, origins: Vec<(usize, usize)>, size: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        assert_eq!(origins.len(), n, "one crop origin per sample");
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * size * size * c);
        for (b, &(oy, ox)) in origins.iter().enumerate() {
            assert!(oy + size <= h && ox + size <= w, "crop out of bounds");
            for y in 0..size {
                let base = ((b * h + oy + y) * w + ox) * c;
                out.extend_from_slice(&xv[base..base + size * c]);
            }
        }
        self.push(Tensor::new(&[n, size, size, c], out), Op::Crop { x, origins, size }, &[x])
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat_batch shape mismatch");
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(Tensor::new(&shape, data), Op::ConcatBatch(parts.to_vec()), parts)
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[0], "batch slice out of range");
        let step = inner(&s);
        let data = self.value(x).data()[start * step..(start + len) * step].to_vec();
        let mut shape = s;
        shape[0] = len;
        self.push(Tensor::new(&shape, data), Op::SliceBatch { x, start }, &[x])
    }

    /// `out[i] = x[perm[i]]` along the batch axis.
    pub fn permute_batch(&mut self, x: Var, perm: Vec<usize>) -> Var {
        let s = self.shape(x).to_vec();
        let step = inner(&s);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(perm.len() * step);
        for &p in &perm {
            data.extend_from_slice(&xv[p * step..(p + 1) * step]);
        }
        let mut shape = s;
        shape[0] = perm.len();
        self.push(Tensor::new(&shape, data), Op::PermuteBatch(x, perm), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, gy.zip_map(self.value(*b), |g, y| g * y));
                }
                if self.wants(*b) {
                    acc(grads, *b, gy.zip_map(self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale(a, s) => acc(grads, *a, gy.map(|g| g * *s)),
            Op::Offset(a) | Op::Reshape(a) => {
                let g = gy.clone().reshape(self.value(*a).shape());
                acc(grads, *a, g)
            }
            Op::LeakyRelu(a, slope) => {
                let g = gy.zip_map(self.value(*a), |g, x| if x > T::zero() { g } else { g * *slope });
                acc(grads, *a, g)
            }
            Op::Tanh(a) => acc(grads, *a, gy.zip_map(&node.value, |g, y| g * (T::one() - y * y))),
            Op::Abs(a) => {
                let g = gy.zip_map(self.value(*a), |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                acc(grads, *a, g)
            }
            Op::Softplus(a) => acc(grads, *a, gy.zip_map(self.value(*a), |g, x| g * sigmoid(x))),
            Op::Mean(a) => {
                let v = self.value(*a);
                let g = gy.item() / T::from_usize(v.len()).unwrap();
                acc(grads, *a, Tensor::full(v.shape(), g))
            }
            Op::Sum(a) => acc(grads, *a, Tensor::full(self.value(*a).shape(), gy.item())),
            Op::Conv2d { x, w, b, geom, cols } => {
                let g = gy.data();
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); geom.patch() * geom.cout];
                    T::gemm(geom.patch(), geom.rows(), geom.cout, cols, true, g, false, &mut gw, false);
                    acc(grads, *w, Tensor::new(self.value(*w).shape(), gw));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); geom.cout];
                    for row in g.chunks(geom.cout) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(grads, *b, Tensor::new(&[geom.cout], gb));
                }
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); geom.rows() * geom.patch()];
                    T::gemm(geom.rows(), geom.cout, geom.patch(), g, false, self.value(*w).data(), true, &mut gcols, false);
                    let gx = col2im(&gcols, geom);
                    acc(grads, *x, Tensor::new(&[geom.n, geom.h, geom.w, geom.cin], gx));
                }
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let g = gy.data();
                let mut gx = vec![T::zero(); n * h * w * c];
                for bi in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let si = ((bi * 2 * h + y) * 2 * w + xx) * c;
                            let di = ((bi * h + y / 2) * w + xx / 2) * c;
                            for ch in 0..c {
                                gx[di + ch] += g[si + ch];
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::new(s, gx));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let s = self.value(*x).shape();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let (g, xv, sc) = (gy.data(), self.value(*x).data(), self.value(*scale).data());
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for bi in 0..n {
                        for p in 0..hw {
                            let base = (bi * hw + p) * c;
                            for ch in 0..c {
                                gx[base + ch] = g[base + ch] * sc[bi * c + ch];
                            }
                        }
                    }
                    acc(grads, *x, Tensor::new(s, gx));
                }
                let mut gsc = vec![T::zero(); n * c];
                let mut gsh = vec![T::zero(); n * c];
                for bi in 0..n {
                    for p in 0..hw {
                        let base = (bi * hw + p) * c;
                        for ch in 0..c {
                            gsc[bi * c + ch] += g[base + ch] * xv[base + ch];
                            gsh[bi * c + ch] += g[base + ch];
                        }
                    }
                }
                acc(grads, *scale, Tensor::new(&[n, c], gsc));
                acc(grads, *shift, Tensor::new(&[n, c], gsh));
            }
            Op::InstanceNorm { x, inv_std } => {
                let s = gy.shape();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let inv_hw = T::one() / T::from_usize(hw).unwrap();
                let (g, y) = (gy.data(), node.value.data());
                let mut gx = vec![T::zero(); g.len()];
                for b in 0..n {
                    let range = b * hw * c..(b + 1) * hw * c;
                    let (gb, yb) = (&g[range.clone()], &y[range.clone()]);
                    let mut mg = vec![T::zero(); c];
                    let mut mgy = vec![T::zero(); c];
                    for (gp, yp) in gb.chunks_exact(c).zip(yb.chunks_exact(c)) {
                        for ch in 0..c {
                            mg[ch] += gp[ch];
                            mgy[ch] += gp[ch] * yp[ch];
                        }
                    }
                    let inv = &inv_std[b * c..(b + 1) * c];
                    for ((o, gp), yp) in gx[range].chunks_exact_mut(c).zip(gb.chunks_exact(c)).zip(yb.chunks_exact(c)) {
                        for ch in 0..c {
                            o[ch] = inv[ch] * (gp[ch] - mg[ch] * inv_hw - yp[ch] * mgy[ch] * inv_hw);
                        }
                    }
                }
                acc(grads, *x, Tensor::new(s, gx));
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(*w).shape();
                let (n, i, o) = (gy.shape()[0], ws[0], ws[1]);
                let g = gy.data();
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); n * i];
                    T::gemm(n, o, i, g, false, self.value(*w).data(), true, &mut gx, false);
                    acc(grads, *x, Tensor::new(&[n, i], gx));
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); i * o];
                    T::gemm(i, n, o, self.value(*x).data(), true, g, false, &mut gw, false);
                    acc(grads, *w, Tensor::new(&[i, o], gw));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        for (d, &v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(grads, *b, Tensor::new(&[o], gb));
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let inv = T::one() / T::from_usize(hw).unwrap();
                let g = gy.data();
                let mut gx = vec![T::zero(); n * hw * c];
                for bi in 0..n {
                    for p in 0..hw {
                        let base = (bi * hw + p) * c;
                        for ch in 0..c {
                            gx[base + ch] = g[bi * c + ch] * inv;
                        }
                    }
                }
                acc(grads, *x, Tensor::new(s, gx));
            }
            Op::GroupMean(x, groups) => {
                let s = self.value(*x).shape();
                let f = s[1];
                let inv = T::one() / T::from_usize(*groups).unwrap();
                let g = gy.data();
                let mut gx = vec![T::zero(); s[0] * f];
                for r in 0..s[0] {
                    let src = &g[(r / groups) * f..(r / groups + 1) * f];
                    for (d, &v) in gx[r * f..(r + 1) * f].iter_mut().zip(src) {
                        *d = v * inv;
                    }
                }
                acc(grads, *x, Tensor::new(s, gx));
            }
            Op::ConcatLast(a, b) => {
                let (fa, fb) = (self.value(*a).shape()[1], self.value(*b).shape()[1]);
                let n = gy.shape()[0];
                let g = gy.data();
                let mut ga = Vec::with_capacity(n * fa);
                let mut gb = Vec::with_capacity(n * fb);
                for r in 0..n {
                    let row = &g[r * (fa + fb)..(r + 1) * (fa + fb)];
                    ga.extend_from_slice(&row[..fa]);
                    gb.extend_from_slice(&row[fa..]);
                }
                acc(grads, *a, Tensor::new(&[n, fa], ga));
                acc(grads, *b, Tensor::new(&[n, fb], gb));
            }
            Op::Crop { x, origins, size } => {
                let s = self.value(*x).shape();
                let (h, w, c) = (s[1], s[2], s[3]);
                let g = gy.data();
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (bi, &(oy, ox)) in origins.iter().enumerate() {
                    for y in 0..*size {
                        let dst = ((bi * h + oy + y) * w + ox) * c;
                        let src = ((bi * size + y) * size) * c;
                        for (d, &v) in gx[dst..dst + size * c].iter_mut().zip(&g[src..src + size * c]) {
                            *d += v;
                        }
                    }
                }
                acc(grads, *x, Tensor::new(s, gx));
            }
            Op::ConcatBatch(parts) => {
                let g = gy.data();
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(grads, p, Tensor::new(self.value(p).shape(), g[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            Op::SliceBatch { x, start } => {
                let s = self.value(*x).shape();
                let step = inner(s);
                let mut gx = vec![T::zero(); self.value(*x).len()];
                gx[start * step..start * step + gy.len()].copy_from_slice(gy.data());
                acc(grads, *x, Tensor::new(s, gx));
            }
            Op::PermuteBatch(x, perm) => {
                let s = self.value(*x).shape();
                let step = inner(s);
                let g = gy.data();
                let mut gx = vec![T::zero(); leading(s) * step];
                for (i, &p) in perm.iter().enumerate() {
                    for (d, &v) in gx[p * step..(p + 1) * step].iter_mut().zip(&g[i * step..(i + 1) * step]) {
                        *d += v;
                    }
                }
                acc(grads, *x, Tensor::new(s, gx));
            }
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.k + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.cin];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * patch;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.k + kx) * g.cin;
                        for (d, &v) in x[dst..dst + g.cin].iter_mut().zip(&cols[src..src + g.cin]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}
