//! Reverse-mode differentiation over a per-sample tape.
//!
//! Activations are channel-major `[C, H, W]` without a batch axis; a batch is
//! a set of independent tapes. Leaves may borrow their data (model
//! parameters) so building a graph never copies weights.

use std::borrow::Cow;

use crate::attention;
use crate::scalar::Scalar;
use crate::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, k: usize, stride: usize, cols: Vec<T> },
    AddBias { x: Var, b: Var },
    Add { a: Var, b: Var },
    Relu { x: Var },
    Phi { x: Var },
    MaxPool2 { x: Var, arg: Vec<u32> },
    Upsample2 { x: Var },
    Concat { a: Var, b: Var },
    Gca { f1: Var, f2: Var, p: Vec<T> },
    Lca { f1: Var, f2: Var, window: usize, p: Vec<T> },
    LinAttn { q: Var, k: Var, v: Var, heads: usize, state: attention::LinearAttnState<T> },
    SoftmaxCe { logits: Var, target: Vec<u8>, probs: Vec<T> },
    WeightedSum { x: Var, w: Vec<T> },
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> NnError {
    NnError::Shape(format!("{op}: {a:?} vs {b:?}"))
}

fn chw(op: &str, s: &[usize]) -> Result<(usize, usize, usize), NnError> {
    match *s {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(NnError::Shape(format!("{op}: expected [C, H, W], got {s:?}"))),
    }
}

/// Output positions `o` in `0..out` whose input index `o*s + t - p` lies in `0..len`.
fn valid_range(out: usize, len: usize, t: usize, s: usize, p: usize) -> std::ops::Range<usize> {
    let lo = if p > t { (p - t).div_ceil(s) } else { 0 };
    let hi = if len + p > t { ((len + p - t - 1) / s + 1).min(out) } else { 0 };
    lo..hi.max(lo)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, s: usize, ho: usize, wo: usize) -> Vec<T> {
    let p = k / 2;
    let n = ho * wo;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            let ys = valid_range(ho, h, ky, s, p);
            for kx in 0..k {
                let xs = valid_range(wo, w, kx, s, p);
                if xs.is_empty() {
                    continue;
                }
                let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                let ix0 = xs.start * s + kx - p;
                for oy in ys.clone() {
                    let src = &x[ci * h * w + (oy * s + ky - p) * w..][..w];
                    let dst = &mut row[oy * wo + xs.start..oy * wo + xs.end];
                    if s == 1 {
                        dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                    } else {
                        dst.iter_mut().zip(src[ix0..].iter().step_by(s)).for_each(|(d, &v)| *d = v);
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, s: usize, ho: usize, wo: usize, dx: &mut [T]) {
    let p = k / 2;
    let n = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            let ys = valid_range(ho, h, ky, s, p);
            for kx in 0..k {
                let xs = valid_range(wo, w, kx, s, p);
                if xs.is_empty() {
                    continue;
                }
                let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                let ix0 = xs.start * s + kx - p;
                for oy in ys.clone() {
                    let dst = &mut dx[ci * h * w + (oy * s + ky - p) * w..][..w];
                    let src = &row[oy * wo + xs.start..oy * wo + xs.end];
                    if s == 1 {
                        dst[ix0..ix0 + src.len()].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    } else {
                        dst[ix0..].iter_mut().step_by(s).zip(src).for_each(|(d, &v)| *d += v);
                    }
                }
            }
        }
    }
}

fn conv_out(h: usize, k: usize, s: usize) -> usize {
    (h + 2 * (k / 2) - k) / s + 1
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Softmax weights saved by a `gca` (`[N, N]`) or `lca` (`[N, window²]`)
    /// node.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Gca { p, .. } | Op::Lca { p, .. } => Some(p),
            _ => None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { shape, value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, needs_grad: bool) -> Result<Var, NnError> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(NnError::Shape(format!("leaf: shape {shape:?} holds {n} values, got {}", value.len())));
        }
        self.nodes.push(Node { shape, value, op: Op::Leaf, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var, NnError> {
        self.leaf(shape.to_vec(), Cow::Owned(value), false)
    }

    /// Differentiable leaf borrowing its data.
    pub fn param(&mut self, shape: &[usize], value: &'a [T]) -> Result<Var, NnError> {
        self.leaf(shape.to_vec(), Cow::Borrowed(value), true)
    }

    /// Differentiable leaf owning its data.
    pub fn input(&mut self, shape: &[usize], value: Vec<T>) -> Result<Var, NnError> {
        self.leaf(shape.to_vec(), Cow::Owned(value), true)
    }

    /// Convolution with a square odd kernel `w: [Co, Ci, k, k]`, zero
    /// padding `k/2` and stride 1 or 2.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, NnError> {
        let (ci, h, wd) = chw("conv2d", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != ci || ws[2] != ws[3] || ws[2] % 2 == 0 || !(1..=2).contains(&stride) {
            return Err(shape_err("conv2d", self.shape(x), &ws));
        }
        let (co, k) = (ws[0], ws[2]);
        let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
        let n = ho * wo;
        let cols = if k == 1 && stride == 1 { Vec::new() } else { im2col(self.value(x), ci, h, wd, k, stride, ho, wo) };
        let src: &[T] = if cols.is_empty() { self.value(x) } else { &cols };
        let mut out = vec![T::zero(); co * n];
        T::gemm(co, ci * k * k, n, T::one(), self.value(w), false, src, false, T::zero(), &mut out);
        Ok(self.push(vec![co, ho, wo], out, Op::Conv2d { x, w, k, stride, cols }, &[x, w]))
    }

    /// Adds a per-channel bias `b: [C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (c, h, w) = chw("add_bias", self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let n = h * w;
        let mut out = self.value(x).to_vec();
        for (row, &bv) in out.chunks_exact_mut(n).zip(self.value(b)) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(vec![c, h, w], out, Op::AddBias { x, b }, &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu { x }, &[x])
    }

    /// Elementwise `elu(u) + 1`.
    pub fn phi(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| attention::phi(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Phi { x }, &[x])
    }

    /// 2x2 max pooling with stride 2; first maximum wins ties.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, NnError> {
        let (c, h, w) = chw("maxpool2", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::Shape(format!("maxpool2: odd spatial size {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![T::zero(); c * ho * wo];
        let mut arg = vec![0u32; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    let o = ch * ho * wo + oy * wo + ox;
                    out[o] = xv[best];
                    arg[o] = best as u32;
                }
            }
        }
        Ok(self.push(vec![c, ho, wo], out, Op::MaxPool2 { x, arg }, &[x]))
    }

    /// 2x nearest-neighbor upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, NnError> {
        let (c, h, w) = chw("upsample2", self.shape(x))?;
        let xv = self.value(x);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[ch * ho * wo + y * wo + xx] = xv[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![c, ho, wo], out, Op::Upsample2 { x }, &[x]))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ca, h, w) = chw("concat", self.shape(a))?;
        let (cb, hb, wb) = chw("concat", self.shape(b))?;
        if (h, w) != (hb, wb) {
            return Err(shape_err("concat", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        Ok(self.push(vec![ca + cb, h, w], out, Op::Concat { a, b }, &[a, b]))
    }

    fn pair_shapes(&self, op: &str, f1: Var, f2: Var) -> Result<(usize, usize, usize), NnError> {
        let s = chw(op, self.shape(f1))?;
        if self.shape(f1) != self.shape(f2) {
            return Err(shape_err(op, self.shape(f1), self.shape(f2)));
        }
        Ok(s)
    }

    /// Global cross-attention; returns the attended map `[C, H, W]` (not
    /// concatenated with `f1`).
    pub fn gca(&mut self, f1: Var, f2: Var) -> Result<Var, NnError> {
        let (c, h, w) = self.pair_shapes("gca", f1, f2)?;
        let (att, p) = attention::gca_forward(self.value(f1), self.value(f2), c, h * w);
        Ok(self.push(vec![c, h, w], att, Op::Gca { f1, f2, p }, &[f1, f2]))
    }

    /// Local cross-attention within an odd `window`.
    pub fn lca(&mut self, f1: Var, f2: Var, window: usize) -> Result<Var, NnError> {
        let (c, h, w) = self.pair_shapes("lca", f1, f2)?;
        if window % 2 == 0 || window == 0 {
            return Err(NnError::InvalidArgument(format!("lca window must be odd, got {window}")));
        }
        let (att, p) = attention::lca_forward(self.value(f1), self.value(f2), c, h, w, window);
        Ok(self.push(vec![c, h, w], att, Op::Lca { f1, f2, window, p }, &[f1, f2]))
    }

    /// Kernelized attention core on feature-mapped `q`, `k` and values `v`.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, NnError> {
        let (c, h, w) = self.pair_shapes("linear_attention", q, k)?;
        if self.shape(v) != self.shape(q) {
            return Err(shape_err("linear_attention", self.shape(q), self.shape(v)));
        }
        if heads == 0 || c % heads != 0 {
            return Err(NnError::InvalidArgument(format!("{heads} heads do not divide {c} channels")));
        }
        let state = attention::linear_attention_forward(self.value(q), self.value(k), self.value(v), c, h * w, heads);
        let out = state.out.clone();
        Ok(self.push(vec![c, h, w], out, Op::LinAttn { q, k, v, heads, state }, &[q, k, v]))
    }

    /// Mean per-pixel softmax cross-entropy of `[K, H, W]` logits against
    /// class labels; returns a scalar node.
    pub fn softmax_ce(&mut self, logits: Var, target: &[u8]) -> Result<Var, NnError> {
        let (k, h, w) = chw("softmax_ce", self.shape(logits))?;
        let n = h * w;
        if target.len() != n || target.iter().any(|&t| t as usize >= k) {
            return Err(NnError::Shape(format!("softmax_ce: {} labels for {k}x{n} logits", target.len())));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); k * n];
        let mut loss = T::zero();
        for i in 0..n {
            let m = (0..k).map(|c| lv[c * n + i]).fold(T::neg_infinity(), T::max);
            let sum: T = (0..k).map(|c| (lv[c * n + i] - m).exp()).sum();
            for c in 0..k {
                probs[c * n + i] = (lv[c * n + i] - m).exp() / sum;
            }
            loss += sum.ln() + m - lv[target[i] as usize * n + i];
        }
        loss = loss / T::c(n as f64);
        Ok(self.push(vec![], vec![loss], Op::SoftmaxCe { logits, target: target.to_vec(), probs }, &[logits]))
    }

    /// `Σ w_i x_i` as a scalar; used to reduce tensors for checks.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var, NnError> {
        if w.len() != self.value(x).len() {
            return Err(NnError::Shape(format!("weighted_sum: {} weights for {:?}", w.len(), self.shape(x))));
        }
        let s = self.value(x).iter().zip(&w).map(|(&a, &b)| a * b).sum();
        Ok(self.push(vec![], vec![s], Op::WeightedSum { x, w }, &[x]))
    }

    /// Reverse pass from scalar `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.len()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        let shp = |v: Var| -> &[usize] { &self.nodes[v.0].shape };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, k, stride, cols } => {
                let (ci, h, wd) = (shp(*x)[0], shp(*x)[1], shp(*x)[2]);
                let (co, ho, wo) = (node.shape[0], node.shape[1], node.shape[2]);
                let (kk, n) = (ci * k * k, ho * wo);
                let src: &[T] = if cols.is_empty() { val(*x) } else { cols };
                if wants(*w) {
                    T::gemm(co, n, kk, T::one(), g, false, src, true, T::one(), acc!(*w));
                }
                if wants(*x) {
                    if cols.is_empty() {
                        T::gemm(kk, co, n, T::one(), val(*w), true, g, false, T::one(), acc!(*x));
                    } else {
                        let mut dcols = vec![T::zero(); kk * n];
                        T::gemm(kk, co, n, T::one(), val(*w), true, g, false, T::zero(), &mut dcols);
                        col2im(&dcols, ci, h, wd, *k, *stride, ho, wo, acc!(*x));
                    }
                }
            }
            Op::AddBias { x, b } => {
                let n = node.shape[1] * node.shape[2];
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if wants(*b) {
                    for (d, row) in acc!(*b).iter_mut().zip(g.chunks_exact(n)) {
                        *d += row.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let xv = val(*x);
                    for ((d, &gv), &xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Phi { x } => {
                if wants(*x) {
                    let xv = val(*x);
                    for ((d, &gv), &xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                        *d += gv * attention::phi_grad(xi);
                    }
                }
            }
            Op::MaxPool2 { x, arg } => {
                if wants(*x) {
                    let d = acc!(*x);
                    for (&a, &gv) in arg.iter().zip(g) {
                        d[a as usize] += gv;
                    }
                }
            }
            Op::Upsample2 { x } => {
                if wants(*x) {
                    let (c, h, w) = (shp(*x)[0], shp(*x)[1], shp(*x)[2]);
                    let (ho, wo) = (2 * h, 2 * w);
                    let d = acc!(*x);
                    for ch in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                d[ch * h * w + (y / 2) * w + xx / 2] += g[ch * ho * wo + y * wo + xx];
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let na = self.nodes[a.0].value.len();
                if wants(*a) {
                    acc!(*a).iter_mut().zip(&g[..na]).for_each(|(d, &v)| *d += v);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(&g[na..]).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Gca { f1, f2, p } => {
                let (c, n) = (node.shape[0], node.shape[1] * node.shape[2]);
                let mut d1 = vec![T::zero(); c * n];
                let mut d2 = vec![T::zero(); c * n];
                attention::gca_backward(val(*f1), val(*f2), p, g, c, n, &mut d1, &mut d2);
                self.add_into(*f1, &d1, grads);
                self.add_into(*f2, &d2, grads);
            }
            Op::Lca { f1, f2, window, p } => {
                let (c, h, w) = (node.shape[0], node.shape[1], node.shape[2]);
                let mut d1 = vec![T::zero(); c * h * w];
                let mut d2 = vec![T::zero(); c * h * w];
                attention::lca_backward(val(*f1), val(*f2), p, g, c, h, w, *window, &mut d1, &mut d2);
                self.add_into(*f1, &d1, grads);
                self.add_into(*f2, &d2, grads);
            }
            Op::LinAttn { q, k, v, heads, state } => {
                let (c, n) = (node.shape[0], node.shape[1] * node.shape[2]);
                let mut dq = vec![T::zero(); c * n];
                let mut dk = vec![T::zero(); c * n];
                let mut dv = vec![T::zero(); c * n];
                attention::linear_attention_backward(
                    val(*q), val(*k), val(*v), state, g, c, n, *heads, &mut dq, &mut dk, &mut dv,
                );
                self.add_into(*q, &dq, grads);
                self.add_into(*k, &dk, grads);
                self.add_into(*v, &dv, grads);
            }
            Op::SoftmaxCe { logits, target, probs } => {
                if wants(*logits) {
                    let n = target.len();
                    let scale = g[0] / T::c(n as f64);
                    let d = acc!(*logits);
                    for (i, (dv, &p)) in d.iter_mut().zip(probs).enumerate() {
                        let onehot = if target[i % n] as usize == i / n { T::one() } else { T::zero() };
                        *dv += (p - onehot) * scale;
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(w).for_each(|(d, &wv)| *d += wv * g[0]);
                }
            }
        }
    }

    fn add_into(&self, v: Var, delta: &[T], grads: &mut [Option<Vec<T>>]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let d = grads[v.0].get_or_insert_with(|| vec![T::zero(); delta.len()]);
        d.iter_mut().zip(delta).for_each(|(a, &b)| *a += b);
    }
}
