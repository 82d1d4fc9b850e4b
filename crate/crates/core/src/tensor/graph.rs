use std::collections::BTreeMap;

use super::kernels::{self, AxisTaps, ConvGeom, Layout};
use super::{Float, ParamId, ParamStore};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Data<F> {
    Owned(Vec<F>),
    Param(ParamId),
}

struct Node<F> {
    shape: Vec<usize>,
    data: Data<F>,
    op: Op<F>,
    requires_grad: bool,
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias { x: Var, bias: Var, channels: usize, inner: usize },
    ScaleChannels { x: Var, gate: Var, inner: usize },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom, c_out: usize, batch: usize, cols: Option<Vec<F>> },
    Linear { x: Var, w: Var, bias: Option<Var>, rows: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, trans_b: bool, batch: usize, a_batched: bool, b_batched: bool, m: usize, k: usize, n: usize },
    Softmax { x: Var, dim: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, dim: usize, xhat: Vec<F>, rstd: Vec<F> },
    GroupNorm { x: Var, gamma: Var, beta: Var, channels: usize, groups: usize, inner: usize, xhat: Vec<F>, rstd: Vec<F> },
    GlobalAvgPool { x: Var, inner: usize },
    Resize { x: Var, planes: usize, hw_in: (usize, usize), ty: AxisTaps, tx: AxisTaps },
    Concat { a: Var, b: Var, outer: usize, a_len: usize, b_len: usize },
    Reshape(Var),
    Permute { x: Var, map: Vec<usize> },
    Narrow { x: Var, outer: usize, dim: usize, inner: usize, start: usize, len: usize },
    Broadcast { x: Var, times: usize },
    SumAll(Var),
    MeanAll(Var),
    SigmoidBce { logits: Var, targets: Vec<F> },
    Dice { logits: Var, targets: Vec<F>, rows: usize, cols: usize },
    WeightedCe { logits: Var, targets: Vec<usize>, row_weights: Vec<F>, classes: usize },
    GatherRows { x: Var, rows: Vec<usize>, row_len: usize },
}

/// Tape of one forward pass. Borrows the parameter store read-only.
pub struct Graph<'s, F: Float> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

/// Result of [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    params: BTreeMap<ParamId, Vec<F>>,
    inputs: BTreeMap<usize, Vec<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&[F]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn input(&self, v: Var) -> Option<&[F]> {
        self.inputs.get(&v.0).map(Vec::as_slice)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<F>> {
        self.params
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'s, F: Float> Graph<'s, F> {
    /// Graph that records what is needed for [`Graph::backward`].
    pub fn new(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::new(), grad_enabled: true }
    }

    /// Forward-only graph: no node requires a gradient and nothing is cached for backward.
    pub fn inference(store: &'s ParamStore<F>) -> Self {
        Self { store, nodes: Vec::new(), grad_enabled: false }
    }

    pub fn store(&self) -> &'s ParamStore<F> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        match &self.nodes[v.0].data {
            Data::Owned(d) => d,
            Data::Param(id) => &self.store.get(*id).value,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, data: Data::Owned(data), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input.
    pub fn input(&mut self, data: Vec<F>, shape: &[usize]) -> Var {
        self.leaf(data, shape, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn leaf(&mut self, data: Vec<F>, shape: &[usize], requires_grad: bool) -> Var {
        assert_eq!(numel(shape), data.len(), "leaf shape {shape:?} does not match {} values", data.len());
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data: Data::Owned(data),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.store.get(id);
        self.nodes.push(Node {
            shape: p.shape.clone(),
            data: Data::Param(id),
            op: Op::Param(id),
            requires_grad: p.trainable && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = F::of(s);
        let data = self.value(x).iter().map(|v| *v * s).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, s), &[x])
    }

    /// Adds a vector broadcast along `axis` (e.g. axis 1 of NCHW, or the last axis of tokens).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Var {
        let (outer, channels, inner) = split_axis(self.shape(x), axis);
        assert_eq!(numel(self.shape(bias)), channels, "add_bias: bias length");
        let b = self.value(bias);
        let mut data = self.value(x).to_vec();
        for o in 0..outer {
            for c in 0..channels {
                let bc = b[c];
                for v in &mut data[(o * channels + c) * inner..(o * channels + c + 1) * inner] {
                    *v += bc;
                }
            }
        }
        self.push(self.shape(x).to_vec(), data, Op::AddBias { x, bias, channels, inner }, &[x, bias])
    }

    /// `x[n, c, ...] * gate[n, c]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(self.shape(gate), &[n, c], "scale_channels: gate shape");
        let inner = numel(&shape[2..]);
        let g = self.value(gate);
        let mut data = self.value(x).to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let s = g[i];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        self.push(shape, data, Op::ScaleChannels { x, gate, inner }, &[x, gate])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|v| v.max(F::zero())).collect();
        self.push(self.shape(x).to_vec(), data, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
        let data = self
            .value(x)
            .iter()
            .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Sigmoid(x), &[x])
    }

    /// NCHW convolution; `w` is `[C_out, C_in, kh, kw]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d: weight must be OIHW");
        assert_eq!(xs[1], ws[1], "conv2d: input has {} channels, weight expects {}", xs[1], ws[1]);
        let (batch, c_out) = (xs[0], ws[0]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], ws[3], stride, pad).expect("conv2d: kernel larger than padded input");
        let (kl, p) = (geom.patch_len(), geom.out_pixels());
        let in_len = xs[1] * xs[2] * xs[3];
        let keep_cols = self.any_grad(&[w]) && !geom.is_pointwise();
        let mut out = vec![F::zero(); batch * c_out * p];
        let mut scratch = if geom.is_pointwise() { Vec::new() } else { vec![F::zero(); kl * p] };
        let mut saved = if keep_cols { Vec::with_capacity(batch * kl * p) } else { Vec::new() };
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for n in 0..batch {
                let xn = &xv[n * in_len..(n + 1) * in_len];
                let cols: &[F] = if geom.is_pointwise() {
                    xn
                } else {
                    kernels::im2col(xn, &geom, &mut scratch);
                    &scratch
                };
                kernels::gemm(
                    c_out,
                    kl,
                    p,
                    F::one(),
                    wv,
                    Layout::row_major(kl),
                    cols,
                    Layout::row_major(p),
                    F::zero(),
                    &mut out[n * c_out * p..(n + 1) * c_out * p],
                    Layout::row_major(p),
                );
                if keep_cols {
                    saved.extend_from_slice(cols);
                }
            }
            if let Some(b) = bias {
                let bv = self.value(b);
                assert_eq!(bv.len(), c_out, "conv2d: bias length");
                for (i, chunk) in out.chunks_mut(p).enumerate() {
                    let bc = bv[i % c_out];
                    chunk.iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let shape = vec![batch, c_out, geom.h_out, geom.w_out];
        let cols = keep_cols.then_some(saved);
        self.push(shape, out, Op::Conv2d { x, w, bias, geom, c_out, batch, cols }, &inputs)
    }

    /// `x[..., K] · w[K, N] + bias[N]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().expect("linear: scalar input");
        assert_eq!(ws.len(), 2, "linear: weight must be [K, N]");
        assert_eq!(ws[0], k, "linear: input dim {k} vs weight {ws:?}");
        let n = ws[1];
        let rows = numel(&xs) / k;
        let mut out = vec![F::zero(); rows * n];
        kernels::gemm(rows, k, n, F::one(), self.value(x), Layout::row_major(k), self.value(w), Layout::row_major(n), F::zero(), &mut out, Layout::row_major(n));
        if let Some(b) = bias {
            let bv = self.value(b);
            for row in out.chunks_mut(n) {
                add_into(row, bv);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(shape, out, Op::Linear { x, w, bias, rows, k, n }, &inputs)
    }

    /// Batched product of `a[B, M, K]` with `b[B, K, N]` (or `b[B, N, K]` when
    /// `trans_b`). A batch dimension of 1 (or a rank-2 operand) broadcasts.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let (ba, m, k) = match as_.len() {
            2 => (1, as_[0], as_[1]),
            3 => (as_[0], as_[1], as_[2]),
            _ => panic!("bmm: lhs rank"),
        };
        let (bb, r0, r1) = match bs.len() {
            2 => (1, bs[0], bs[1]),
            3 => (bs[0], bs[1], bs[2]),
            _ => panic!("bmm: rhs rank"),
        };
        let (kb, n) = if trans_b { (r1, r0) } else { (r0, r1) };
        assert_eq!(k, kb, "bmm: inner dims {as_:?} x {bs:?}");
        assert!(ba == bb || ba == 1 || bb == 1, "bmm: batch mismatch");
        let batch = ba.max(bb);
        let (a_batched, b_batched) = (as_.len() == 3 && ba == batch && batch > 1, bs.len() == 3 && bb == batch && batch > 1);
        let mut out = vec![F::zero(); batch * m * n];
        let lb = if trans_b { Layout::transposed(k) } else { Layout::row_major(n) };
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..batch {
                let ai = if a_batched { i } else { 0 };
                let bi = if b_batched { i } else { 0 };
                kernels::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    &av[ai * m * k..(ai + 1) * m * k],
                    Layout::row_major(k),
                    &bv[bi * k * n..(bi + 1) * k * n],
                    lb,
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    Layout::row_major(n),
                );
            }
        }
        let shape = if as_.len() == 2 && bs.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push(shape, out, Op::Bmm { a, b, trans_b, batch, a_batched, b_batched, m, k, n }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let dim = *self.shape(x).last().unwrap();
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(dim) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(self.shape(x).to_vec(), data, Op::Softmax { x, dim }, &[x])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let dim = *self.shape(x).last().unwrap();
        let (xhat, rstd) = normalize_blocks(self.value(x), dim, eps);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for row in out.chunks_mut(dim) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g[j] + b[j];
            }
        }
        let keep = self.any_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm { x, gamma, beta, dim, xhat: if keep { xhat } else { Vec::new() }, rstd };
        self.push(self.shape(x).to_vec(), out, op, &[x, gamma, beta])
    }

    /// Group normalisation of NCHW (or `[N, C, *]`) input.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let channels = shape[1];
        let inner = numel(&shape[2..]);
        assert!(groups > 0 && channels % groups == 0, "group_norm: {channels} channels not divisible into {groups} groups");
        let block = channels / groups * inner;
        let (xhat, rstd) = normalize_blocks(self.value(x), block, eps);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut out = xhat.clone();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let c = i % channels;
            chunk.iter_mut().for_each(|v| *v = *v * g[c] + b[c]);
        }
        let keep = self.any_grad(&[x, gamma, beta]);
        let op = Op::GroupNorm { x, gamma, beta, channels, groups, inner, xhat: if keep { xhat } else { Vec::new() }, rstd };
        self.push(shape, out, op, &[x, gamma, beta])
    }

    /// Mean over all trailing axes after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let inner = numel(&shape[2..]);
        let inv = F::of(1.0 / inner as f64);
        let data = self.value(x).chunks(inner).map(|c| c.iter().copied().sum::<F>() * inv).collect();
        self.push(vec![shape[0], shape[1]], data, Op::GlobalAvgPool { x, inner }, &[x])
    }

    /// Bilinear resize of the last two axes.
    pub fn resize_bilinear(&mut self, x: Var, h_out: usize, w_out: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        let (h_in, w_in) = (shape[r - 2], shape[r - 1]);
        if (h_in, w_in) == (h_out, w_out) {
            return x;
        }
        let planes = numel(&shape[..r - 2]);
        let ty = AxisTaps::new(h_in, h_out);
        let tx = AxisTaps::new(w_in, w_out);
        let data = kernels::resize_planes(self.value(x), planes, (h_in, w_in), &ty, &tx);
        let mut out_shape = shape;
        out_shape[r - 2] = h_out;
        out_shape[r - 1] = w_out;
        self.push(out_shape, data, Op::Resize { x, planes, hw_in: (h_in, w_in), ty, tx }, &[x])
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), sb.len(), "concat: rank mismatch");
        for d in 0..sa.len() {
            assert!(d == axis || sa[d] == sb[d], "concat: {sa:?} vs {sb:?} along axis {axis}");
        }
        let outer = numel(&sa[..axis]);
        let inner = numel(&sa[axis + 1..]);
        let (a_len, b_len) = (sa[axis] * inner, sb[axis] * inner);
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(outer * (a_len + b_len));
        for o in 0..outer {
            data.extend_from_slice(&av[o * a_len..(o + 1) * a_len]);
            data.extend_from_slice(&bv[o * b_len..(o + 1) * b_len]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        self.push(shape, data, Op::Concat { a, b, outer, a_len, b_len }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), numel(self.shape(x)), "reshape: {:?} -> {shape:?}", self.shape(x));
        let data = self.value(x).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(perm.len(), shape.len(), "permute: rank");
        let map = permute_map(&shape, perm);
        let xv = self.value(x);
        let data = map.iter().map(|&i| xv[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(out_shape, data, Op::Permute { x, map }, &[x])
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis);
        assert!(start + len <= dim, "narrow: range out of bounds");
        let xv = self.value(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&xv[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(out_shape, data, Op::Narrow { x, outer, dim, inner, start, len }, &[x])
    }

    /// Prepends an axis of length `times`, repeating `x`.
    pub fn broadcast(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            data.extend_from_slice(xv);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        self.push(shape, data, Op::Broadcast { x, times }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: F = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s / F::of(n as f64)], Op::MeanAll(x), &[x])
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: Vec<F>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len(), "sigmoid_bce: length mismatch");
        let n = F::of(lv.len().max(1) as f64);
        let s: F = lv.iter().zip(&targets).map(|(&x, &t)| kernels::softplus(x) - x * t).sum();
        self.push(vec![1], vec![s / n], Op::SigmoidBce { logits, targets }, &[logits])
    }

    /// Mean over rows of `1 - (2·Σpt + 1) / (Σp + Σt + 1)` with `p = sigmoid(logits)`.
    pub fn dice_loss(&mut self, logits: Var, targets: Vec<F>) -> Var {
        let shape = self.shape(logits).to_vec();
        let cols = *shape.last().unwrap();
        let rows = numel(&shape) / cols.max(1);
        assert_eq!(targets.len(), rows * cols, "dice_loss: length mismatch");
        let lv = self.value(logits);
        let mut total = F::zero();
        for r in 0..rows {
            let (num, den) = dice_terms(&lv[r * cols..(r + 1) * cols], &targets[r * cols..(r + 1) * cols]);
            total += F::one() - num / den;
        }
        let v = total / F::of(rows.max(1) as f64);
        self.push(vec![1], vec![v], Op::Dice { logits, targets, rows, cols }, &[logits])
    }

    /// Class-weighted cross-entropy over rows of `logits[R, C]`, normalised by
    /// the summed weights of the targets.
    pub fn weighted_cross_entropy(&mut self, logits: Var, targets: Vec<usize>, class_weights: &[f64]) -> Var {
        let classes = *self.shape(logits).last().unwrap();
        assert_eq!(class_weights.len(), classes, "weighted_cross_entropy: weight count");
        let lv = self.value(logits);
        let rows = lv.len() / classes;
        assert_eq!(targets.len(), rows, "weighted_cross_entropy: target count");
        let row_weights: Vec<F> = targets.iter().map(|&t| F::of(class_weights[t])).collect();
        let wsum: F = row_weights.iter().copied().sum();
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * classes..(r + 1) * classes];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
            total += row_weights[r] * (lse - row[t]);
        }
        let v = if wsum > F::zero() { total / wsum } else { F::zero() };
        self.push(vec![1], vec![v], Op::WeightedCe { logits, targets, row_weights, classes }, &[logits])
    }

    /// Selects rows of `x[R, L]` (any leading shape flattened to rows of the last axis length).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let row_len = *self.shape(x).last().unwrap();
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&xv[r * row_len..(r + 1) * row_len]);
        }
        self.push(vec![rows.len(), row_len], data, Op::GatherRows { x, rows: rows.to_vec(), row_len }, &[x])
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients { params: BTreeMap::new(), inputs: BTreeMap::new() };
        if !self.nodes[loss.0].requires_grad {
            return out;
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads, &mut out);
        }
        out
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = numel(&node.shape);
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn backward_node(&self, i: usize, g: Vec<F>, grads: &mut [Option<Vec<F>>], out: &mut Gradients<F>) {
        match &self.nodes[i].op {
            Op::Leaf => {
                out.inputs.insert(i, g);
            }
            Op::Param(id) => match out.params.get_mut(id) {
                Some(acc) => add_into(acc, &g),
                None => {
                    out.params.insert(*id, g);
                }
            },
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, &g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, &g);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let bv = self.value(*b);
                    let da = self.slot(grads, *a).unwrap();
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.value(*a);
                    let db = self.slot(grads, *b).unwrap();
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(&g) {
                        *d += *gv * *s;
                    }
                }
            }
            Op::AddBias { x, bias, channels, inner } => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, &g);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for (k, chunk) in g.chunks(*inner).enumerate() {
                        db[k % channels] += chunk.iter().copied().sum::<F>();
                    }
                }
            }
            Op::ScaleChannels { x, gate, inner } => {
                if self.nodes[x.0].requires_grad {
                    let gv = self.value(*gate);
                    let dx = self.slot(grads, *x).unwrap();
                    for (k, (dchunk, gchunk)) in dx.chunks_mut(*inner).zip(g.chunks(*inner)).enumerate() {
                        let s = gv[k];
                        for (d, gg) in dchunk.iter_mut().zip(gchunk) {
                            *d += *gg * s;
                        }
                    }
                }
                if self.nodes[gate.0].requires_grad {
                    let xv = self.value(*x);
                    let dg = self.slot(grads, *gate).unwrap();
                    for (k, (xc, gc)) in xv.chunks(*inner).zip(g.chunks(*inner)).enumerate() {
                        dg[k] += xc.iter().zip(gc).map(|(a, b)| *a * *b).sum::<F>();
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        if xv[j] > F::zero() {
                            dx[j] += g[j];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
                let three = F::of(3.0);
                if let Some(dx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        let v = xv[j];
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (F::one() + t) + half * v * (F::one() - t * t) * c * (F::one() + three * a * v * v);
                        dx[j] += g[j] * d;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = self.value(Var(i));
                if let Some(dx) = self.slot(grads, *x) {
                    for j in 0..g.len() {
                        dx[j] += g[j] * y[j] * (F::one() - y[j]);
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom, c_out, batch, cols } => {
                self.conv_backward(&g, *x, *w, *bias, geom, *c_out, *batch, cols.as_deref(), grads);
            }
            Op::Linear { x, w, bias, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                if self.nodes[x.0].requires_grad {
                    let wv = self.value(*w);
                    let dx = self.slot(grads, *x).unwrap();
                    kernels::gemm(rows, n, k, F::one(), &g, Layout::row_major(n), wv, Layout::transposed(n), F::one(), dx, Layout::row_major(k));
                }
                if self.nodes[w.0].requires_grad {
                    let xv = self.value(*x);
                    let dw = self.slot(grads, *w).unwrap();
                    kernels::gemm(k, rows, n, F::one(), xv, Layout::transposed(k), &g, Layout::row_major(n), F::one(), dw, Layout::row_major(n));
                }
                if let Some(b) = bias {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks(n) {
                            add_into(db, row);
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_b, batch, a_batched, b_batched, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    let bv = self.value(*b);
                    let da = self.slot(grads, *a).unwrap();
                    // dA = dC · B^T
                    let lb = if *trans_b { Layout::row_major(k) } else { Layout::transposed(n) };
                    for i in 0..*batch {
                        let ai = if *a_batched { i } else { 0 };
                        let bi = if *b_batched { i } else { 0 };
                        kernels::gemm(m, n, k, F::one(), &g[i * m * n..(i + 1) * m * n], Layout::row_major(n), &bv[bi * k * n..(bi + 1) * k * n], lb, F::one(), &mut da[ai * m * k..(ai + 1) * m * k], Layout::row_major(k));
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.value(*a);
                    let db = self.slot(grads, *b).unwrap();
                    for i in 0..*batch {
                        let ai = if *a_batched { i } else { 0 };
                        let bi = if *b_batched { i } else { 0 };
                        let ga = &g[i * m * n..(i + 1) * m * n];
                        let aa = &av[ai * m * k..(ai + 1) * m * k];
                        let dst = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB[N, K] = dC^T · A
                            kernels::gemm(n, m, k, F::one(), ga, Layout::transposed(n), aa, Layout::row_major(k), F::one(), dst, Layout::row_major(k));
                        } else {
                            // dB[K, N] = A^T · dC
                            kernels::gemm(k, m, n, F::one(), aa, Layout::transposed(k), ga, Layout::row_major(n), F::one(), dst, Layout::row_major(n));
                        }
                    }
                }
            }
            Op::Softmax { x, dim } => {
                let y = self.value(Var(i));
                if let Some(dx) = self.slot(grads, *x) {
                    for ((yr, gr), dr) in y.chunks(*dim).zip(g.chunks(*dim)).zip(dx.chunks_mut(*dim)) {
                        let dot: F = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..*dim {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, dim, xhat, rstd } => {
                let dim = *dim;
                let gv = self.value(*gamma);
                if let Some(dgamma) = self.slot(grads, *gamma) {
                    for (gr, xr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                        for j in 0..dim {
                            dgamma[j] += gr[j] * xr[j];
                        }
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for gr in g.chunks(dim) {
                        add_into(dbeta, gr);
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dxhat = g.clone();
                    for row in dxhat.chunks_mut(dim) {
                        for j in 0..dim {
                            row[j] *= gv[j];
                        }
                    }
                    let dx = self.slot(grads, *x).unwrap();
                    normalize_backward(&dxhat, xhat, rstd, dim, dx);
                }
            }
            Op::GroupNorm { x, gamma, beta, channels, groups, inner, xhat, rstd } => {
                let (channels, inner) = (*channels, *inner);
                let gv = self.value(*gamma);
                if let Some(dgamma) = self.slot(grads, *gamma) {
                    for (k, (gc, xc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                        dgamma[k % channels] += gc.iter().zip(xc).map(|(a, b)| *a * *b).sum::<F>();
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for (k, gc) in g.chunks(inner).enumerate() {
                        dbeta[k % channels] += gc.iter().copied().sum::<F>();
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dxhat = g.clone();
                    for (k, chunk) in dxhat.chunks_mut(inner).enumerate() {
                        let s = gv[k % channels];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    let block = channels / groups * inner;
                    let dx = self.slot(grads, *x).unwrap();
                    normalize_backward(&dxhat, xhat, rstd, block, dx);
                }
            }
            Op::GlobalAvgPool { x, inner } => {
                let inv = F::of(1.0 / *inner as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, chunk) in dx.chunks_mut(*inner).enumerate() {
                        let v = g[k] * inv;
                        chunk.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::Resize { x, planes, hw_in, ty, tx } => {
                if let Some(dx) = self.slot(grads, *x) {
                    kernels::resize_planes_backward(&g, *planes, *hw_in, ty, tx, dx);
                }
            }
            Op::Concat { a, b, outer, a_len, b_len } => {
                let (a_len, b_len) = (*a_len, *b_len);
                if let Some(da) = self.slot(grads, *a) {
                    for o in 0..*outer {
                        add_into(&mut da[o * a_len..(o + 1) * a_len], &g[o * (a_len + b_len)..o * (a_len + b_len) + a_len]);
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for o in 0..*outer {
                        add_into(&mut db[o * b_len..(o + 1) * b_len], &g[o * (a_len + b_len) + a_len..(o + 1) * (a_len + b_len)]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, &g);
                }
            }
            Op::Permute { x, map } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, &src) in map.iter().enumerate() {
                        dx[src] += g[j];
                    }
                }
            }
            Op::Narrow { x, outer, dim, inner, start, len } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        let dst = &mut dx[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Broadcast { x, times } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = dx.len();
                    for t in 0..*times {
                        add_into(dx, &g[t * n..(t + 1) * n]);
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let v = g[0] / F::of(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::SigmoidBce { logits, targets } => {
                let lv = self.value(*logits);
                if let Some(dx) = self.slot(grads, *logits) {
                    let s = g[0] / F::of(lv.len().max(1) as f64);
                    for j in 0..lv.len() {
                        dx[j] += s * (kernels::sigmoid(lv[j]) - targets[j]);
                    }
                }
            }
            Op::Dice { logits, targets, rows, cols } => {
                let lv = self.value(*logits);
                let cols = *cols;
                if let Some(dx) = self.slot(grads, *logits) {
                    let s = g[0] / F::of((*rows).max(1) as f64);
                    let two = F::of(2.0);
                    for r in 0..*rows {
                        let lr = &lv[r * cols..(r + 1) * cols];
                        let tr = &targets[r * cols..(r + 1) * cols];
                        let (num, den) = dice_terms(lr, tr);
                        for j in 0..cols {
                            let p = kernels::sigmoid(lr[j]);
                            let dp = -(two * tr[j] * den - num) / (den * den);
                            dx[r * cols + j] += s * dp * p * (F::one() - p);
                        }
                    }
                }
            }
            Op::WeightedCe { logits, targets, row_weights, classes } => {
                let lv = self.value(*logits);
                let classes = *classes;
                let wsum: F = row_weights.iter().copied().sum();
                if wsum > F::zero() {
                    if let Some(dx) = self.slot(grads, *logits) {
                        for (r, &t) in targets.iter().enumerate() {
                            let row = &lv[r * classes..(r + 1) * classes];
                            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                            let z: F = row.iter().map(|&v| (v - mx).exp()).sum();
                            let s = g[0] * row_weights[r] / wsum;
                            for c in 0..classes {
                                let p = (row[c] - mx).exp() / z;
                                let y = if c == t { F::one() } else { F::zero() };
                                dx[r * classes + c] += s * (p - y);
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, rows, row_len } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * row_len..(r + 1) * row_len], &g[k * row_len..(k + 1) * row_len]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &[F],
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        c_out: usize,
        batch: usize,
        cols: Option<&[F]>,
        grads: &mut [Option<Vec<F>>],
    ) {
        let (kl, p) = (geom.patch_len(), geom.out_pixels());
        let in_len = geom.c_in * geom.h * geom.w;
        if let Some(b) = bias {
            if let Some(db) = self.slot(grads, b) {
                for (k, chunk) in g.chunks(p).enumerate() {
                    db[k % c_out] += chunk.iter().copied().sum::<F>();
                }
            }
        }
        if self.nodes[w.0].requires_grad {
            let xv = self.value(x);
            let dw = self.slot(grads, w).unwrap();
            for n in 0..batch {
                let cn: &[F] = if geom.is_pointwise() {
                    &xv[n * in_len..(n + 1) * in_len]
                } else {
                    &cols.expect("conv2d: columns not cached")[n * kl * p..(n + 1) * kl * p]
                };
                kernels::gemm(c_out, p, kl, F::one(), &g[n * c_out * p..(n + 1) * c_out * p], Layout::row_major(p), cn, Layout::transposed(p), F::one(), dw, Layout::row_major(kl));
            }
        }
        if self.nodes[x.0].requires_grad {
            let wv = self.value(w);
            let dx = self.slot(grads, x).unwrap();
            let mut dcols = if geom.is_pointwise() { Vec::new() } else { vec![F::zero(); kl * p] };
            for n in 0..batch {
                let gn = &g[n * c_out * p..(n + 1) * c_out * p];
                let dxn = &mut dx[n * in_len..(n + 1) * in_len];
                if geom.is_pointwise() {
                    kernels::gemm(kl, c_out, p, F::one(), wv, Layout::transposed(kl), gn, Layout::row_major(p), F::one(), dxn, Layout::row_major(p));
                } else {
                    kernels::gemm(kl, c_out, p, F::one(), wv, Layout::transposed(kl), gn, Layout::row_major(p), F::zero(), &mut dcols, Layout::row_major(p));
                    kernels::col2im_add(&dcols, geom, dxn);
                }
            }
        }
    }
}

/// Standardises consecutive blocks of `block` values; returns `(xhat, rstd)`.
fn normalize_blocks<F: Float>(x: &[F], block: usize, eps: f64) -> (Vec<F>, Vec<F>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / block.max(1));
    let nb = F::of(block as f64);
    for chunk in x.chunks(block) {
        let mean = chunk.iter().copied().sum::<F>() / nb;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nb;
        let r = F::one() / (var + F::of(eps)).sqrt();
        rstd.push(r);
        xhat.extend(chunk.iter().map(|&v| (v - mean) * r));
    }
    (xhat, rstd)
}

/// `dx += rstd · (dxhat − mean(dxhat) − xhat · mean(dxhat · xhat))` per block.
fn normalize_backward<F: Float>(dxhat: &[F], xhat: &[F], rstd: &[F], block: usize, dx: &mut [F]) {
    let nb = F::of(block as f64);
    for (b, r) in rstd.iter().enumerate() {
        let range = b * block..(b + 1) * block;
        let (dh, xh) = (&dxhat[range.clone()], &xhat[range.clone()]);
        let m1 = dh.iter().copied().sum::<F>() / nb;
        let m2 = dh.iter().zip(xh).map(|(a, c)| *a * *c).sum::<F>() / nb;
        for (j, d) in dx[range].iter_mut().enumerate() {
            *d += *r * (dh[j] - m1 - xh[j] * m2);
        }
    }
}

fn dice_terms<F: Float>(logits: &[F], targets: &[F]) -> (F, F) {
    let mut inter = F::zero();
    let mut ps = F::zero();
    let mut ts = F::zero();
    for (&x, &t) in logits.iter().zip(targets) {
        let p = kernels::sigmoid(x);
        inter += p * t;
        ps += p;
        ts += t;
    }
    (F::of(2.0) * inter + F::one(), ps + ts + F::one())
}

/// For every output linear index, the input linear index it reads.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for d in (0..r.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..r).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

#[cfg(test)]
#[path = "graph_tests.rs"]
mod tests;
