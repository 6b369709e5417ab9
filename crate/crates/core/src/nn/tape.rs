//! Reverse-mode autodiff over dynamic-dimensional arrays.
//!
//! Forward calls append nodes to the tape; [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients into every node reachable
//! from a scalar loss. Heavy operations (matmul, im2col convolution
//! lowering, batched attention products) route through `ndarray`'s gemm,
//! which is deterministic for a fixed input.

use super::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<A: Scalar> {
    Leaf,
    Add(usize, usize),
    /// rhs is broadcast to lhs's shape; rhs dims must be 1 or equal.
    AddBroadcast(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, ArrayD<A>),
    Scale(usize, A),
    /// [m,k] x [k,n]
    MatMul(usize, usize),
    /// [n,m,k] x [n,k,p]
    BatchMatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Im2Col { input: usize, kernel: usize, stride: usize, pad: usize },
    /// Fold [B*OH*OW, C*k*k] columns back into (B, C, H, W), accumulating
    /// overlaps. Exact inverse of Im2Col layout.
    Col2Im { input: usize, kernel: usize, stride: usize, pad: usize },
    UpsampleNearest2(usize),
    SoftmaxLast(usize),
    LayerNorm { input: usize, gamma: usize, beta: usize, xhat: ArrayD<A>, inv_std: ArrayD<A> },
    GroupNorm { input: usize, gamma: usize, beta: usize, groups: usize, xhat: ArrayD<A>, inv_std: ArrayD<A> },
    Gelu(usize),
    Silu(usize),
    Clamp(usize, A, A),
    ConcatCh(Vec<usize>),
    Sum(usize),
    /// Bilinear token-grid resampling: rows of a (L0, D)-shaped table are
    /// gathered with fixed weights into (L1, D).
    InterpTokens { input: usize, table: Vec<(usize, A)>, out_tokens: usize, row_len: usize },
}

struct Node<A: Scalar> {
    value: ArrayD<A>,
    needs_grad: bool,
    op: Op<A>,
}

pub struct Tape<A: Scalar> {
    nodes: Vec<Node<A>>,
}

/// Gradients produced by one backward pass.
pub struct Grads<A: Scalar> {
    grads: Vec<Option<ArrayD<A>>>,
}

impl<A: Scalar> Grads<A> {
    pub fn get(&self, var: Var) -> Option<&ArrayD<A>> {
        self.grads[var.0].as_ref()
    }
}

impl<A: Scalar> Default for Tape<A> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<A: Scalar> Tape<A> {
    pub fn new() -> Tape<A> {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, var: Var) -> &ArrayD<A> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes[var.0].value.shape().to_vec()
    }

    fn push(&mut self, value: ArrayD<A>, needs_grad: bool, op: Op<A>) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// A differentiable leaf: gradients accumulate here.
    pub fn leaf(&mut self, value: ArrayD<A>) -> Var {
        self.push(to_standard(value), true, Op::Leaf)
    }

    /// A constant: no gradient is tracked through it.
    pub fn constant(&mut self, value: ArrayD<A>) -> Var {
        self.push(to_standard(value), false, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Add(a.0, b.0))
    }

    /// `a + broadcast(b)`: every dim of `b` must equal `a`'s or be 1.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa.len(), sb.len(), "add_broadcast: rank mismatch");
        for (da, db) in sa.iter().zip(sb.iter()) {
            assert!(db == da || *db == 1, "add_broadcast: incompatible dims {sa:?} vs {sb:?}");
        }
        let bcast = self.nodes[b.0]
            .value
            .broadcast(IxDyn(&sa))
            .expect("broadcast checked");
        let value = &self.nodes[a.0].value + &bcast;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::AddBroadcast(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::Mul(a.0, b.0))
    }

    /// Elementwise product with a fixed array (no gradient into the array).
    pub fn mul_const(&mut self, a: Var, k: ArrayD<A>) -> Var {
        assert_eq!(self.shape(a), k.shape().to_vec(), "mul_const: shape mismatch");
        let value = &self.nodes[a.0].value * &k;
        let needs = self.needs(a.0);
        self.push(value, needs, Op::MulConst(a.0, k))
    }

    pub fn scale(&mut self, a: Var, s: A) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * s);
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Scale(a.0, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa.len(), 2, "matmul: lhs must be 2-D");
        assert_eq!(sb.len(), 2, "matmul: rhs must be 2-D");
        assert_eq!(sa[1], sb[0], "matmul: inner dims {sa:?} x {sb:?}");
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let value = av.dot(&bv).into_dyn();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::MatMul(a.0, b.0))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa.len(), 3, "batch_matmul: lhs must be 3-D");
        assert_eq!(sb.len(), 3, "batch_matmul: rhs must be 3-D");
        assert_eq!(sa[0], sb[0], "batch_matmul: batch dims differ");
        assert_eq!(sa[2], sb[1], "batch_matmul: inner dims {sa:?} x {sb:?}");
        let mut value = ArrayD::<A>::zeros(IxDyn(&[sa[0], sa[1], sb[2]]));
        for i in 0..sa[0] {
            let av = self.nodes[a.0]
                .value
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let bv = self.nodes[b.0]
                .value
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let mut out = value.index_axis_mut(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            general_mat_mul(A::one(), &av, &bv, A::zero(), &mut out);
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(value, needs, Op::BatchMatMul(a.0, b.0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let count: usize = self.shape(a).iter().product();
        let target: usize = shape.iter().product();
        assert_eq!(count, target, "reshape: element count mismatch");
        let value = self.nodes[a.0]
            .value
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape checked");
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Reshape(a.0))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let sa = self.shape(a);
        assert_eq!(axes.len(), sa.len(), "permute: axes rank mismatch");
        let value = permute_copy(&self.nodes[a.0].value, axes);
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Permute(a.0, axes.to_vec()))
    }

    /// Lower (B, C, H, W) to convolution columns [B*OH*OW, C*k*k] with zero
    /// padding.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 4, "im2col: input must be 4-D");
        let value = im2col_kernel(&self.nodes[a.0].value.view(), kernel, stride, pad);
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Im2Col { input: a.0, kernel, stride, pad })
    }

    /// Inverse of [`Tape::im2col`]'s layout: fold columns into an image,
    /// accumulating overlapping contributions.
    pub fn col2im(
        &mut self,
        a: Var,
        batch: usize,
        channels: usize,
        rows: usize,
        cols: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 2, "col2im: input must be 2-D columns");
        assert_eq!(sa[1], channels * kernel * kernel, "col2im: column width mismatch");
        let value = col2im_kernel(
            &self.nodes[a.0].value.view(),
            batch,
            channels,
            rows,
            cols,
            kernel,
            stride,
            pad,
        );
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Col2Im { input: a.0, kernel, stride, pad })
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 4, "upsample: input must be 4-D");
        let (b, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let src = self.nodes[a.0].value.as_slice().expect("standard layout");
        let w2 = 2 * w;
        let mut value = vec![A::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            let in_base = plane * h * w;
            let out_base = plane * 4 * h * w;
            for r in 0..h {
                let in_row = &src[in_base + r * w..in_base + (r + 1) * w];
                let out_row0 = out_base + 2 * r * w2;
                for (cc, &v) in in_row.iter().enumerate() {
                    value[out_row0 + 2 * cc] = v;
                    value[out_row0 + 2 * cc + 1] = v;
                }
                value.copy_within(out_row0..out_row0 + w2, out_row0 + w2);
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[b, c, 2 * h, 2 * w]), value).unwrap();
        let needs = self.needs(a.0);
        self.push(value, needs, Op::UpsampleNearest2(a.0))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.to_owned();
        let last = value.ndim() - 1;
        for mut lane in value.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(A::neg_infinity(), A::max);
            let mut sum = A::zero();
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in lane.iter_mut() {
                *v = *v / sum;
            }
        }
        let needs = self.needs(a.0);
        self.push(value, needs, Op::SoftmaxLast(a.0))
    }

    /// Normalize over the last axis with learned affine (gamma, beta of
    /// shape [D]).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let sa = self.shape(a);
        let d = *sa.last().unwrap();
        assert_eq!(self.shape(gamma), vec![d], "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), vec![d], "layer_norm: beta shape");
        let eps = A::cast(1e-5);
        let x = &self.nodes[a.0].value;
        let last = x.ndim() - 1;
        let mut xhat = x.to_owned();
        let inv_std_shape: Vec<usize> = sa[..sa.len() - 1].to_vec();
        let mut inv_std = ArrayD::<A>::zeros(IxDyn(&inv_std_shape));
        let inv_d = A::cast(1.0 / d as f64);
        for (mut lane, s) in xhat.lanes_mut(Axis(last)).into_iter().zip(inv_std.iter_mut()) {
            let mut mean = A::zero();
            for v in lane.iter() {
                mean = mean + *v;
            }
            mean = mean * inv_d;
            let mut var = A::zero();
            for v in lane.iter() {
                let c = *v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let istd = A::one() / (var + eps).sqrt();
            *s = istd;
            for v in lane.iter_mut() {
                *v = (*v - mean) * istd;
            }
        }
        let g = &self.nodes[gamma.0].value;
        let bt = &self.nodes[beta.0].value;
        let mut value = xhat.clone();
        for mut lane in value.lanes_mut(Axis(last)) {
            for (i, v) in lane.iter_mut().enumerate() {
                *v = *v * g[[i]] + bt[[i]];
            }
        }
        let needs = self.needs(a.0) || self.needs(gamma.0) || self.needs(beta.0);
        self.push(value, needs, Op::LayerNorm { input: a.0, gamma: gamma.0, beta: beta.0, xhat, inv_std })
    }

    /// Normalize (B, C, H, W) per batch and channel group with learned
    /// per-channel affine (gamma, beta of shape [C]).
    pub fn group_norm(&mut self, a: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 4, "group_norm: input must be 4-D");
        let (b, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        assert!(groups >= 1 && c % groups == 0, "group_norm: groups must divide channels");
        assert_eq!(self.shape(gamma), vec![c], "group_norm: gamma shape");
        assert_eq!(self.shape(beta), vec![c], "group_norm: beta shape");
        let eps = A::cast(1e-5);
        let cg = c / groups;
        let group_len = cg * h * w;
        let hw = h * w;
        let x = self.nodes[a.0].value.as_slice().expect("tape values are standard layout");
        let mut xhat_vec = vec![A::zero(); b * c * hw];
        let mut value_vec = vec![A::zero(); b * c * hw];
        let mut inv_std = ArrayD::<A>::zeros(IxDyn(&[b, groups]));
        let inv_len = A::cast(1.0 / group_len as f64);
        let gv = self.nodes[gamma.0].value.as_slice().expect("standard layout");
        let bv = self.nodes[beta.0].value.as_slice().expect("standard layout");
        for bi in 0..b {
            for g in 0..groups {
                let base = (bi * c + g * cg) * hw;
                let chunk = &x[base..base + group_len];
                let mut mean = A::zero();
                for &v in chunk {
                    mean = mean + v;
                }
                mean = mean * inv_len;
                let mut var = A::zero();
                for &v in chunk {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var * inv_len;
                let istd = A::one() / (var + eps).sqrt();
                inv_std[[bi, g]] = istd;
                for (k, &v) in chunk.iter().enumerate() {
                    let ci = g * cg + k / hw;
                    let xh = (v - mean) * istd;
                    xhat_vec[base + k] = xh;
                    value_vec[base + k] = xh * gv[ci] + bv[ci];
                }
            }
        }
        let xhat = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), xhat_vec).unwrap();
        let value = ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), value_vec).unwrap();
        let needs = self.needs(a.0) || self.needs(gamma.0) || self.needs(beta.0);
        self.push(value, needs, Op::GroupNorm { input: a.0, gamma: gamma.0, beta: beta.0, groups, xhat, inv_std })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| gelu_fwd(x));
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Gelu(a.0))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| {
            let s = A::one() / (A::one() + (-x).exp());
            x * s
        });
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Silu(a.0))
    }

    /// Gradient passes only strictly inside (lo, hi).
    pub fn clamp(&mut self, a: Var, lo: A, hi: A) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(lo).min(hi));
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Clamp(a.0, lo, hi))
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat_ch(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_ch: needs at least one input");
        let views: Vec<ArrayViewD<A>> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat shapes checked by caller");
        let needs = parts.iter().any(|v| self.needs(v.0));
        self.push(to_standard(value), needs, Op::ConcatCh(parts.iter().map(|v| v.0).collect()))
    }

    /// Sum all elements into a scalar of shape [1].
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().fold(A::zero(), |acc, &v| acc + v);
        let value = ArrayD::from_shape_vec(IxDyn(&[1]), vec![total]).unwrap();
        let needs = self.needs(a.0);
        self.push(value, needs, Op::Sum(a.0))
    }

    /// Resample a (L0, D) token table onto a new token grid bilinearly
    /// (align-corners). Input shape (1, L0, D), output (1, L1, D).
    pub fn interp_tokens(&mut self, a: Var, from: (usize, usize), to: (usize, usize)) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa.len(), 3, "interp_tokens: input must be (1, L, D)");
        assert_eq!(sa[0], 1, "interp_tokens: leading dim must be 1");
        assert_eq!(sa[1], from.0 * from.1, "interp_tokens: token count mismatch");
        let d = sa[2];
        let (h0, w0) = from;
        let (h1, w1) = to;
        // Per output token: up to 4 (source_token * D offset, weight) pairs.
        let mut table: Vec<(usize, A)> = Vec::with_capacity(h1 * w1 * 4);
        let mut spans: Vec<usize> = Vec::with_capacity(h1 * w1 + 1);
        spans.push(0);
        let src = &self.nodes[a.0].value;
        let mut value = ArrayD::<A>::zeros(IxDyn(&[1, h1 * w1, d]));
        for r in 0..h1 {
            let fr = if h1 > 1 { r as f64 * (h0 as f64 - 1.0) / (h1 as f64 - 1.0) } else { 0.0 };
            let r0 = fr.floor() as usize;
            let r1 = (r0 + 1).min(h0 - 1);
            let wr = fr - r0 as f64;
            for c in 0..w1 {
                let fc = if w1 > 1 { c as f64 * (w0 as f64 - 1.0) / (w1 as f64 - 1.0) } else { 0.0 };
                let c0 = fc.floor() as usize;
                let c1 = (c0 + 1).min(w0 - 1);
                let wc = fc - c0 as f64;
                let quad = [
                    (r0 * w0 + c0, (1.0 - wr) * (1.0 - wc)),
                    (r0 * w0 + c1, (1.0 - wr) * wc),
                    (r1 * w0 + c0, wr * (1.0 - wc)),
                    (r1 * w0 + c1, wr * wc),
                ];
                let out_tok = r * w1 + c;
                for (tok, wgt) in quad {
                    if wgt == 0.0 {
                        continue;
                    }
                    let w_a = A::cast(wgt);
                    table.push((tok, w_a));
                    for k in 0..d {
                        let add = src[[0, tok, k]] * w_a;
                        value[[0, out_tok, k]] = value[[0, out_tok, k]] + add;
                    }
                }
                spans.push(table.len());
            }
        }
        // Flatten the span structure into the table: encode each entry's
        // output token alongside its source.
        let mut flat: Vec<(usize, A)> = Vec::with_capacity(table.len());
        for out_tok in 0..h1 * w1 {
            for e in table[spans[out_tok]..spans[out_tok + 1]].iter() {
                flat.push((out_tok * (h0 * w0) + e.0, e.1));
            }
        }
        let needs = self.needs(a.0);
        self.push(
            value,
            needs,
            Op::InterpTokens { input: a.0, table: flat, out_tokens: h1 * w1, row_len: d },
        )
    }

    /// Reverse pass from a scalar node (shape [1]).
    pub fn backward(&self, loss: Var) -> Grads<A> {
        assert_eq!(self.shape(loss), vec![1], "backward: loss must be scalar");
        let mut grads: Vec<Option<ArrayD<A>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), A::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, dy: &ArrayD<A>, grads: &mut [Option<ArrayD<A>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                if self.needs(*b) {
                    let sb = self.nodes[*b].value.shape().to_vec();
                    let mut reduced = dy.clone();
                    for (axis, &db) in sb.iter().enumerate() {
                        if db == 1 && reduced.shape()[axis] != 1 {
                            reduced = reduced
                                .sum_axis(Axis(axis))
                                .insert_axis(Axis(axis))
                                .as_standard_layout()
                                .to_owned();
                        }
                    }
                    self.accumulate(grads, *b, reduced);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, dy.mapv(|v| A::zero() - v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, dy * &self.nodes[*b].value);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, dy * &self.nodes[*a].value);
                }
            }
            Op::MulConst(a, k) => {
                self.accumulate(grads, *a, dy * k);
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, dy.mapv(|v| v * *s));
            }
            Op::MatMul(a, b) => {
                let dyv = dy.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(*a) {
                    self.accumulate(grads, *a, dyv.dot(&bv.t()).into_dyn());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, av.t().dot(&dyv).into_dyn());
                }
            }
            Op::BatchMatMul(a, b) => {
                let n = dy.shape()[0];
                if self.needs(*a) {
                    let sa = self.nodes[*a].value.shape().to_vec();
                    let mut da = ArrayD::<A>::zeros(IxDyn(&sa));
                    for bi in 0..n {
                        let dyv = dy.index_axis(Axis(0), bi).into_dimensionality::<Ix2>().unwrap();
                        let bv = self.nodes[*b]
                            .value
                            .index_axis(Axis(0), bi)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        let mut out =
                            da.index_axis_mut(Axis(0), bi).into_dimensionality::<Ix2>().unwrap();
                        general_mat_mul(A::one(), &dyv, &bv.t(), A::zero(), &mut out);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let sb = self.nodes[*b].value.shape().to_vec();
                    let mut db = ArrayD::<A>::zeros(IxDyn(&sb));
                    for bi in 0..n {
                        let dyv = dy.index_axis(Axis(0), bi).into_dimensionality::<Ix2>().unwrap();
                        let av = self.nodes[*a]
                            .value
                            .index_axis(Axis(0), bi)
                            .into_dimensionality::<Ix2>()
                            .unwrap();
                        let mut out =
                            db.index_axis_mut(Axis(0), bi).into_dimensionality::<Ix2>().unwrap();
                        general_mat_mul(A::one(), &av.t(), &dyv, A::zero(), &mut out);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Reshape(a) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let da = dy
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(&sa))
                    .unwrap();
                self.accumulate(grads, *a, da);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (to, &from) in axes.iter().enumerate() {
                    inverse[from] = to;
                }
                self.accumulate(grads, *a, permute_copy(dy, &inverse));
            }
            Op::Im2Col { input, kernel, stride, pad } => {
                let sa = self.nodes[*input].value.shape().to_vec();
                let da = col2im_kernel(
                    &dy.view(),
                    sa[0],
                    sa[1],
                    sa[2],
                    sa[3],
                    *kernel,
                    *stride,
                    *pad,
                );
                self.accumulate(grads, *input, da);
            }
            Op::Col2Im { input, kernel, stride, pad, .. } => {
                let da = im2col_kernel(&dy.view(), *kernel, *stride, *pad);
                self.accumulate(grads, *input, da);
            }
            Op::UpsampleNearest2(a) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let (b, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                let dys = dy.as_slice().expect("standard layout");
                let w2 = 2 * w;
                let mut da = vec![A::zero(); b * c * h * w];
                for plane in 0..b * c {
                    let out_base = plane * h * w;
                    let in_base = plane * 4 * h * w;
                    for r in 0..h {
                        let row0 = in_base + 2 * r * w2;
                        let row1 = row0 + w2;
                        let out_row = out_base + r * w;
                        for cc in 0..w {
                            da[out_row + cc] = dys[row0 + 2 * cc]
                                + dys[row0 + 2 * cc + 1]
                                + dys[row1 + 2 * cc]
                                + dys[row1 + 2 * cc + 1];
                        }
                    }
                }
                self.accumulate(grads, *a, ArrayD::from_shape_vec(IxDyn(&sa), da).unwrap());
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let last = y.ndim() - 1;
                let mut da = dy * y;
                for (mut lane, ylane) in
                    da.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
                {
                    let mut dot = A::zero();
                    for v in lane.iter() {
                        dot = dot + *v;
                    }
                    for (v, yv) in lane.iter_mut().zip(ylane.iter()) {
                        *v = *v - *yv * dot;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { input, gamma, beta, xhat, inv_std } => {
                let d = *xhat.shape().last().unwrap();
                let last = xhat.ndim() - 1;
                let g = &self.nodes[*gamma].value;
                if self.needs(*gamma) {
                    let mut dg = ArrayD::<A>::zeros(IxDyn(&[d]));
                    for (dlane, xlane) in dy.lanes(Axis(last)).into_iter().zip(xhat.lanes(Axis(last))) {
                        for k in 0..d {
                            dg[[k]] = dg[[k]] + dlane[k] * xlane[k];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    let mut db = ArrayD::<A>::zeros(IxDyn(&[d]));
                    for dlane in dy.lanes(Axis(last)) {
                        for k in 0..d {
                            db[[k]] = db[[k]] + dlane[k];
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.needs(*input) {
                    let inv_d = A::cast(1.0 / d as f64);
                    let mut da = ArrayD::<A>::zeros(IxDyn(xhat.shape()));
                    for (((mut olane, dlane), xlane), istd) in da
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(dy.lanes(Axis(last)))
                        .zip(xhat.lanes(Axis(last)))
                        .zip(inv_std.iter())
                    {
                        let mut mean_dxhat = A::zero();
                        let mut mean_dxhat_xhat = A::zero();
                        for k in 0..d {
                            let dxh = dlane[k] * g[[k]];
                            mean_dxhat = mean_dxhat + dxh;
                            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xlane[k];
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        for k in 0..d {
                            let dxh = dlane[k] * g[[k]];
                            olane[k] = (dxh - mean_dxhat - xlane[k] * mean_dxhat_xhat) * *istd;
                        }
                    }
                    self.accumulate(grads, *input, da);
                }
            }
            Op::GroupNorm { input, gamma, beta, groups, xhat, inv_std } => {
                let s = xhat.shape().to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let cg = c / groups;
                let hw = h * w;
                let dys = dy.as_slice().expect("standard layout");
                let xh = xhat.as_slice().expect("standard layout");
                let g = self.nodes[*gamma].value.as_slice().expect("standard layout");
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![A::zero(); c];
                    let mut db = vec![A::zero(); c];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            let mut acc_g = A::zero();
                            let mut acc_b = A::zero();
                            for k in 0..hw {
                                acc_g = acc_g + dys[base + k] * xh[base + k];
                                acc_b = acc_b + dys[base + k];
                            }
                            dg[ci] = dg[ci] + acc_g;
                            db[ci] = db[ci] + acc_b;
                        }
                    }
                    if self.needs(*gamma) {
                        self.accumulate(grads, *gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dg).unwrap());
                    }
                    if self.needs(*beta) {
                        self.accumulate(grads, *beta, ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap());
                    }
                }
                if self.needs(*input) {
                    let group_len = cg * hw;
                    let inv_len = A::cast(1.0 / group_len as f64);
                    let mut da = vec![A::zero(); b * c * hw];
                    for bi in 0..b {
                        for gi in 0..*groups {
                            let base = (bi * c + gi * cg) * hw;
                            let mut mean_dxhat = A::zero();
                            let mut mean_dxhat_xhat = A::zero();
                            for k in 0..group_len {
                                let ci = gi * cg + k / hw;
                                let dxh = dys[base + k] * g[ci];
                                mean_dxhat = mean_dxhat + dxh;
                                mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh[base + k];
                            }
                            mean_dxhat = mean_dxhat * inv_len;
                            mean_dxhat_xhat = mean_dxhat_xhat * inv_len;
                            let istd = inv_std[[bi, gi]];
                            for k in 0..group_len {
                                let ci = gi * cg + k / hw;
                                let dxh = dys[base + k] * g[ci];
                                da[base + k] =
                                    (dxh - mean_dxhat - xh[base + k] * mean_dxhat_xhat) * istd;
                            }
                        }
                    }
                    self.accumulate(
                        grads,
                        *input,
                        ArrayD::from_shape_vec(IxDyn(&s), da).unwrap(),
                    );
                }
            }
            Op::Gelu(a) => {
                let da = ndarray::Zip::from(dy)
                    .and(&self.nodes[*a].value)
                    .map_collect(|&d, &x| d * gelu_bwd(x));
                self.accumulate(grads, *a, da);
            }
            Op::Silu(a) => {
                let da = ndarray::Zip::from(dy)
                    .and(&self.nodes[*a].value)
                    .map_collect(|&d, &x| {
                        let s = A::one() / (A::one() + (-x).exp());
                        d * s * (A::one() + x * (A::one() - s))
                    });
                self.accumulate(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let da = ndarray::Zip::from(dy)
                    .and(&self.nodes[*a].value)
                    .map_collect(|&d, &x| if x > *lo && x < *hi { d } else { A::zero() });
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCh(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let width = self.nodes[p].value.shape()[1];
                    if self.needs(p) {
                        let slice = dy
                            .slice_axis(Axis(1), ndarray::Slice::from(offset..offset + width))
                            .as_standard_layout()
                            .to_owned();
                        self.accumulate(grads, p, slice);
                    }
                    offset += width;
                }
            }
            Op::Sum(a) => {
                let sa = self.nodes[*a].value.shape().to_vec();
                let da = ArrayD::from_elem(IxDyn(&sa), dy[[0]]);
                self.accumulate(grads, *a, da);
            }
            Op::InterpTokens { input, table, out_tokens, row_len } => {
                let sa = self.nodes[*input].value.shape().to_vec();
                let in_tokens = sa[1];
                let mut da = ArrayD::<A>::zeros(IxDyn(&sa));
                let d = *row_len;
                let _ = out_tokens;
                for &(code, wgt) in table {
                    let out_tok = code / in_tokens;
                    let in_tok = code % in_tokens;
                    for k in 0..d {
                        da[[0, in_tok, k]] = da[[0, in_tok, k]] + dy[[0, out_tok, k]] * wgt;
                    }
                }
                self.accumulate(grads, *input, da);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<A>>], target: usize, contribution: ArrayD<A>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.zip_mut_with(&contribution, |a, &b| *a = *a + b),
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn to_standard<A: Scalar>(value: ArrayD<A>) -> ArrayD<A> {
    if value.is_standard_layout() {
        value
    } else {
        let shape = value.shape().to_vec();
        let flat: Vec<A> = value.iter().cloned().collect();
        ArrayD::from_shape_vec(IxDyn(&shape), flat).unwrap()
    }
}

/// Axis-permuted copy into standard layout. 3-D and 4-D inputs take
/// flat-index loops; other ranks use the generic path.
fn permute_copy<A: Scalar>(src: &ArrayD<A>, axes: &[usize]) -> ArrayD<A> {
    let s = src.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&ax| s[ax]).collect();
    let Some(xs) = src.as_slice() else {
        return src.view().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
    };
    match s.len() {
        4 => {
            let in_strides = [s[1] * s[2] * s[3], s[2] * s[3], s[3], 1];
            let st: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
            let mut out = Vec::with_capacity(xs.len());
            for i0 in 0..out_shape[0] {
                let b0 = i0 * st[0];
                for i1 in 0..out_shape[1] {
                    let b1 = b0 + i1 * st[1];
                    for i2 in 0..out_shape[2] {
                        let mut idx = b1 + i2 * st[2];
                        for _ in 0..out_shape[3] {
                            out.push(xs[idx]);
                            idx += st[3];
                        }
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap()
        }
        3 => {
            let in_strides = [s[1] * s[2], s[2], 1];
            let st: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
            let mut out = Vec::with_capacity(xs.len());
            for i0 in 0..out_shape[0] {
                let b0 = i0 * st[0];
                for i1 in 0..out_shape[1] {
                    let mut idx = b0 + i1 * st[1];
                    for _ in 0..out_shape[2] {
                        out.push(xs[idx]);
                        idx += st[2];
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap()
        }
        _ => src.view().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned(),
    }
}

fn gelu_fwd<A: Scalar>(x: A) -> A {
    let c = A::cast(0.7978845608028654); // sqrt(2/pi)
    let a = A::cast(0.044715);
    let half = A::cast(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (A::one() + u.tanh())
}

fn gelu_bwd<A: Scalar>(x: A) -> A {
    let c = A::cast(0.7978845608028654);
    let a = A::cast(0.044715);
    let half = A::cast(0.5);
    let three = A::cast(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = A::one() - t * t;
    half * (A::one() + t) + half * x * sech2 * c * (A::one() + three * a * x * x)
}

fn im2col_kernel<A: Scalar>(
    x: &ArrayViewD<A>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<A> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let ckk = c * kernel * kernel;
    let xs = x.as_slice().expect("tape values are standard layout");
    let mut out = vec![A::zero(); b * oh * ow * ckk];
    for bi in 0..b {
        for ci in 0..c {
            let x_base = (bi * c + ci) * h * w;
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let col_idx = (ci * kernel + ki) * kernel + kj;
                    for ohi in 0..oh {
                        let r = (ohi * stride + ki) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        let x_row = x_base + r as usize * w;
                        let mut out_idx = (bi * oh + ohi) * ow * ckk + col_idx;
                        let mut cc = kj as isize - pad as isize;
                        for _ in 0..ow {
                            if cc >= 0 && cc < w as isize {
                                out[out_idx] = xs[x_row + cc as usize];
                            }
                            cc += stride as isize;
                            out_idx += ckk;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b * oh * ow, ckk]), out).unwrap()
}

fn col2im_kernel<A: Scalar>(
    cols: &ArrayViewD<A>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<A> {
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let ckk = c * kernel * kernel;
    let cs = cols.as_slice().expect("tape values are standard layout");
    let mut out = vec![A::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let o_base = (bi * c + ci) * h * w;
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let col_idx = (ci * kernel + ki) * kernel + kj;
                    for ohi in 0..oh {
                        let r = (ohi * stride + ki) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        let o_row = o_base + r as usize * w;
                        let mut col_pos = (bi * oh + ohi) * ow * ckk + col_idx;
                        let mut cc = kj as isize - pad as isize;
                        for _ in 0..ow {
                            if cc >= 0 && cc < w as isize {
                                let slot = o_row + cc as usize;
                                out[slot] = out[slot] + cs[col_pos];
                            }
                            cc += stride as isize;
                            col_pos += ckk;
                        }
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap()
}
