//! Parameterized layers over the tape, and the parameter registry both
//! network stages share.

use super::tape::{Tape, Var};
use super::Scalar;
use crate::rng::Rng64;
use ndarray::{ArrayD, IxDyn};

/// Index of one named parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter storage. The flattening order is the
/// registration order, which models keep deterministic.
#[derive(Debug, Clone)]
pub struct ParamSet<A: Scalar> {
    entries: Vec<(String, ArrayD<A>)>,
}

impl<A: Scalar> Default for ParamSet<A> {
    fn default() -> Self {
        ParamSet::new()
    }
}

impl<A: Scalar> ParamSet<A> {
    pub fn new() -> ParamSet<A> {
        ParamSet { entries: Vec::new() }
    }

    pub fn push(&mut self, name: &str, value: ArrayD<A>) -> ParamId {
        self.entries.push((name.to_string(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<A> {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<A> {
        &mut self.entries[id.0].1
    }

    /// (name, shape) pairs in registration order.
    pub fn specs(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(n, v)| (n.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn flatten(&self) -> Vec<A> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, v) in &self.entries {
            out.extend(v.as_standard_layout().iter().cloned());
        }
        out
    }

    /// Overwrite all parameters from a flat vector in registration order.
    pub fn load_flat(&mut self, flat: &[A]) -> Result<(), super::NnError> {
        if flat.len() != self.total_len() {
            return Err(super::NnError::LengthMismatch {
                weights: self.total_len(),
                grads: flat.len(),
                state: 0,
            });
        }
        let mut offset = 0;
        for (_, v) in &mut self.entries {
            let n = v.len();
            let chunk = &flat[offset..offset + n];
            *v = ArrayD::from_shape_vec(IxDyn(v.shape()), chunk.to_vec()).unwrap();
            offset += n;
        }
        Ok(())
    }

    pub fn cast<B: Scalar>(&self) -> ParamSet<B> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), v.mapv(|x| B::cast(x.as_f64()))))
                .collect(),
        }
    }
}

/// Tape handles for every parameter, in registration order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Insert every parameter into the tape. With `trainable` the leaves
    /// collect gradients; otherwise they are constants (frozen model).
    pub fn bind<A: Scalar>(tape: &mut Tape<A>, params: &ParamSet<A>, trainable: bool) -> Binding {
        let vars = params
            .entries
            .iter()
            .map(|(_, v)| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for all parameters, flattened in registration order.
    /// Parameters untouched by the loss contribute zeros.
    pub fn flat_grads<A: Scalar>(&self, tape: &Tape<A>, grads: &super::tape::Grads<A>) -> Vec<A> {
        let mut out = Vec::new();
        for &v in &self.vars {
            match grads.get(v) {
                Some(g) => out.extend(g.as_standard_layout().iter().cloned()),
                None => out.extend(std::iter::repeat_n(A::zero(), tape.value(v).len())),
            }
        }
        out
    }
}

fn xavier_uniform<A: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng64) -> ArrayD<A> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || A::cast(rng.uniform_in(-limit, limit)))
}

/// Fully connected layer on 2-D input [n, in_dim].
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn init<A: Scalar>(
        params: &mut ParamSet<A>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng64,
    ) -> Dense {
        let w = params.push(
            &format!("{name}.w"),
            xavier_uniform(&[in_dim, out_dim], in_dim, out_dim, rng),
        );
        let b = params.push(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[1, out_dim])));
        Dense { w, b, in_dim, out_dim }
    }

    pub fn forward<A: Scalar>(&self, tape: &mut Tape<A>, bind: &Binding, x: Var) -> Var {
        let y = tape.matmul(x, bind.var(self.w));
        tape.add_broadcast(y, bind.var(self.b))
    }
}

/// 3x3-style square convolution lowered to im2col + gemm.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init<A: Scalar>(
        params: &mut ParamSet<A>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng64,
    ) -> Conv2d {
        let fan_in = in_ch * kernel * kernel;
        let fan_out = out_ch * kernel * kernel;
        let w = params.push(
            &format!("{name}.w"),
            xavier_uniform(&[fan_in, out_ch], fan_in, fan_out, rng),
        );
        let b = params.push(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[1, out_ch, 1, 1])));
        Conv2d { w, b, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<A: Scalar>(&self, tape: &mut Tape<A>, bind: &Binding, x: Var) -> Var {
        let s = tape.shape(x);
        assert_eq!(s[1], self.in_ch, "conv: channel mismatch");
        let (b, h, w) = (s[0], s[2], s[3]);
        let (oh, ow) = self.out_hw(h, w);
        let cols = tape.im2col(x, self.kernel, self.stride, self.pad);
        let y = tape.matmul(cols, bind.var(self.w)); // [B*OH*OW, OC]
        let y = tape.reshape(y, &[b, oh, ow, self.out_ch]);
        let y = tape.permute(y, &[0, 3, 1, 2]);
        tape.add_broadcast(y, bind.var(self.b))
    }
}

/// Last-axis layer normalization with learned affine.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init<A: Scalar>(params: &mut ParamSet<A>, name: &str, dim: usize) -> LayerNorm {
        let gamma = params.push(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[dim]), A::one()));
        let beta = params.push(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[dim])));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward<A: Scalar>(&self, tape: &mut Tape<A>, bind: &Binding, x: Var) -> Var {
        tape.layer_norm(x, bind.var(self.gamma), bind.var(self.beta))
    }
}

/// Channel-group normalization for (B, C, H, W) activations.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn init<A: Scalar>(
        params: &mut ParamSet<A>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> GroupNorm {
        let gamma =
            params.push(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), A::one()));
        let beta = params.push(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        GroupNorm { gamma, beta, channels, groups }
    }

    pub fn forward<A: Scalar>(&self, tape: &mut Tape<A>, bind: &Binding, x: Var) -> Var {
        tape.group_norm(x, bind.var(self.gamma), bind.var(self.beta), self.groups)
    }
}

/// Multi-head self-attention over (B, L, D) token stacks.
#[derive(Debug, Clone, Copy)]
pub struct Mhsa {
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
    pub dim: usize,
    pub heads: usize,
}

impl Mhsa {
    pub fn init<A: Scalar>(
        params: &mut ParamSet<A>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut Rng64,
    ) -> Mhsa {
        assert!(dim % heads == 0, "attention dim must divide into heads");
        Mhsa {
            wq: Dense::init(params, &format!("{name}.q"), dim, dim, rng),
            wk: Dense::init(params, &format!("{name}.k"), dim, dim, rng),
            wv: Dense::init(params, &format!("{name}.v"), dim, dim, rng),
            wo: Dense::init(params, &format!("{name}.o"), dim, dim, rng),
            dim,
            heads,
        }
    }

    pub fn forward<A: Scalar>(&self, tape: &mut Tape<A>, bind: &Binding, x: Var) -> Var {
        let s = tape.shape(x);
        assert_eq!(s.len(), 3, "attention expects (B, L, D)");
        let (b, l, d) = (s[0], s[1], s[2]);
        assert_eq!(d, self.dim, "attention dim mismatch");
        let dh = d / self.heads;

        let to_heads = |tape: &mut Tape<A>, dense: &Dense, x2d: Var| -> Var {
            let y = dense.forward(tape, bind, x2d); // [B*L, D]
            let y = tape.reshape(y, &[b, l, self.heads, dh]);
            let y = tape.permute(y, &[0, 2, 1, 3]); // (B, h, L, dh)
            tape.reshape(y, &[b * self.heads, l, dh])
        };

        let x2d = tape.reshape(x, &[b * l, d]);
        let q = to_heads(tape, &self.wq, x2d);
        let k = to_heads(tape, &self.wk, x2d);
        let v = to_heads(tape, &self.wv, x2d);

        let kt = tape.permute(k, &[0, 2, 1]); // (Bh, dh, L)
        let scores = tape.batch_matmul(q, kt); // (Bh, L, L)
        let scaled = tape.scale(scores, A::cast(1.0 / (dh as f64).sqrt()));
        let attn = tape.softmax_last(scaled);
        let ctx = tape.batch_matmul(attn, v); // (Bh, L, dh)

        let ctx = tape.reshape(ctx, &[b, self.heads, l, dh]);
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]); // (B, L, h, dh)
        let ctx = tape.reshape(ctx, &[b * l, d]);
        let out = self.wo.forward(tape, bind, ctx);
        tape.reshape(out, &[b, l, d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_flatten_round_trip() {
        let mut rng = Rng64::new(1);
        let mut ps = ParamSet::<f32>::new();
        let d = Dense::init(&mut ps, "lin", 3, 2, &mut rng);
        let flat = ps.flatten();
        assert_eq!(flat.len(), 3 * 2 + 2);
        let mut ps2 = ps.clone();
        ps2.load_flat(&flat).unwrap();
        assert_eq!(ps.value(d.w), ps2.value(d.w));
        assert_eq!(ps.value(d.b), ps2.value(d.b));
    }

    #[test]
    fn dense_forward_shape() {
        let mut rng = Rng64::new(2);
        let mut ps = ParamSet::<f64>::new();
        let d = Dense::init(&mut ps, "lin", 4, 3, &mut rng);
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &ps, true);
        let x = tape.constant(ArrayD::from_shape_simple_fn(IxDyn(&[5, 4]), || 0.5));
        let y = d.forward(&mut tape, &bind, x);
        assert_eq!(tape.shape(y), vec![5, 3]);
    }

    #[test]
    fn conv_output_shape() {
        let mut rng = Rng64::new(3);
        let mut ps = ParamSet::<f64>::new();
        let conv = Conv2d::init(&mut ps, "c", 3, 8, 3, 1, 1, &mut rng);
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &ps, true);
        let x = tape.constant(ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 8, 8]), || 0.1));
        let y = conv.forward(&mut tape, &bind, x);
        assert_eq!(tape.shape(y), vec![2, 8, 8, 8]);

        let strided = Conv2d::init(&mut ps, "s", 3, 4, 3, 2, 1, &mut rng);
        let mut tape2 = Tape::new();
        let bind2 = Binding::bind(&mut tape2, &ps, true);
        let x2 = tape2.constant(ArrayD::from_shape_simple_fn(IxDyn(&[1, 3, 8, 8]), || 0.1));
        let y2 = strided.forward(&mut tape2, &bind2, x2);
        assert_eq!(tape2.shape(y2), vec![1, 4, 4, 4]);
    }

    #[test]
    fn attention_shape_preserved() {
        let mut rng = Rng64::new(4);
        let mut ps = ParamSet::<f64>::new();
        let attn = Mhsa::init(&mut ps, "a", 8, 2, &mut rng);
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &ps, true);
        let x = tape.constant(ArrayD::from_shape_simple_fn(IxDyn(&[2, 5, 8]), || 0.3));
        let y = attn.forward(&mut tape, &bind, x);
        assert_eq!(tape.shape(y), vec![2, 5, 8]);
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut rng = Rng64::new(5);
            let mut ps = ParamSet::<f32>::new();
            let attn = Mhsa::init(&mut ps, "a", 16, 4, &mut rng);
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, &ps, false);
            let x = tape.constant(ArrayD::from_shape_simple_fn(IxDyn(&[1, 6, 16]), {
                let mut r = Rng64::new(99);
                move || r.uniform() as f32
            }));
            let y = attn.forward(&mut tape, &bind, x);
            tape.value(y).clone()
        };
        let a = build();
        let b = build();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
