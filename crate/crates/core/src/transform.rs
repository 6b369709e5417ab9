//! Stage 1: the modality transformation module. A small vision transformer
//! maps the 4-channel satellite stack to a coarse radar estimate in model
//! space, trained image-level under an exponential-weighted regression
//! loss that counterweights rare high-reflectivity pixels.

use crate::field::{normalize_channel, normalize_refl, Field, NormSpec, Scene, Units};
use crate::nn::{
    adam_step, AdamParams, AdamState, ArchDescriptor, Binding, Dense, LayerNorm, Mhsa, ModelBundle,
    NnError, ParamSet, Scalar, Tape, Tensor4, TrainMeta, Var,
};
use crate::rng::Rng64;
use ndarray::{Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("input side {side} not divisible by token patch {patch}")]
    IndivisibleShape { side: usize, patch: usize },
    #[error("embed dim {dim} not divisible by heads {heads}")]
    BadHeads { dim: usize, heads: usize },
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch between prediction and target")]
    ShapeMismatch,
    #[error("no mask-valid pixels in loss")]
    EmptyMask,
    #[error("non-finite loss weight (w0 = {w0}, w1 = {w1})")]
    NonFiniteWeight { w0: f64, w1: f64 },
    #[error("non-finite output from transform forward")]
    NonFiniteOutput,
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("bundle does not describe a transform model")]
    WrongBundleKind,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}

/// Vision-transformer hyperparameters plus the weighted-loss exponents.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    pub embed_patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub w0: f64,
    pub w1: f64,
    pub lr: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            embed_patch: 16,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            w0: 5.0,
            w1: 4.0,
            lr: 1e-4,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<(), TransformError> {
        if self.embed_dim % self.heads != 0 {
            return Err(TransformError::BadHeads { dim: self.embed_dim, heads: self.heads });
        }
        Ok(())
    }
}

struct Block {
    ln1: LayerNorm,
    attn: Mhsa,
    ln2: LayerNorm,
    fc1: Dense,
    fc2: Dense,
}

/// The transform network: patch embedding, learned positional embedding
/// (bilinearly resampled for unseen resolutions), transformer blocks, and
/// a per-token linear head folded back to a 1-channel field.
pub struct TransformModel<A: Scalar = f32> {
    pub cfg: TransformConfig,
    pub params: ParamSet<A>,
    pub in_channels: usize,
    /// Token grid (rows, cols) the positional embedding was trained at.
    pub train_grid: (usize, usize),
    pub model_lo: f64,
    pub model_hi: f64,
    embed: Dense,
    pos: crate::nn::ParamId,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Dense,
}

impl<A: Scalar> TransformModel<A> {
    pub fn init(
        cfg: &TransformConfig,
        in_channels: usize,
        train_rows: usize,
        train_cols: usize,
        norm: &NormSpec,
        seed: u64,
    ) -> Result<TransformModel<A>, TransformError> {
        cfg.validate()?;
        if train_rows % cfg.embed_patch != 0 {
            return Err(TransformError::IndivisibleShape { side: train_rows, patch: cfg.embed_patch });
        }
        if train_cols % cfg.embed_patch != 0 {
            return Err(TransformError::IndivisibleShape { side: train_cols, patch: cfg.embed_patch });
        }
        let mut rng = Rng64::new(seed);
        let mut params = ParamSet::new();
        let p = cfg.embed_patch;
        let d = cfg.embed_dim;
        let grid = (train_rows / p, train_cols / p);
        let tokens = grid.0 * grid.1;
        let embed = Dense::init(&mut params, "embed", in_channels * p * p, d, &mut rng);
        let pos = params.push(
            "pos",
            ArrayD::from_shape_simple_fn(IxDyn(&[1, tokens, d]), || A::cast(0.02 * rng.normal())),
        );
        let hidden = (d as f64 * cfg.mlp_ratio).round() as usize;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            blocks.push(Block {
                ln1: LayerNorm::init(&mut params, &format!("b{i}.ln1"), d),
                attn: Mhsa::init(&mut params, &format!("b{i}.attn"), d, cfg.heads, &mut rng),
                ln2: LayerNorm::init(&mut params, &format!("b{i}.ln2"), d),
                fc1: Dense::init(&mut params, &format!("b{i}.fc1"), d, hidden, &mut rng),
                fc2: Dense::init(&mut params, &format!("b{i}.fc2"), hidden, d, &mut rng),
            });
        }
        let final_ln = LayerNorm::init(&mut params, "final_ln", d);
        let head = Dense::init(&mut params, "head", d, p * p, &mut rng);
        Ok(TransformModel {
            cfg: cfg.clone(),
            params,
            in_channels,
            train_grid: grid,
            model_lo: norm.model_lo,
            model_hi: norm.model_hi,
            embed,
            pos,
            blocks,
            final_ln,
            head,
        })
    }

    /// Forward on the tape. Input (B, C, H, W) with H, W divisible by the
    /// token patch; output (B, 1, H, W) clamped to model range.
    pub fn forward(&self, tape: &mut Tape<A>, bind: &Binding, x: Var) -> Var {
        let raw = self.forward_unclamped(tape, bind, x);
        tape.clamp(raw, A::cast(self.model_lo), A::cast(self.model_hi))
    }

    /// Training-path forward: the clamp is applied only at inference, so
    /// saturated pixels keep their gradient during optimization.
    pub fn forward_unclamped(&self, tape: &mut Tape<A>, bind: &Binding, x: Var) -> Var {
        let s = tape.shape(x);
        let (b, h, w) = (s[0], s[2], s[3]);
        let p = self.cfg.embed_patch;
        let d = self.cfg.embed_dim;
        let grid = (h / p, w / p);
        let tokens = grid.0 * grid.1;

        let cols = tape.im2col(x, p, p, 0); // [B*T, C*p*p]
        let emb = self.embed.forward(tape, bind, cols); // [B*T, D]
        let mut tok = tape.reshape(emb, &[b, tokens, d]);

        let pos = if grid == self.train_grid {
            bind.var(self.pos)
        } else {
            tape.interp_tokens(bind.var(self.pos), self.train_grid, grid)
        };
        tok = tape.add_broadcast(tok, pos);

        for blk in &self.blocks {
            let normed = blk.ln1.forward(tape, bind, tok);
            let attn = blk.attn.forward(tape, bind, normed);
            tok = tape.add(tok, attn);
            let normed = blk.ln2.forward(tape, bind, tok);
            let n2d = tape.reshape(normed, &[b * tokens, d]);
            let hid = blk.fc1.forward(tape, bind, n2d);
            let hid = tape.gelu(hid);
            let out = blk.fc2.forward(tape, bind, hid);
            let out = tape.reshape(out, &[b, tokens, d]);
            tok = tape.add(tok, out);
        }

        let normed = self.final_ln.forward(tape, bind, tok);
        let n2d = tape.reshape(normed, &[b * tokens, d]);
        let pix = self.head.forward(tape, bind, n2d); // [B*T, p*p]
        tape.col2im(pix, b, 1, h, w, p, p, 0)
    }

    /// Inference without gradient tracking.
    pub fn infer(&self, x: &Array4<A>) -> Result<Array4<A>, TransformError> {
        let s = x.dim();
        if s.1 != self.in_channels {
            return Err(TransformError::ChannelMismatch { expected: self.in_channels, got: s.1 });
        }
        for (side, _) in [(s.2, "rows"), (s.3, "cols")] {
            if side % self.cfg.embed_patch != 0 {
                return Err(TransformError::IndivisibleShape { side, patch: self.cfg.embed_patch });
            }
        }
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &self.params, false);
        let input = tape.constant(x.clone().into_dyn());
        let out = self.forward(&mut tape, &bind, input);
        let value = tape.value(out);
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TransformError::NonFiniteOutput);
        }
        Ok(value
            .to_owned()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("forward output is 4-D"))
    }
}

impl TransformModel<f32> {
    pub fn to_bundle(&self, norm: &NormSpec, meta: TrainMeta) -> Result<ModelBundle, TransformError> {
        let train_rows = self.train_grid.0 * self.cfg.embed_patch;
        let train_cols = self.train_grid.1 * self.cfg.embed_patch;
        Ok(ModelBundle::new(
            ArchDescriptor::Transform {
                cfg: self.cfg.clone(),
                in_channels: self.in_channels,
                train_rows,
                train_cols,
            },
            self.params.specs(),
            norm.clone(),
            meta,
            self.params.flatten(),
        )?)
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<TransformModel<f32>, TransformError> {
        let ArchDescriptor::Transform { cfg, in_channels, train_rows, train_cols } = &bundle.arch
        else {
            return Err(TransformError::WrongBundleKind);
        };
        let mut model =
            TransformModel::init(cfg, *in_channels, *train_rows, *train_cols, &bundle.norm, 0)?;
        if model.params.specs() != bundle.params {
            return Err(TransformError::Nn(NnError::BadBundle(
                "parameter layout does not match architecture".into(),
            )));
        }
        model.params.load_flat(&bundle.weights)?;
        Ok(model)
    }
}

/// Map satellite channels, the stage-1 input, to a (B, 4, H, W) tensor in
/// normalized space.
pub fn scene_input<A: Scalar>(scene: &Scene, norm: &NormSpec) -> Result<Array4<A>, TransformError> {
    let (h, w) = (scene.rows(), scene.cols());
    let mut x = Array4::<A>::zeros((1, scene.satellite.len(), h, w));
    for (k, ch) in scene.satellite.iter().enumerate() {
        let normed = normalize_channel(ch, k, norm)?;
        for ((r, c), &v) in normed.values().indexed_iter() {
            x[[0, k, r, c]] = A::cast(v as f64);
        }
    }
    Ok(x)
}

/// Normalized radar target as a (B, 1, H, W) tensor.
pub fn scene_target<A: Scalar>(scene: &Scene, norm: &NormSpec) -> Result<Array4<A>, TransformError> {
    let normed = normalize_refl(&scene.radar, norm)?;
    let (h, w) = (scene.rows(), scene.cols());
    let mut y = Array4::<A>::zeros((1, 1, h, w));
    for ((r, c), &v) in normed.values().indexed_iter() {
        y[[0, 0, r, c]] = A::cast(v as f64);
    }
    Ok(y)
}

/// Apply the transform stage to a satellite tensor. Output is clamped to
/// the model range and validated finite.
pub fn tm_forward<A: Scalar>(
    satellite: &Tensor4<A>,
    model: &TransformModel<A>,
) -> Result<Tensor4<A>, TransformError> {
    let out = model.infer(satellite.data())?;
    Ok(Tensor4::new(out)?)
}

/// Exponential-weighted mean squared error
/// `mean_i exp(w0 * t_i^w1) * (pred_i - t_i)^2` over mask-valid pixels,
/// with targets already in [0, 1] weight space.
pub fn weighted_loss<A: Scalar>(
    pred: &ArrayD<A>,
    target: &ArrayD<A>,
    w0: f64,
    w1: f64,
    mask: Option<&ArrayD<bool>>,
) -> Result<f64, TransformError> {
    if pred.shape() != target.shape() {
        return Err(TransformError::ShapeMismatch);
    }
    if let Some(m) = mask {
        if m.shape() != pred.shape() {
            return Err(TransformError::ShapeMismatch);
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, (&p, &t)) in pred.iter().zip(target.iter()).enumerate() {
        let valid = mask.map(|m| m.as_slice().unwrap()[i]).unwrap_or(true);
        if !valid {
            continue;
        }
        let weight = (w0 * t.as_f64().powf(w1)).exp();
        if !weight.is_finite() {
            return Err(TransformError::NonFiniteWeight { w0, w1 });
        }
        let diff = p.as_f64() - t.as_f64();
        sum += weight * diff * diff;
        count += 1;
    }
    if count == 0 {
        return Err(TransformError::EmptyMask);
    }
    Ok(sum / count as f64)
}

/// Tape version: target and mask are constants, gradient flows through the
/// prediction only. Weights are precomputed from the target.
pub fn weighted_loss_on_tape<A: Scalar>(
    tape: &mut Tape<A>,
    pred: Var,
    target: &ArrayD<A>,
    w0: f64,
    w1: f64,
    mask: Option<&ArrayD<bool>>,
) -> Result<Var, TransformError> {
    if tape.shape(pred) != target.shape() {
        return Err(TransformError::ShapeMismatch);
    }
    let count = match mask {
        Some(m) => m.iter().filter(|&&v| v).count(),
        None => target.len(),
    };
    if count == 0 {
        return Err(TransformError::EmptyMask);
    }
    let inv_m = 1.0 / count as f64;
    let mut weights = ArrayD::<A>::zeros(target.raw_dim());
    for (i, (&t, wslot)) in target.iter().zip(weights.iter_mut()).enumerate() {
        let valid = mask.map(|m| m.as_slice().unwrap()[i]).unwrap_or(true);
        if !valid {
            continue;
        }
        let w = (w0 * t.as_f64().powf(w1)).exp();
        if !w.is_finite() {
            return Err(TransformError::NonFiniteWeight { w0, w1 });
        }
        *wslot = A::cast(w * inv_m);
    }
    let t_const = tape.constant(target.clone());
    let diff = tape.sub(pred, t_const);
    let sq = tape.mul(diff, diff);
    let weighted = tape.mul_const(sq, weights);
    Ok(tape.sum(weighted))
}

/// Output of a stage-1 training run.
pub struct TmTrainOutput {
    pub model: TransformModel<f32>,
    pub loss_log: Vec<f32>,
}

/// Train the transform stage image-level on whole scenes. Deterministic
/// given the seed; the loss log has one entry per step.
pub fn train_tm(
    scenes: &[Scene],
    cfg: &TransformConfig,
    norm: &NormSpec,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<TmTrainOutput, TransformError> {
    if scenes.is_empty() {
        return Err(TransformError::EmptyDataset);
    }
    let rows = scenes[0].rows();
    let cols = scenes[0].cols();
    let model = TransformModel::<f32>::init(cfg, 4, rows, cols, norm, seed)?;
    train_tm_from(model, scenes, cfg, norm, steps, batch, seed)
}

/// Continue training an existing model (used for the overfit oracle and
/// resumption). The model's own weights are the starting point.
pub fn train_tm_from(
    mut model: TransformModel<f32>,
    scenes: &[Scene],
    cfg: &TransformConfig,
    norm: &NormSpec,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<TmTrainOutput, TransformError> {
    if scenes.is_empty() {
        return Err(TransformError::EmptyDataset);
    }
    let batch = batch.max(1);
    let span = norm.model_hi - norm.model_lo;

    // Precompute normalized inputs, 0-1 weight-space targets, and masks.
    let mut inputs = Vec::with_capacity(scenes.len());
    let mut targets01 = Vec::with_capacity(scenes.len());
    let mut masks = Vec::with_capacity(scenes.len());
    for scene in scenes {
        inputs.push(scene_input::<f32>(scene, norm)?);
        let t = scene_target::<f32>(scene, norm)?;
        targets01.push(t.mapv(|v| ((v as f64 - norm.model_lo) / span) as f32));
        let (h, w) = (scene.rows(), scene.cols());
        let mut m = ArrayD::from_elem(IxDyn(&[1, 1, h, w]), true);
        for ((r, c), &valid) in scene.radar.mask().indexed_iter() {
            m[[0, 0, r, c]] = valid;
        }
        masks.push(m);
    }

    let mut flat = model.params.flatten();
    let mut state = AdamState::<f32>::zeros(flat.len());
    let adam = AdamParams::with_lr(cfg.lr);
    let mut batch_rng = Rng64::new(seed).substream(0x1b);
    let mut loss_log = Vec::with_capacity(steps);

    for step in 0..steps {
        // Assemble the batch.
        let idx: Vec<usize> =
            (0..batch).map(|_| batch_rng.below(scenes.len() as u64) as usize).collect();
        let (h, w) = (scenes[idx[0]].rows(), scenes[idx[0]].cols());
        let mut x = Array4::<f32>::zeros((batch, 4, h, w));
        let mut t01 = ArrayD::<f32>::zeros(IxDyn(&[batch, 1, h, w]));
        let mut mask = ArrayD::from_elem(IxDyn(&[batch, 1, h, w]), true);
        for (bi, &i) in idx.iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(0), bi).assign(&inputs[i].index_axis(ndarray::Axis(0), 0));
            t01.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&targets01[i].index_axis(ndarray::Axis(0), 0).into_dyn());
            mask.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&masks[i].index_axis(ndarray::Axis(0), 0));
        }

        let mut tape = Tape::<f32>::new();
        let bind = Binding::bind(&mut tape, &model.params, true);
        let input = tape.constant(x.into_dyn());
        let pred = model.forward_unclamped(&mut tape, &bind, input);
        // Rescale model-space prediction into [0, 1] weight space.
        let pred_scaled = tape.scale(pred, (1.0 / span) as f32);
        let shift = tape.constant(ArrayD::from_elem(
            IxDyn(&[1, 1, 1, 1]),
            (-norm.model_lo / span) as f32,
        ));
        let pred01 = tape.add_broadcast(pred_scaled, shift);
        let loss = weighted_loss_on_tape(&mut tape, pred01, &t01, cfg.w0, cfg.w1, Some(&mask))?;
        let loss_value = tape.value(loss)[[0]];
        if !loss_value.is_finite() {
            return Err(TransformError::Diverged { step });
        }
        loss_log.push(loss_value);

        let grads = tape.backward(loss);
        let flat_grads = bind.flat_grads(&tape, &grads);
        adam_step(&mut flat, &flat_grads, &mut state, &adam)?;
        model.params.load_flat(&flat)?;
    }

    Ok(TmTrainOutput { model, loss_log })
}

/// Run the frozen transform stage over a whole scene and return the
/// estimate as a dBZ field.
pub fn tm_estimate_field(
    model: &TransformModel<f32>,
    scene: &Scene,
    norm: &NormSpec,
) -> Result<Field, TransformError> {
    let x = scene_input::<f32>(scene, norm)?;
    let out = model.infer(&x)?;
    let (h, w) = (scene.rows(), scene.cols());
    let values = ndarray::Array2::from_shape_fn((h, w), |(r, c)| out[[0, 0, r, c]]);
    let normalized = Field::new(values, Units::Normalized, scene.radar.mask().clone())?;
    Ok(crate::field::denormalize_refl(&normalized, norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check_in, scalarize};
    use crate::synthdata::{gen_scene, gen_scenes, StormParams};
    use ndarray::{Array4, IxDyn};

    fn toy_cfg() -> TransformConfig {
        TransformConfig {
            embed_patch: 8,
            embed_dim: 32,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            w0: 5.0,
            w1: 4.0,
            lr: 1e-3,
        }
    }

    #[test]
    fn forward_shape_contract() {
        let cfg = TransformConfig::default();
        let norm = NormSpec::default();
        let model = TransformModel::<f32>::init(&cfg, 4, 64, 64, &norm, 1).unwrap();
        let mut rng = Rng64::new(2);
        let x = Array4::from_shape_simple_fn((2, 4, 64, 64), || rng.uniform_in(-1.0, 1.0) as f32);
        let t = Tensor4::new(x).unwrap();
        let y = tm_forward(&t, &model).unwrap();
        assert_eq!(y.shape(), [2, 1, 64, 64]);
        for &v in y.data().iter() {
            assert!(v.is_finite());
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn indivisible_shape_rejected() {
        let cfg = toy_cfg();
        let norm = NormSpec::default();
        let model = TransformModel::<f32>::init(&cfg, 4, 32, 32, &norm, 1).unwrap();
        let x = Tensor4::new(Array4::zeros((1, 4, 33, 32))).unwrap();
        assert!(matches!(
            tm_forward(&x, &model),
            Err(TransformError::IndivisibleShape { .. })
        ));
    }

    #[test]
    fn weighted_loss_examples() {
        // Zero residual.
        let p = ArrayD::from_elem(IxDyn(&[4]), 0.25f64);
        assert_eq!(weighted_loss(&p, &p, 5.0, 4.0, None).unwrap(), 0.0);

        // w0 = 0 reduces to plain MSE.
        let t = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.2f64, 0.8]).unwrap();
        let q = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.4f64, 0.5]).unwrap();
        let mse = ((0.4f64 - 0.2).powi(2) + (0.5f64 - 0.8).powi(2)) / 2.0;
        assert!((weighted_loss(&q, &t, 0.0, 4.0, None).unwrap() - mse).abs() < 1e-15);

        // Single pixel, hand-evaluated.
        let t1 = ArrayD::from_elem(IxDyn(&[1]), 0.5f64);
        let p1 = ArrayD::from_elem(IxDyn(&[1]), 0.3f64);
        let v = weighted_loss(&p1, &t1, 5.0, 4.0, None).unwrap();
        let expect = (5.0f64 * 0.5f64.powi(4)).exp() * 0.04;
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.0546735).abs() < 1e-7);
    }

    #[test]
    fn weighted_loss_errors() {
        let p = ArrayD::from_elem(IxDyn(&[2]), 0.5f64);
        let mask = ArrayD::from_elem(IxDyn(&[2]), false);
        assert!(matches!(
            weighted_loss(&p, &p, 5.0, 4.0, Some(&mask)),
            Err(TransformError::EmptyMask)
        ));
        assert!(matches!(
            weighted_loss(&p, &p, 1e10, 1.0, None),
            Err(TransformError::NonFiniteWeight { .. })
        ));
        let q = ArrayD::from_elem(IxDyn(&[3]), 0.5f64);
        assert!(matches!(weighted_loss(&p, &q, 5.0, 4.0, None), Err(TransformError::ShapeMismatch)));
    }

    #[test]
    fn weighted_loss_monotone_in_w0() {
        let t = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3f64, 0.9]).unwrap();
        let p = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5f64, 0.7]).unwrap();
        let mut prev = weighted_loss(&p, &t, 0.0, 4.0, None).unwrap();
        for w0 in [1.0, 2.0, 5.0, 8.0] {
            let cur = weighted_loss(&p, &t, w0, 4.0, None).unwrap();
            assert!(cur >= prev, "loss must not decrease in w0");
            prev = cur;
        }
    }

    #[test]
    fn weighted_loss_gradient_matches_fd() {
        let mut rng = Rng64::new(5);
        let target =
            ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 4, 4]), || rng.uniform_in(0.0, 1.0));
        let input = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 4, 4]), || rng.uniform_in(0.0, 1.0));
        let err = grad_check_in(
            |tape, x| {
                weighted_loss_on_tape(tape, x, &target, 5.0, 4.0, None).unwrap()
            },
            &input,
            11,
        )
        .unwrap();
        assert!(err < 1e-4, "weighted loss grad error {err}");
    }

    #[test]
    fn tape_loss_matches_direct() {
        let mut rng = Rng64::new(6);
        let target =
            ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 3, 3]), || rng.uniform_in(0.0, 1.0));
        let pred = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 3, 3]), || rng.uniform_in(0.0, 1.0));
        let direct = weighted_loss(&pred, &target, 5.0, 4.0, None).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(pred);
        let l = weighted_loss_on_tape(&mut tape, p, &target, 5.0, 4.0, None).unwrap();
        assert!((tape.value(l)[[0]] - direct).abs() < 1e-12);
    }

    #[test]
    fn full_transform_grad_check_toy() {
        let cfg = toy_cfg();
        let norm = NormSpec::default();
        let model = TransformModel::<f64>::init(&cfg, 2, 16, 16, &norm, 3).unwrap();
        let mut rng = Rng64::new(7);
        let input =
            ArrayD::from_shape_simple_fn(IxDyn(&[1, 2, 16, 16]), || rng.uniform_in(-0.5, 0.5));
        let err = grad_check_in(
            |tape, x| {
                let bind = Binding::bind(tape, &model.params, false);
                let y = model.forward(tape, &bind, x);
                scalarize(tape, y, 13)
            },
            &input,
            17,
        )
        .unwrap();
        assert!(err < 1e-3, "full transform grad error {err}");
    }

    #[test]
    fn zero_steps_returns_init() {
        let scenes = gen_scenes(&StormParams::default(), 2, 32, 32, 10).unwrap();
        let cfg = toy_cfg();
        let norm = NormSpec::default();
        let init = TransformModel::<f32>::init(&cfg, 4, 32, 32, &norm, 42).unwrap();
        let init_flat = init.params.flatten();
        let out = train_tm(&scenes, &cfg, &norm, 0, 2, 42).unwrap();
        assert_eq!(out.model.params.flatten(), init_flat);
        assert!(out.loss_log.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let scenes = gen_scenes(&StormParams::default(), 3, 32, 32, 20).unwrap();
        let cfg = toy_cfg();
        let norm = NormSpec::default();
        let a = train_tm(&scenes, &cfg, &norm, 5, 2, 9).unwrap();
        let b = train_tm(&scenes, &cfg, &norm, 5, 2, 9).unwrap();
        assert_eq!(a.loss_log.len(), 5);
        for (x, y) in a.loss_log.iter().zip(b.loss_log.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn overfit_single_batch() {
        // One fixed scene, 500 steps: the loss must fall below 1% of its
        // starting value.
        let params = StormParams { seed: 31, ..Default::default() };
        let scene = gen_scene(&params, 32, 32).unwrap();
        let cfg = toy_cfg();
        let norm = NormSpec::default();
        let out = train_tm(&[scene], &cfg, &norm, 500, 1, 77).unwrap();
        let first = out.loss_log[0];
        let last = *out.loss_log.last().unwrap();
        assert!(
            last < 0.01 * first,
            "overfit failed: first {first}, last {last}"
        );
    }

    #[test]
    fn bundle_round_trip_preserves_model() {
        let cfg = toy_cfg();
        let norm = NormSpec::default();
        let model = TransformModel::<f32>::init(&cfg, 4, 32, 32, &norm, 5).unwrap();
        let bundle = model.to_bundle(&norm, TrainMeta { steps: 0, seed: 5 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tm.bundle");
        bundle.save(&path).unwrap();
        let restored = TransformModel::from_bundle(&ModelBundle::load(&path).unwrap()).unwrap();
        assert_eq!(model.params.flatten(), restored.params.flatten());
    }

    #[test]
    fn patch_shuffle_equivariance_with_zeroed_pos() {
        // With positional embeddings zeroed, shuffling input token patches
        // shuffles output patches identically.
        let cfg = toy_cfg();
        let norm = NormSpec::default();
        let mut model = TransformModel::<f32>::init(&cfg, 1, 16, 16, &norm, 8).unwrap();
        model.params.value_mut(model.pos).fill(0.0);
        let p = cfg.embed_patch;

        // 2x2 patch grid with distinct constant patches.
        let vals = [0.1f32, -0.2, 0.3, -0.4];
        let build = |order: [usize; 4]| {
            let mut x = Array4::<f32>::zeros((1, 1, 16, 16));
            for (slot, &src) in order.iter().enumerate() {
                let (pr, pc) = (slot / 2, slot % 2);
                for r in 0..p {
                    for c in 0..p {
                        x[[0, 0, pr * p + r, pc * p + c]] = vals[src];
                    }
                }
            }
            x
        };
        let identity = model.infer(&build([0, 1, 2, 3])).unwrap();
        let swapped = model.infer(&build([1, 0, 3, 2])).unwrap();
        // Patch (0,0) of swapped must equal patch (0,1) of identity.
        for r in 0..p {
            for c in 0..p {
                assert!(
                    (swapped[[0, 0, r, c]] - identity[[0, 0, r, p + c]]).abs() < 1e-5,
                    "patch permutation not respected"
                );
            }
        }
    }

    #[test]
    fn beats_constant_mean_predictor() {
        // Small stage-1 sanity run: after a short training run the estimate
        // must beat predicting the training-mean everywhere.
        let scenes = gen_scenes(&StormParams::default(), 8, 32, 32, 300).unwrap();
        let (train, val) = scenes.split_at(6);
        let cfg = toy_cfg();
        let norm = NormSpec::default();
        let out = train_tm(train, &cfg, &norm, 400, 2, 11).unwrap();

        let mean_dbz = {
            let mut sum = 0.0f64;
            let mut n = 0usize;
            for s in train {
                for &v in s.radar.values().iter() {
                    sum += v as f64;
                    n += 1;
                }
            }
            (sum / n as f64) as f32
        };
        let mut model_rmse = 0.0;
        let mut const_rmse = 0.0;
        for s in val {
            let est = tm_estimate_field(&out.model, s, &norm).unwrap();
            model_rmse += crate::metrics::rmse(&est, &s.radar).unwrap();
            let const_field = Field::from_values(
                ndarray::Array2::from_elem((s.rows(), s.cols()), mean_dbz),
                Units::Dbz,
            )
            .unwrap();
            const_rmse += crate::metrics::rmse(&const_field, &s.radar).unwrap();
        }
        assert!(
            model_rmse < const_rmse,
            "trained RMSE {model_rmse} must beat constant predictor {const_rmse}"
        );
    }
}
