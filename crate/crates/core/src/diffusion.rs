//! Stage 2: the conditional denoising diffusion model. A fixed Markov
//! forward chain corrupts the normalized radar field; a UNet-style
//! denoiser learns to predict the injected noise given the corrupted
//! field, the time embedding, and a condition stack (satellite channels
//! and/or the frozen stage-1 estimate); reverse sampling walks the chain
//! back from pure Gaussian noise.

use crate::field::{Field, NormSpec, Scene, Units};
use crate::nn::{
    adam_step, time_embed, AdamParams, AdamState, ArchDescriptor, Binding, Conv2d, Dense,
    GroupNorm, ModelBundle, NnError, ParamSet, Scalar, Tape, Tensor4, TrainMeta, Var,
};
use crate::rng::Rng64;
use crate::transform::{scene_input, scene_target, TransformModel};
use ndarray::{Array4, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule needs T >= 1, got {0}")]
    BadLength(usize),
    #[error("beta bounds must satisfy 0 < beta_min <= beta_max < 1, got [{min}, {max}]")]
    BadBetaBounds { min: f64, max: f64 },
    #[error("time step {t} outside [1, {t_max}]")]
    TimeOutOfRange { t: usize, t_max: usize },
    #[error("shape mismatch: {expected:?} vs {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("condition mode {mode:?} requires {missing}")]
    MissingConditionInput { mode: ConditionMode, missing: &'static str },
    #[error("condition channels {got} do not match mode {mode:?} (wants {expected})")]
    ConditionChannels { mode: ConditionMode, expected: usize, got: usize },
    #[error("denoiser needs rows and cols divisible by {0}")]
    IndivisibleShape(usize),
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("non-finite intermediate at reverse step t = {0}")]
    NonFiniteAtStep(usize),
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("transform bundle required for mode {0:?}")]
    MissingTmBundle(ConditionMode),
    #[error("bundle does not describe a denoiser model")]
    WrongBundleKind,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Transform(#[from] crate::transform::TransformError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
}

/// Which inputs condition the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    SatelliteOnly,
    EstimateOnly,
    Both,
}

impl ConditionMode {
    pub fn channels(&self) -> usize {
        match self {
            ConditionMode::SatelliteOnly => 4,
            ConditionMode::EstimateOnly => 1,
            ConditionMode::Both => 5,
        }
    }

    pub fn needs_estimate(&self) -> bool {
        !matches!(self, ConditionMode::SatelliteOnly)
    }

    pub fn needs_satellite(&self) -> bool {
        !matches!(self, ConditionMode::EstimateOnly)
    }
}

/// Precomputed variance schedule of the forward chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub t_steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// 1-indexed accessors matching the chain convention t = 1..=T.
    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
    pub fn sigma_at(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_steps {
            return Err(DiffusionError::TimeOutOfRange { t, t_max: self.t_steps });
        }
        Ok(())
    }

    /// Subsequence stepping for faster sampling: keep timesteps
    /// {stride, 2*stride, ...} (always including T) and rebuild the
    /// per-step variances so the cumulative products match the original
    /// schedule at the kept steps.
    pub fn strided(&self, stride: usize) -> SampleSchedule {
        let stride = stride.max(1);
        let mut kept: Vec<usize> = (1..=self.t_steps / stride).map(|j| j * stride).collect();
        if kept.last() != Some(&self.t_steps) {
            kept.push(self.t_steps);
        }
        let mut beta = Vec::with_capacity(kept.len());
        let mut prev_bar = 1.0f64;
        for &t in &kept {
            let bar = self.alpha_bar_at(t);
            beta.push(1.0 - bar / prev_bar);
            prev_bar = bar;
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
        SampleSchedule {
            schedule: NoiseSchedule { t_steps: kept.len(), beta, alpha, alpha_bar, sigma },
            orig_t: kept,
        }
    }
}

/// A (possibly strided) schedule to drive reverse sampling; `orig_t[j]`
/// is the training-time step index used for the time embedding at
/// sub-step j+1.
#[derive(Debug, Clone)]
pub struct SampleSchedule {
    pub schedule: NoiseSchedule,
    pub orig_t: Vec<usize>,
}

impl SampleSchedule {
    pub fn full(s: &NoiseSchedule) -> SampleSchedule {
        SampleSchedule { schedule: s.clone(), orig_t: (1..=s.t_steps).collect() }
    }
}

/// Linear variance schedule from `beta_min` to `beta_max` over T steps.
pub fn build_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, DiffusionError> {
    if t_steps < 1 {
        return Err(DiffusionError::BadLength(t_steps));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::BadBetaBounds { min: beta_min, max: beta_max });
    }
    let beta: Vec<f64> = if t_steps == 1 {
        vec![beta_min]
    } else {
        (0..t_steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut prod = 1.0f64;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule { t_steps, beta, alpha, alpha_bar, sigma })
}

/// Closed-form forward corruption:
/// `y_t = sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_sample<A: Scalar>(
    y0: &Tensor4<A>,
    t: usize,
    eps: &Tensor4<A>,
    s: &NoiseSchedule,
) -> Result<Tensor4<A>, DiffusionError> {
    s.check_t(t)?;
    if y0.shape() != eps.shape() {
        return Err(DiffusionError::ShapeMismatch {
            expected: y0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let bar = s.alpha_bar_at(t);
    let c0 = A::cast(bar.sqrt());
    let c1 = A::cast((1.0 - bar).sqrt());
    let data = ndarray::Zip::from(y0.data())
        .and(eps.data())
        .map_collect(|&y, &e| c0 * y + c1 * e);
    Ok(Tensor4::new(data)?)
}

/// One reverse transition:
/// `y_{t-1} = (y_t - (1-alpha_t)/sqrt(1-alpha_bar_t) * eps_pred) / sqrt(alpha_t) + sigma_t * z`,
/// with z forced to zero at t = 1.
pub fn reverse_step<A: Scalar>(
    y_t: &Tensor4<A>,
    t: usize,
    eps_pred: &Tensor4<A>,
    z: Option<&Tensor4<A>>,
    s: &NoiseSchedule,
) -> Result<Tensor4<A>, DiffusionError> {
    s.check_t(t)?;
    if y_t.shape() != eps_pred.shape() {
        return Err(DiffusionError::ShapeMismatch {
            expected: y_t.shape().to_vec(),
            got: eps_pred.shape().to_vec(),
        });
    }
    let alpha = s.alpha_at(t);
    let bar = s.alpha_bar_at(t);
    let inv_sqrt_alpha = A::cast(1.0 / alpha.sqrt());
    let coef = A::cast((1.0 - alpha) / (1.0 - bar).sqrt());
    let mut data = ndarray::Zip::from(y_t.data())
        .and(eps_pred.data())
        .map_collect(|&y, &e| inv_sqrt_alpha * (y - coef * e));
    if t > 1 {
        if let Some(noise) = z {
            if noise.shape() != y_t.shape() {
                return Err(DiffusionError::ShapeMismatch {
                    expected: y_t.shape().to_vec(),
                    got: noise.shape().to_vec(),
                });
            }
            let sigma = A::cast(s.sigma_at(t));
            data.zip_mut_with(noise.data(), |d, &n| *d = *d + sigma * n);
        }
    }
    Ok(Tensor4::new(data)?)
}

/// Stack condition channels in the fixed order [ABI-C07, ABI-C09,
/// ABI-C13, GLM, estimate], restricted to the mode's subset.
pub fn assemble_condition<A: Scalar>(
    mode: ConditionMode,
    satellite: Option<&Tensor4<A>>,
    estimate: Option<&Tensor4<A>>,
) -> Result<Tensor4<A>, DiffusionError> {
    let mut parts: Vec<&Array4<A>> = Vec::new();
    if mode.needs_satellite() {
        let sat = satellite.ok_or(DiffusionError::MissingConditionInput {
            mode,
            missing: "satellite channels",
        })?;
        if sat.shape()[1] != 4 {
            return Err(DiffusionError::ConditionChannels { mode, expected: 4, got: sat.shape()[1] });
        }
        parts.push(sat.data());
    }
    if mode.needs_estimate() {
        let est = estimate.ok_or(DiffusionError::MissingConditionInput {
            mode,
            missing: "stage-1 estimate",
        })?;
        if est.shape()[1] != 1 {
            return Err(DiffusionError::ConditionChannels { mode, expected: 1, got: est.shape()[1] });
        }
        parts.push(est.data());
    }
    let first = parts[0].dim();
    for p in &parts {
        let d = p.dim();
        if d.0 != first.0 || d.2 != first.2 || d.3 != first.3 {
            return Err(DiffusionError::ShapeMismatch {
                expected: vec![first.0, first.1, first.2, first.3],
                got: vec![d.0, d.1, d.2, d.3],
            });
        }
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let data = ndarray::concatenate(Axis(1), &views).expect("shapes validated");
    Ok(Tensor4::new(data)?)
}

/// Denoiser hyperparameters. `condition_channels` must agree with the
/// conditioning mode.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub condition_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { base_channels: 32, depth: 3, time_dim: 128, condition_channels: 5 }
    }
}

impl DenoiserConfig {
    pub fn for_mode(mode: ConditionMode) -> DenoiserConfig {
        DenoiserConfig { condition_channels: mode.channels(), ..Default::default() }
    }

    pub fn validate(&self, mode: ConditionMode) -> Result<(), DiffusionError> {
        if self.depth < 1 {
            return Err(DiffusionError::BadLength(self.depth));
        }
        if self.condition_channels != mode.channels() {
            return Err(DiffusionError::ConditionChannels {
                mode,
                expected: mode.channels(),
                got: self.condition_channels,
            });
        }
        Ok(())
    }
}

/// Anything that can predict the injected noise; lets tests drive the
/// samplers with stubs.
pub trait NoisePredictor<A: Scalar> {
    fn predict(
        &self,
        y_t: &Array4<A>,
        condition: &Array4<A>,
        t: usize,
    ) -> Result<Array4<A>, DiffusionError>;
}

fn norm_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

struct ConvBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    time_proj: Dense,
    conv2: Conv2d,
    gn2: GroupNorm,
}

impl ConvBlock {
    fn init<A: Scalar>(
        params: &mut ParamSet<A>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        time_dim: usize,
        rng: &mut Rng64,
    ) -> ConvBlock {
        ConvBlock {
            conv1: Conv2d::init(params, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, rng),
            gn1: GroupNorm::init(params, &format!("{name}.gn1"), out_ch, norm_groups(out_ch)),
            time_proj: Dense::init(params, &format!("{name}.time"), time_dim, out_ch, rng),
            conv2: Conv2d::init(params, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng),
            gn2: GroupNorm::init(params, &format!("{name}.gn2"), out_ch, norm_groups(out_ch)),
        }
    }

    fn forward<A: Scalar>(&self, tape: &mut Tape<A>, bind: &Binding, x: Var, t_emb: Var) -> Var {
        let h = self.conv1.forward(tape, bind, x);
        let h = self.gn1.forward(tape, bind, h);
        let h = tape.silu(h);
        let tb = self.time_proj.forward(tape, bind, t_emb); // (1, out_ch)
        let tb = tape.reshape(tb, &[1, self.conv1.out_ch, 1, 1]);
        let h = tape.add_broadcast(h, tb);
        let h = self.conv2.forward(tape, bind, h);
        let h = self.gn2.forward(tape, bind, h);
        tape.silu(h)
    }
}

/// Encoder-decoder noise predictor with skip connections and additive
/// time conditioning in every block.
pub struct DenoiserModel<A: Scalar = f32> {
    pub cfg: DenoiserConfig,
    pub mode: ConditionMode,
    pub t_steps: usize,
    pub model_lo: f64,
    pub model_hi: f64,
    pub params: ParamSet<A>,
    stem: Conv2d,
    down_blocks: Vec<ConvBlock>,
    downs: Vec<Conv2d>,
    mid: ConvBlock,
    ups: Vec<Conv2d>,
    up_blocks: Vec<ConvBlock>,
    head: Conv2d,
}

impl<A: Scalar> DenoiserModel<A> {
    pub fn init(
        cfg: &DenoiserConfig,
        mode: ConditionMode,
        t_steps: usize,
        norm: &NormSpec,
        seed: u64,
    ) -> Result<DenoiserModel<A>, DiffusionError> {
        cfg.validate(mode)?;
        let mut rng = Rng64::new(seed);
        let mut params = ParamSet::new();
        let in_ch = 1 + cfg.condition_channels;
        let widths: Vec<usize> = (0..=cfg.depth).map(|i| cfg.base_channels << i).collect();
        let stem = Conv2d::init(&mut params, "stem", in_ch, widths[0], 3, 1, 1, &mut rng);
        let mut down_blocks = Vec::new();
        let mut downs = Vec::new();
        for i in 0..cfg.depth {
            down_blocks.push(ConvBlock::init(
                &mut params,
                &format!("down{i}"),
                widths[i],
                widths[i],
                cfg.time_dim,
                &mut rng,
            ));
            downs.push(Conv2d::init(
                &mut params,
                &format!("down{i}.pool"),
                widths[i],
                widths[i + 1],
                3,
                2,
                1,
                &mut rng,
            ));
        }
        let mid = ConvBlock::init(
            &mut params,
            "mid",
            widths[cfg.depth],
            widths[cfg.depth],
            cfg.time_dim,
            &mut rng,
        );
        let mut ups = Vec::new();
        let mut up_blocks = Vec::new();
        for i in (0..cfg.depth).rev() {
            ups.push(Conv2d::init(
                &mut params,
                &format!("up{i}.proj"),
                widths[i + 1],
                widths[i],
                3,
                1,
                1,
                &mut rng,
            ));
            up_blocks.push(ConvBlock::init(
                &mut params,
                &format!("up{i}"),
                2 * widths[i],
                widths[i],
                cfg.time_dim,
                &mut rng,
            ));
        }
        let head = Conv2d::init(&mut params, "head", widths[0], 1, 3, 1, 1, &mut rng);
        Ok(DenoiserModel {
            cfg: cfg.clone(),
            mode,
            t_steps,
            model_lo: norm.model_lo,
            model_hi: norm.model_hi,
            params,
            stem,
            down_blocks,
            downs,
            mid,
            ups,
            up_blocks,
            head,
        })
    }

    /// Tape forward over concat(y_t, condition). `x` is (B, 1+cond, H, W)
    /// with H, W divisible by 2^depth.
    pub fn forward(&self, tape: &mut Tape<A>, bind: &Binding, x: Var, t: usize) -> Var {
        let emb = time_embed(t, self.cfg.time_dim, self.t_steps).expect("validated t");
        let emb: Vec<A> = emb.into_iter().map(A::cast).collect();
        let t_emb = tape.constant(ArrayD::from_shape_vec(IxDyn(&[1, self.cfg.time_dim]), emb).unwrap());

        let mut h = self.stem.forward(tape, bind, x);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for i in 0..self.cfg.depth {
            h = self.down_blocks[i].forward(tape, bind, h, t_emb);
            skips.push(h);
            h = self.downs[i].forward(tape, bind, h);
        }
        h = self.mid.forward(tape, bind, h, t_emb);
        for (j, i) in (0..self.cfg.depth).rev().enumerate() {
            h = tape.upsample_nearest2(h);
            h = self.ups[j].forward(tape, bind, h);
            h = tape.concat_ch(&[h, skips[i]]);
            h = self.up_blocks[j].forward(tape, bind, h, t_emb);
        }
        self.head.forward(tape, bind, h)
    }

    fn check_shapes(&self, y_t: &Array4<A>, condition: &Array4<A>, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_steps {
            return Err(DiffusionError::TimeOutOfRange { t, t_max: self.t_steps });
        }
        let yd = y_t.dim();
        let cd = condition.dim();
        if yd.1 != 1 {
            return Err(DiffusionError::ShapeMismatch {
                expected: vec![yd.0, 1, yd.2, yd.3],
                got: vec![yd.0, yd.1, yd.2, yd.3],
            });
        }
        if cd.1 != self.cfg.condition_channels {
            return Err(DiffusionError::ConditionChannels {
                mode: self.mode,
                expected: self.cfg.condition_channels,
                got: cd.1,
            });
        }
        if yd.0 != cd.0 || yd.2 != cd.2 || yd.3 != cd.3 {
            return Err(DiffusionError::ShapeMismatch {
                expected: vec![yd.0, cd.1, yd.2, yd.3],
                got: vec![cd.0, cd.1, cd.2, cd.3],
            });
        }
        let div = 1usize << self.cfg.depth;
        if yd.2 % div != 0 || yd.3 % div != 0 {
            return Err(DiffusionError::IndivisibleShape(div));
        }
        Ok(())
    }
}

impl<A: Scalar> NoisePredictor<A> for DenoiserModel<A> {
    fn predict(
        &self,
        y_t: &Array4<A>,
        condition: &Array4<A>,
        t: usize,
    ) -> Result<Array4<A>, DiffusionError> {
        self.check_shapes(y_t, condition, t)?;
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &self.params, false);
        let joined = ndarray::concatenate(Axis(1), &[y_t.view(), condition.view()])
            .expect("shapes validated");
        let x = tape.constant(joined.into_dyn());
        let out = self.forward(&mut tape, &bind, x, t);
        Ok(tape
            .value(out)
            .to_owned()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("denoiser output is 4-D"))
    }
}

impl DenoiserModel<f32> {
    pub fn to_bundle(&self, norm: &NormSpec, meta: TrainMeta) -> Result<ModelBundle, DiffusionError> {
        Ok(ModelBundle::new(
            ArchDescriptor::Denoiser { cfg: self.cfg.clone(), mode: self.mode, t_steps: self.t_steps },
            self.params.specs(),
            norm.clone(),
            meta,
            self.params.flatten(),
        )?)
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<DenoiserModel<f32>, DiffusionError> {
        let ArchDescriptor::Denoiser { cfg, mode, t_steps } = &bundle.arch else {
            return Err(DiffusionError::WrongBundleKind);
        };
        let mut model = DenoiserModel::init(cfg, *mode, *t_steps, &bundle.norm, 0)?;
        if model.params.specs() != bundle.params {
            return Err(DiffusionError::Nn(NnError::BadBundle(
                "parameter layout does not match architecture".into(),
            )));
        }
        model.params.load_flat(&bundle.weights)?;
        Ok(model)
    }
}

/// Predict noise for a corrupted field. Validates shape contracts and the
/// output's finiteness.
pub fn denoiser_forward<A: Scalar>(
    y_t: &Tensor4<A>,
    condition: &Tensor4<A>,
    t: usize,
    model: &DenoiserModel<A>,
) -> Result<Tensor4<A>, DiffusionError> {
    let out = model.predict(y_t.data(), condition.data(), t)?;
    Ok(Tensor4::new(out)?)
}

/// Training objective value for one (y0, condition, t, eps) draw:
/// MSE between eps and the model's prediction on the corrupted field.
pub fn diffusion_loss_step<A: Scalar>(
    y0: &Tensor4<A>,
    condition: &Tensor4<A>,
    t: usize,
    eps: &Tensor4<A>,
    model: &impl NoisePredictor<A>,
    s: &NoiseSchedule,
) -> Result<f64, DiffusionError> {
    let y_t = forward_sample(y0, t, eps, s)?;
    let pred = model.predict(y_t.data(), condition.data(), t)?;
    if pred.dim() != eps.data().dim() {
        let d = pred.dim();
        return Err(DiffusionError::ShapeMismatch {
            expected: eps.shape().to_vec(),
            got: vec![d.0, d.1, d.2, d.3],
        });
    }
    let mut sum = 0.0f64;
    for (&e, &p) in eps.data().iter().zip(pred.iter()) {
        let d = e.as_f64() - p.as_f64();
        sum += d * d;
    }
    let loss = sum / eps.data().len() as f64;
    if !loss.is_finite() {
        return Err(DiffusionError::NonFiniteLoss);
    }
    Ok(loss)
}

/// Mean squared error on the tape (gradient flows through `pred`).
pub fn mse_on_tape<A: Scalar>(tape: &mut Tape<A>, pred: Var, target: &ArrayD<A>) -> Var {
    let t_const = tape.constant(target.clone());
    let diff = tape.sub(pred, t_const);
    let sq = tape.mul(diff, diff);
    let scaled = tape.scale(sq, A::cast(1.0 / target.len() as f64));
    tape.sum(scaled)
}

fn fill_normal<A: Scalar>(shape: (usize, usize, usize, usize), rng: &mut Rng64) -> Array4<A> {
    Array4::from_shape_simple_fn(shape, || A::cast(rng.normal()))
}

/// Reverse-sample one field from pure noise under a condition stack.
/// Deterministic in (seed, weights, condition, schedule). The result is
/// clamped to model range and tagged normalized.
pub fn sample<A: Scalar>(
    condition: &Tensor4<A>,
    model: &DenoiserModel<A>,
    sched: &SampleSchedule,
    seed: u64,
) -> Result<Field, DiffusionError> {
    let cd = condition.shape();
    let (b, h, w) = (cd[0], cd[2], cd[3]);
    if b != 1 {
        return Err(DiffusionError::ShapeMismatch { expected: vec![1, cd[1], h, w], got: cd.to_vec() });
    }
    let mut rng = Rng64::new(seed);
    let mut y = fill_normal::<A>((1, 1, h, w), &mut rng);
    let steps = sched.schedule.t_steps;
    for j in (1..=steps).rev() {
        let t_orig = sched.orig_t[j - 1];
        let pred = model.predict(&y, condition.data(), t_orig)?;
        let alpha = sched.schedule.alpha_at(j);
        let bar = sched.schedule.alpha_bar_at(j);
        let inv_sqrt_alpha = A::cast(1.0 / alpha.sqrt());
        let coef = A::cast((1.0 - alpha) / (1.0 - bar).sqrt());
        let mut next = ndarray::Zip::from(&y)
            .and(&pred)
            .map_collect(|&yv, &e| inv_sqrt_alpha * (yv - coef * e));
        if j > 1 {
            let sigma = A::cast(sched.schedule.sigma_at(j));
            let z = fill_normal::<A>((1, 1, h, w), &mut rng);
            next.zip_mut_with(&z, |d, &n| *d = *d + sigma * n);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFiniteAtStep(t_orig));
        }
        y = next;
    }
    let lo = A::cast(model.model_lo);
    let hi = A::cast(model.model_hi);
    let values = ndarray::Array2::from_shape_fn((h, w), |(r, c)| {
        y[[0, 0, r, c]].max(lo).min(hi).as_f64() as f32
    });
    Ok(Field::from_values(values, Units::Normalized)?)
}

/// A training item: normalized radar target plus its condition stack.
pub struct DiffusionItem {
    pub y0: Array4<f32>,
    pub condition: Array4<f32>,
}

/// Build training items from scenes: normalize inputs, run the frozen
/// transform stage when the mode requires the estimate, and assemble the
/// per-scene condition stack once.
pub fn prepare_items(
    scenes: &[Scene],
    tm: Option<&TransformModel<f32>>,
    mode: ConditionMode,
    norm: &NormSpec,
) -> Result<Vec<DiffusionItem>, DiffusionError> {
    if mode.needs_estimate() && tm.is_none() {
        return Err(DiffusionError::MissingTmBundle(mode));
    }
    let mut items = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let y0 = scene_target::<f32>(scene, norm)?;
        let sat = scene_input::<f32>(scene, norm)?;
        let estimate = if mode.needs_estimate() {
            let model = tm.expect("checked above");
            Some(Tensor4::new(model.infer(&sat)?)?)
        } else {
            None
        };
        let sat_t = Tensor4::new(sat)?;
        let condition = assemble_condition(
            mode,
            mode.needs_satellite().then_some(&sat_t),
            estimate.as_ref(),
        )?;
        items.push(DiffusionItem { y0, condition: condition.into_data() });
    }
    Ok(items)
}

pub struct DiffTrainOutput {
    pub model: DenoiserModel<f32>,
    pub loss_log: Vec<f32>,
}

/// Train the denoiser with the epsilon-prediction objective. One (t, eps)
/// draw per step over a seeded batch; deterministic given the seed.
pub fn train_diffusion(
    scenes: &[Scene],
    tm: Option<&TransformModel<f32>>,
    mode: ConditionMode,
    cfg: &DenoiserConfig,
    s: &NoiseSchedule,
    norm: &NormSpec,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<DiffTrainOutput, DiffusionError> {
    if scenes.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let items = prepare_items(scenes, tm, mode, norm)?;
    let model = DenoiserModel::<f32>::init(cfg, mode, s.t_steps, norm, seed)?;
    train_diffusion_from(model, &items, s, steps, batch, lr, seed)
}

/// Inner loop over prebuilt items, starting from the given model.
pub fn train_diffusion_from(
    mut model: DenoiserModel<f32>,
    items: &[DiffusionItem],
    s: &NoiseSchedule,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<DiffTrainOutput, DiffusionError> {
    if items.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let batch = batch.max(1);
    let mut flat = model.params.flatten();
    let mut state = AdamState::<f32>::zeros(flat.len());
    let adam = AdamParams::with_lr(lr);
    let mut rng = Rng64::new(seed).substream(0xd1ff);
    let mut loss_log = Vec::with_capacity(steps);

    let (_, _, h, w) = items[0].y0.dim();
    let cond_ch = items[0].condition.dim().1;

    for step in 0..steps {
        let idx: Vec<usize> =
            (0..batch).map(|_| rng.below(items.len() as u64) as usize).collect();
        let t = 1 + rng.below(s.t_steps as u64) as usize;

        let mut y0 = Array4::<f32>::zeros((batch, 1, h, w));
        let mut cond = Array4::<f32>::zeros((batch, cond_ch, h, w));
        for (bi, &i) in idx.iter().enumerate() {
            y0.index_axis_mut(Axis(0), bi).assign(&items[i].y0.index_axis(Axis(0), 0));
            cond.index_axis_mut(Axis(0), bi).assign(&items[i].condition.index_axis(Axis(0), 0));
        }
        let eps = fill_normal::<f32>((batch, 1, h, w), &mut rng);

        let bar = s.alpha_bar_at(t);
        let c0 = bar.sqrt() as f32;
        let c1 = (1.0 - bar).sqrt() as f32;
        let y_t = ndarray::Zip::from(&y0).and(&eps).map_collect(|&y, &e| c0 * y + c1 * e);

        let mut tape = Tape::<f32>::new();
        let bind = Binding::bind(&mut tape, &model.params, true);
        let joined = ndarray::concatenate(Axis(1), &[y_t.view(), cond.view()])
            .expect("batch shapes agree");
        let x = tape.constant(joined.into_dyn());
        let pred = model.forward(&mut tape, &bind, x, t);
        let loss = mse_on_tape(&mut tape, pred, &eps.into_dyn());
        let loss_value = tape.value(loss)[[0]];
        if !loss_value.is_finite() {
            return Err(DiffusionError::Diverged { step });
        }
        loss_log.push(loss_value);

        let grads = tape.backward(loss);
        let flat_grads = bind.flat_grads(&tape, &grads);
        adam_step(&mut flat, &flat_grads, &mut state, &adam)?;
        model.params.load_flat(&flat)?;
    }
    Ok(DiffTrainOutput { model, loss_log })
}
