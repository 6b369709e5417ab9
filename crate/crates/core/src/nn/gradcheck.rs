//! Finite-difference verification of reverse-mode gradients.
//!
//! The reference derivative is a central difference at base step h = 1e-3,
//! refined once by Richardson extrapolation ((4 D(h/2) - D(h)) / 3) and
//! always evaluated in f64, so the reference error is far below both
//! tolerance targets. When the checked element type is f32, the input is
//! snapped through f32 first so both sides evaluate the same point and the
//! measured error is purely the 32-bit arithmetic of the tape.

use super::tape::{Tape, Var};
use super::{NnError, Scalar};
use crate::rng::Rng64;
use ndarray::ArrayD;

/// Central-difference base step.
pub const FD_STEP: f64 = 1e-3;

/// Maximum coordinates sampled per check.
pub const FD_SAMPLES: usize = 32;

fn eval_scalar_f64<FR>(module: &FR, data: &ArrayD<f64>) -> Result<f64, NnError>
where
    FR: Fn(&mut Tape<f64>, Var) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(data.clone());
    let out = module(&mut tape, x);
    if tape.shape(out) != vec![1] {
        return Err(NnError::ShapeMismatch { expected: vec![1], got: tape.shape(out) });
    }
    let value = tape.value(out)[[0]];
    if !value.is_finite() {
        return Err(NnError::NonFiniteIntermediate("grad_check forward".into()));
    }
    Ok(value)
}

/// Compare the tape gradient at element type `A` against the f64
/// finite-difference reference, returning the maximum relative error over
/// sampled coordinates. `module_a` and `module_ref` must compute the same
/// function at their respective precisions.
pub fn grad_check_ref<A, FA, FR>(
    module_a: FA,
    module_ref: FR,
    input: &ArrayD<f64>,
    seed: u64,
) -> Result<f64, NnError>
where
    A: Scalar,
    FA: Fn(&mut Tape<A>, Var) -> Var,
    FR: Fn(&mut Tape<f64>, Var) -> Var,
{
    // Snap the evaluation point through A so both sides see identical
    // coordinates.
    let input_a: ArrayD<A> = input.mapv(A::cast);
    let input_ref: ArrayD<f64> = input_a.mapv(|v| v.as_f64());

    // Reverse-mode gradient at A.
    let mut tape = Tape::<A>::new();
    let x = tape.leaf(input_a.clone());
    let out = module_a(&mut tape, x);
    if tape.shape(out) != vec![1] {
        return Err(NnError::ShapeMismatch { expected: vec![1], got: tape.shape(out) });
    }
    if !tape.value(out)[[0]].is_finite() {
        return Err(NnError::NonFiniteIntermediate("grad_check forward".into()));
    }
    let grads = tape.backward(out);
    let g = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
    if g.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFiniteIntermediate("grad_check backward".into()));
    }

    let n = input.len();
    let coords: Vec<usize> = if n <= FD_SAMPLES {
        (0..n).collect()
    } else {
        let mut rng = Rng64::new(seed);
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < FD_SAMPLES {
            picked.insert(rng.below(n as u64) as usize);
        }
        picked.into_iter().collect()
    };

    let flat_ref: Vec<f64> = input_ref.iter().cloned().collect();
    let g_flat: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
    let mut max_rel = 0.0f64;
    for &idx in &coords {
        let central = |h: f64| -> Result<f64, NnError> {
            let mut plus = flat_ref.clone();
            plus[idx] += h;
            let mut minus = flat_ref.clone();
            minus[idx] -= h;
            let fp = eval_scalar_f64(&module_ref, &ArrayD::from_shape_vec(input.raw_dim(), plus).unwrap())?;
            let fm = eval_scalar_f64(&module_ref, &ArrayD::from_shape_vec(input.raw_dim(), minus).unwrap())?;
            Ok((fp - fm) / (2.0 * h))
        };
        let d_h = central(FD_STEP)?;
        let d_h2 = central(FD_STEP / 2.0)?;
        let fd = (4.0 * d_h2 - d_h) / 3.0;
        let ad = g_flat[idx];
        // Coordinates whose gradient sits below the element type's
        // resolvable relative precision are judged against that floor,
        // not against their own (noise-level) magnitude.
        let floor = A::epsilon().as_f64().sqrt().max(1e-6);
        let scale = ad.abs().max(fd.abs()).max(floor);
        let rel = (ad - fd).abs() / scale;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// f64 gradient check: one closure serves as both the checked module and
/// the reference.
pub fn grad_check_in<F>(module: F, input: &ArrayD<f64>, seed: u64) -> Result<f64, NnError>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    grad_check_ref::<f64, _, _>(&module, &module, input, seed)
}

/// Spec-facing wrapper: returns (max relative error, tolerance) so
/// assertion sites keep the threshold next to the measured value.
pub fn grad_check<F>(module: F, input: &ArrayD<f64>, tolerance: f64) -> Result<(f64, f64), NnError>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let err = grad_check_in(module, input, 0x6fd1)?;
    Ok((err, tolerance))
}

/// Reduce an arbitrary node to a scalar with fixed pseudo-random
/// coefficients; a plain sum would hide errors that cancel along rows
/// (softmax rows, normalized lanes).
pub fn scalarize<A: Scalar>(tape: &mut Tape<A>, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x);
    let mut rng = Rng64::new(seed);
    let coeffs = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&shape), || {
        A::cast(rng.uniform_in(-1.0, 1.0))
    });
    let weighted = tape.mul_const(x, coeffs);
    tape.sum(weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Binding, Conv2d, Dense, GroupNorm, LayerNorm, Mhsa, ParamSet};
    use ndarray::IxDyn;

    fn random_input(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = Rng64::new(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn identity_module_is_exact() {
        let input = random_input(&[8], 1);
        let (err, _) = grad_check(|tape, x| tape.sum(x), &input, 1e-10).unwrap();
        assert!(err < 1e-10, "identity grad error {err}");
    }

    #[test]
    fn dense_layer_under_1e4() {
        let mut rng = Rng64::new(2);
        let mut ps = ParamSet::<f64>::new();
        let dense = Dense::init(&mut ps, "d", 6, 4, &mut rng);
        let input = random_input(&[3, 6], 3);
        let (err, _) = grad_check(
            |tape, x| {
                let bind = Binding::bind(tape, &ps, false);
                let y = dense.forward(tape, &bind, x);
                scalarize(tape, y, 7)
            },
            &input,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "dense grad error {err}");
    }

    #[test]
    fn non_finite_forward_is_error() {
        let input = random_input(&[4], 4);
        let res = grad_check(
            |tape, x| {
                let big = tape.scale(x, f64::INFINITY);
                tape.sum(big)
            },
            &input,
            1e-4,
        );
        assert!(matches!(res, Err(NnError::NonFiniteIntermediate(_))));
    }

    /// One layer family checked at both precisions over 20 seeds. The
    /// builder returns matched f32/f64 closures over identical weights.
    #[allow(clippy::type_complexity)]
    fn layer_suite<FB>(mut build: FB, input_shape: &[usize])
    where
        FB: FnMut(
            u64,
        ) -> (
            Box<dyn Fn(&mut Tape<f32>, Var) -> Var>,
            Box<dyn Fn(&mut Tape<f64>, Var) -> Var>,
        ),
    {
        for seed in 0..20u64 {
            let (m32, m64) = build(seed);
            let input = random_input(input_shape, 100 + seed);
            let err64 = grad_check_ref::<f64, _, _>(&m64, &m64, &input, seed).unwrap();
            assert!(err64 < 1e-5, "f64 grad error {err64} at seed {seed}");
            let err32 = grad_check_ref::<f32, _, _>(&m32, &m64, &input, seed).unwrap();
            assert!(err32 < 1e-3, "f32 grad error {err32} at seed {seed}");
        }
    }

    /// Build the matched closure pair from a ParamSet-independent layer
    /// constructor. The f32 parameters are the snapped copies of the f64
    /// ones, so the two closures compute the same function.
    macro_rules! matched_pair {
        ($seed:expr, $ps:ident, $layer:ident, $init:expr, $fwd:expr) => {{
            let mut rng = Rng64::new($seed);
            let mut $ps = ParamSet::<f64>::new();
            let $layer = $init(&mut $ps, &mut rng);
            let ps64 = std::sync::Arc::new($ps.cast::<f32>().cast::<f64>());
            let ps32 = std::sync::Arc::new(ps64.cast::<f32>());
            let layer32 = $layer;
            let layer64 = $layer;
            let seed = $seed;
            let p32 = std::sync::Arc::clone(&ps32);
            let p64 = std::sync::Arc::clone(&ps64);
            (
                Box::new(move |tape: &mut Tape<f32>, x: Var| {
                    let bind = Binding::bind(tape, &p32, false);
                    let y = $fwd(&layer32, tape, &bind, x);
                    scalarize(tape, y, seed)
                }) as Box<dyn Fn(&mut Tape<f32>, Var) -> Var>,
                Box::new(move |tape: &mut Tape<f64>, x: Var| {
                    let bind = Binding::bind(tape, &p64, false);
                    let y = $fwd(&layer64, tape, &bind, x);
                    scalarize(tape, y, seed)
                }) as Box<dyn Fn(&mut Tape<f64>, Var) -> Var>,
            )
        }};
    }

    #[test]
    fn dense_both_precisions() {
        layer_suite(
            |seed| {
                matched_pair!(
                    seed,
                    ps,
                    layer,
                    |ps: &mut ParamSet<f64>, rng: &mut Rng64| Dense::init(ps, "d", 5, 3, rng),
                    |l: &Dense, tape: &mut Tape<_>, bind: &Binding, x| l.forward(tape, bind, x)
                )
            },
            &[2, 5],
        );
    }

    #[test]
    fn conv_both_precisions() {
        layer_suite(
            |seed| {
                matched_pair!(
                    seed,
                    ps,
                    layer,
                    |ps: &mut ParamSet<f64>, rng: &mut Rng64| Conv2d::init(ps, "c", 2, 3, 3, 1, 1, rng),
                    |l: &Conv2d, tape: &mut Tape<_>, bind: &Binding, x| l.forward(tape, bind, x)
                )
            },
            &[1, 2, 5, 5],
        );
    }

    #[test]
    fn strided_conv_gradients() {
        layer_suite(
            |seed| {
                matched_pair!(
                    seed,
                    ps,
                    layer,
                    |ps: &mut ParamSet<f64>, rng: &mut Rng64| Conv2d::init(ps, "c", 2, 2, 3, 2, 1, rng),
                    |l: &Conv2d, tape: &mut Tape<_>, bind: &Binding, x| l.forward(tape, bind, x)
                )
            },
            &[1, 2, 6, 6],
        );
    }

    #[test]
    fn conv_weight_gradients() {
        // Differentiate the weights instead of the activation input.
        for seed in 0..5u64 {
            let x_data = random_input(&[1, 2, 4, 4], 40 + seed);
            let w_input = random_input(&[2 * 9, 3], 50 + seed);
            let err = grad_check_in(
                |tape, w| {
                    let x = tape.constant(x_data.clone());
                    let cols = tape.im2col(x, 3, 1, 1);
                    let y = tape.matmul(cols, w);
                    scalarize(tape, y, seed)
                },
                &w_input,
                seed,
            )
            .unwrap();
            assert!(err < 1e-5, "conv weight grad error {err}");
        }
    }

    #[test]
    fn layer_norm_both_precisions() {
        layer_suite(
            |seed| {
                matched_pair!(
                    seed,
                    ps,
                    layer,
                    |ps: &mut ParamSet<f64>, _rng: &mut Rng64| LayerNorm::init(ps, "ln", 6),
                    |l: &LayerNorm, tape: &mut Tape<_>, bind: &Binding, x| l.forward(tape, bind, x)
                )
            },
            &[2, 3, 6],
        );
    }

    #[test]
    fn group_norm_both_precisions() {
        layer_suite(
            |seed| {
                matched_pair!(
                    seed,
                    ps,
                    layer,
                    |ps: &mut ParamSet<f64>, _rng: &mut Rng64| GroupNorm::init(ps, "gn", 4, 2),
                    |l: &GroupNorm, tape: &mut Tape<_>, bind: &Binding, x| l.forward(tape, bind, x)
                )
            },
            &[2, 4, 3, 3],
        );
    }

    #[test]
    fn attention_both_precisions() {
        layer_suite(
            |seed| {
                matched_pair!(
                    seed,
                    ps,
                    layer,
                    |ps: &mut ParamSet<f64>, rng: &mut Rng64| Mhsa::init(ps, "a", 8, 2, rng),
                    |l: &Mhsa, tape: &mut Tape<_>, bind: &Binding, x| l.forward(tape, bind, x)
                )
            },
            &[1, 4, 8],
        );
    }

    #[test]
    fn activations_and_resampling() {
        let elementwise: Vec<(&str, fn(&mut Tape<f64>, Var) -> Var, fn(&mut Tape<f32>, Var) -> Var)> = vec![
            ("gelu", |t, x| t.gelu(x), |t, x| t.gelu(x)),
            ("silu", |t, x| t.silu(x), |t, x| t.silu(x)),
            ("softmax", |t, x| t.softmax_last(x), |t, x| t.softmax_last(x)),
        ];
        for (name, f64_op, f32_op) in elementwise {
            for seed in 0..20u64 {
                let input = random_input(&[3, 5], 200 + seed);
                let m64 = move |tape: &mut Tape<f64>, x: Var| {
                    let y = f64_op(tape, x);
                    scalarize(tape, y, seed)
                };
                let m32 = move |tape: &mut Tape<f32>, x: Var| {
                    let y = f32_op(tape, x);
                    scalarize(tape, y, seed)
                };
                let err64 = grad_check_ref::<f64, _, _>(&m64, &m64, &input, seed).unwrap();
                assert!(err64 < 1e-5, "{name} f64 grad error {err64} at seed {seed}");
                let err32 = grad_check_ref::<f32, _, _>(&m32, &m64, &input, seed).unwrap();
                assert!(err32 < 1e-3, "{name} f32 grad error {err32} at seed {seed}");
            }
        }

        for seed in 0..20u64 {
            let input = random_input(&[1, 2, 3, 3], 300 + seed);
            let err = grad_check_in(
                |tape, x| {
                    let y = tape.upsample_nearest2(x);
                    scalarize(tape, y, seed)
                },
                &input,
                seed,
            )
            .unwrap();
            assert!(err < 1e-5, "upsample grad error {err}");

            let tok_input = random_input(&[1, 4, 3], 400 + seed);
            let err = grad_check_in(
                |tape, x| {
                    let y = tape.interp_tokens(x, (2, 2), (3, 3));
                    scalarize(tape, y, seed)
                },
                &tok_input,
                seed,
            )
            .unwrap();
            assert!(err < 1e-5, "interp grad error {err}");
        }
    }
}
