//! Central finite-difference check of a layer's analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Mode, ParamData};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

/// Seed of the generator handed to every forward pass during a check, so
/// dropout draws the same mask for each perturbed evaluation.
pub const GRAD_CHECK_SEED: u64 = 0x5eed_9c4e;

const REDUCTION_SEED: u64 = 0x00c0_ffee;

/// Denominator floor for the relative error, so gradients that are zero up to
/// roundoff are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Scalar objective `sum(r * f(x))` with fixed pseudo-random weights `r`.
///
/// A plain sum of outputs is constant for softmax and batchnorm, which would
/// make their check vacuous; random weights keep every path observable.
fn objective<T: Element>(
    layer: &Layer<T>,
    input: &Tensor<T>,
    skip: Option<&Tensor<T>>,
    weights: &Tensor<T>,
) -> Result<f64> {
    let mut layer = layer.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(GRAD_CHECK_SEED);
    let out = layer.forward(input, skip, Mode::Train, Some(&mut rng))?;
    Ok(out
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&o, &w)| o.to_f64() * w.to_f64())
        .sum())
}

/// `(f(v + eps) - f(v - eps)) / 2 eps` for element `i` of `slot`, restoring it afterwards.
fn central<T: Element>(
    epsilon: f64,
    i: usize,
    slot: &mut Tensor<T>,
    eval: impl Fn(&Tensor<T>) -> Result<f64>,
) -> Result<f64> {
    let original = slot.data()[i];
    slot.data_mut()[i] = T::from_f64(original.to_f64() + epsilon);
    let plus = eval(slot)?;
    slot.data_mut()[i] = T::from_f64(original.to_f64() - epsilon);
    let minus = eval(slot)?;
    slot.data_mut()[i] = original;
    Ok((plus - minus) / (2.0 * epsilon))
}

/// Largest relative error between the analytic gradient and central finite
/// differences, over every input element (and skip element, for residual
/// adds) and every trainable parameter element. Requires `f64` tensors.
pub fn grad_check<T: Element>(
    layer: &Layer<T>,
    input: &Tensor<T>,
    skip: Option<&Tensor<T>>,
    epsilon: f64,
) -> Result<f64> {
    if T::DTYPE != DType::F64 {
        return Err(Error::Precision(format!(
            "gradient checks need f64 tensors, got {}",
            T::DTYPE
        )));
    }
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::config(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }

    let mut probe = layer.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(GRAD_CHECK_SEED);
    let out = probe.forward(input, skip, Mode::Train, Some(&mut rng))?;
    let mut rrng = ChaCha8Rng::seed_from_u64(REDUCTION_SEED);
    let weights = Tensor::from_fn(out.shape(), |_| T::from_f64(rrng.random_range(-1.0..1.0)))?;
    let grads = probe.backward(&weights)?;

    let mut worst = 0.0f64;

    let analytic = grads
        .input
        .ok_or_else(|| Error::State("backward returned no input gradient".into()))?;
    let mut x = input.clone();
    for i in 0..x.len() {
        let numeric = central(epsilon, i, &mut x, |x| objective(layer, x, skip, &weights))?;
        worst = worst.max(relative_error(analytic.data()[i].to_f64(), numeric));
    }

    if let Some(s) = skip {
        let analytic = grads
            .skip
            .ok_or_else(|| Error::State("residual backward returned no skip gradient".into()))?;
        let mut s = s.clone();
        for i in 0..s.len() {
            let numeric = central(epsilon, i, &mut s, |s| objective(layer, input, Some(s), &weights))?;
            worst = worst.max(relative_error(analytic.data()[i].to_f64(), numeric));
        }
    }

    for (name, analytic) in &grads.params {
        let index = layer
            .state
            .params
            .iter()
            .position(|p| &p.name == name)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
        let ParamData::Dense(original) = &layer.state.params[index].data else {
            return Err(Error::Precision("cannot grad-check quantized parameters".into()));
        };
        let mut p = original.clone();
        for i in 0..p.len() {
            let numeric = central(epsilon, i, &mut p, |p| {
                let mut l = layer.clone();
                l.state.params[index].data = ParamData::Dense(p.clone());
                objective(&l, input, skip, &weights)
            })?;
            worst = worst.max(relative_error(analytic.data()[i].to_f64(), numeric));
        }
    }
    Ok(worst)
}
