//! Finite-difference oracle shared by the unit tests.

use crate::ndcore::{Rng, Tensor};

pub fn random_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| std * rng.normal())
}

/// Central differences of `f` with respect to every element of `inputs[idx]`.
pub fn central_difference(inputs: &[Tensor<f64>], idx: usize, h: f64, f: impl Fn(&[Tensor<f64>]) -> f64) -> Vec<f64> {
    let mut xs = inputs.to_vec();
    (0..inputs[idx].numel())
        .map(|i| {
            let orig = xs[idx].data()[i];
            xs[idx].data_mut()[i] = orig + h;
            let up = f(&xs);
            xs[idx].data_mut()[i] = orig - h;
            let down = f(&xs);
            xs[idx].data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest element-wise relative error, with a `1e-8` floor on the
/// denominator so exact zeros compare absolutely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
