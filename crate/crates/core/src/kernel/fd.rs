//! Central finite differences, used as the independent oracle in unit tests.

use super::Tensor;

pub(crate) const STEP: f64 = 1e-6;

/// Numerical gradient of `f` with respect to every entry of `x`.
pub(crate) fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - STEP;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * STEP);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are (numerically) zero.
pub(crate) fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.l2_norm().max(b.l2_norm());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Weighted sum `Σ w⊙y`, the scalar used to probe a layer's backward pass.
pub(crate) fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

pub(crate) fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}
