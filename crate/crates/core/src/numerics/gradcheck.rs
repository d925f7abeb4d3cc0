use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Central-difference estimate of the gradient of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        bail!(Parameter, "finite-difference step must be positive, got {h}");
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            bail!(Numeric, "function value not finite at element {i}");
        }
        out.push((fp - fm) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `|a − b| / max(|a|, |b|, floor)`; the floor keeps the ratio meaningful
/// when both gradients are essentially zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
