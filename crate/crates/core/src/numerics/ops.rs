//! Forward kernels. Every public kernel validates shapes, counts its
//! multiplications, and rejects non-finite results.

use std::cell::Cell;

use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

thread_local! {
    static MUL_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Multiplications performed by forward kernels on this thread since the
/// last reset.
pub fn mul_count() -> u64 {
    MUL_COUNT.with(|c| c.get())
}

pub fn reset_mul_count() {
    MUL_COUNT.with(|c| c.set(0));
}

#[inline]
fn count(n: usize) {
    MUL_COUNT.with(|c| c.set(c.get() + n as u64));
}

fn finite<T: Scalar>(t: Tensor<T>, what: &str) -> Result<Tensor<T>> {
    t.ensure_finite(what)?;
    Ok(t)
}

// Raw loops shared with the backward pass (which does not count).

/// `a[m×k] · b[k×n]`
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose_raw(b, n, k);
    mm(a, &bt, m, k, n)
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        bail!(Dimension, "matmul inner dims differ: {m}x{k} · {k2}x{n}");
    }
    count(m * k * n);
    finite(Tensor::new([m, n], mm(a.data(), b.data(), m, k, n))?, "matmul")
}

/// `a · bᵀ`, the shape of a linear layer with weight stored `[out×in]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        bail!(Dimension, "matmul_nt inner dims differ: {m}x{k} · ({n}x{k2})ᵀ");
    }
    count(m * k * n);
    finite(Tensor::new([m, n], mm_nt(a.data(), b.data(), m, k, n))?, "matmul_nt")
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = a.dims2()?;
    Tensor::new([c, r], transpose_raw(a.data(), r, c))
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        bail!(Dimension, "softmax axis {axis} out of range for {shape:?}");
    }
    let len = shape[axis];
    if len == 0 {
        bail!(Dimension, "softmax over an empty axis");
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let mx = (0..len).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..len {
                let e = (src[at(k)] - mx).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / sum;
            }
        }
    }
    finite(Tensor::new(shape.to_vec(), out)?, "softmax")
}

pub(crate) fn softmax_rows_raw<T: Scalar>(src: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (row, orow) in src.chunks(cols).zip(out.chunks_mut(cols)) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Statistics kept by [`layernorm_raw`] for the backward pass.
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layernorm_raw<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    let d = gamma.len();
    let rows = x.len() / d;
    let n = T::from_usize(d).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (out, NormStats { xhat, rstd })
}

/// Normalizes over the last axis, then applies `gamma`/`beta`.
pub fn layernorm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        bail!(Parameter, "layernorm eps must be positive, got {eps}");
    }
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 || gamma.len() != d || beta.len() != d {
        bail!(
            Dimension,
            "layernorm over last dim {d} with gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        );
    }
    count(x.len() * 2);
    let (out, _) = layernorm_raw(x.data(), gamma.data(), beta.data(), eps);
    finite(Tensor::new(x.shape().to_vec(), out)?, "layernorm")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    count(x.len() * 3);
    let out = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    finite(Tensor::new(x.shape().to_vec(), out)?, "gelu")
}

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let out = x.data().iter().map(|&v| softplus_scalar(v)).collect();
    finite(Tensor::new(x.shape().to_vec(), out)?, "softplus")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn triple_loop(a: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
        let (m, k) = a.dims2().unwrap();
        let n = b.dims2().unwrap().1;
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_2x2() {
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap().data(), m.data());
        let r = matmul(&m, &t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        assert_eq!(r.data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(matmul(&a, &a), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn matmul_7x5x3_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f32>::uniform([7, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform([5, 3], -1.0, 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_nt_equals_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::<f32>::uniform([4, 6], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::uniform([3, 6], -1.0, 1.0, &mut rng);
        let c = matmul_nt(&a, &b).unwrap();
        let d = matmul(&a, &transpose(&b).unwrap()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&t(&[3], &[0., 0., 0.]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax(&t(&[2], &[1000., 0.]), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-7 && s.data()[1] < 1e-30);
        assert!(softmax(&Tensor::<f32>::zeros([2, 0]), 1).is_err());
        assert!(softmax(&Tensor::<f32>::zeros([2]), 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t(&[2, 3], &[1., 2., 3., 3., 2., 1.]);
        let s = softmax(&x, 0).unwrap();
        for j in 0..3 {
            let col = s.data()[j] + s.data()[3 + j];
            assert!((col - 1.0).abs() < 1e-6);
        }
        assert!((s.data()[0] - s.data()[5]).abs() < 1e-7);
    }

    #[test]
    fn layernorm_cases() {
        let ones = Tensor::<f32>::full([3], 1.0);
        let zeros = Tensor::<f32>::zeros([3]);
        let c = layernorm(&t(&[1, 3], &[5., 5., 5.]), &ones, &zeros, 1e-5).unwrap();
        assert!(c.data().iter().all(|v| *v == 0.0));
        let r = layernorm(&t(&[1, 3], &[1., 2., 3.]), &ones, &zeros, 1e-5).unwrap();
        assert!(r.data().iter().sum::<f32>().abs() < 1e-6);
        assert!(matches!(
            layernorm(&t(&[1, 3], &[1., 2., 3.]), &ones, &zeros, 0.0),
            Err(crate::Error::Parameter(_))
        ));
        assert!(layernorm(&t(&[1, 2], &[1., 2.]), &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn layernorm_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::uniform([1, 9], -3.0, 3.0, &mut rng);
        let g = Tensor::<f32>::uniform([9], 0.5, 1.5, &mut rng);
        let b = Tensor::<f32>::uniform([9], -0.5, 0.5, &mut rng);
        let y = layernorm(&x, &g, &b, 1e-5).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let mean = xs.iter().sum::<f64>() / 9.0;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        for j in 0..9 {
            let want = (xs[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] as f64 + b.data()[j] as f64;
            assert!((y.data()[j] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_values() {
        let y = gelu(&t(&[5], &[0.0, 1.0, 20.0, -20.0, -1e4])).unwrap();
        assert_eq!(y.data()[0], 0.0);
        let x = 1.0f64;
        let want = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        assert!((y.data()[1] as f64 - want).abs() < 1e-6);
        assert!((y.data()[2] - 20.0).abs() < 1e-5);
        assert!(y.data()[3].abs() < 1e-5 && y.data()[4].abs() < 1e-5);
    }

    #[test]
    fn softplus_is_stable() {
        let y = softplus(&t(&[3], &[0.0, 100.0, -100.0])).unwrap();
        assert!((y.data()[0] - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(y.data()[1], 100.0);
        assert!(y.data()[2] > 0.0 && y.data()[2] < 1e-40);
    }

    #[test]
    fn mul_counter_tracks_matmul() {
        reset_mul_count();
        let a = Tensor::<f32>::zeros([3, 4]);
        let b = Tensor::<f32>::zeros([4, 5]);
        matmul(&a, &b).unwrap();
        assert_eq!(mul_count(), 60);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f32..50.0, 1..24)) {
            let n = v.len();
            let s = softmax(&Tensor::new([n], v).unwrap(), 0).unwrap();
            let sum: f32 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|p| *p >= 0.0 && *p <= 1.0));
        }

        #[test]
        fn matmul_matches_oracle(m in 1usize..16, k in 1usize..16, n in 1usize..16, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f32>::uniform([m, k], -1.0, 1.0, &mut rng);
            let b = Tensor::<f32>::uniform([k, n], -1.0, 1.0, &mut rng);
            let c = matmul(&a, &b).unwrap();
            for (x, y) in c.data().iter().zip(triple_loop(&a, &b)) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn layernorm_row_statistics(v in prop::collection::vec(-10.0f32..10.0, 2..32)) {
            let d = v.len();
            let spread = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
                - v.iter().cloned().fold(f32::INFINITY, f32::min);
            prop_assume!(spread > 2.0);
            let y = layernorm(
                &Tensor::new([1, d], v).unwrap(),
                &Tensor::full([d], 1.0),
                &Tensor::zeros([d]),
                1e-8,
            ).unwrap();
            let mean = y.data().iter().map(|&x| x as f64).sum::<f64>() / d as f64;
            let var = y.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
