//! Normalization variants as pure functions over the last axis.
//!
//! Four variants: full LayerNorm (standardize + learnable affine), RMSNorm
//! (no centering, scale only), affine-only (learnable scale/shift without
//! standardization) and normalize-only (standardization alone). The same
//! slice kernels back the fused autodiff ops in [`crate::tensor`].
//!
//! Conventions, fixed across the crate: variance is the biased estimator
//! (divide by the axis length D), and eps is added to the variance inside
//! the square root, not to the standard deviation.

use crate::tensor::Tensor;

/// Default epsilon for every norm in the crate.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Learnable scale and shift for one normalized axis.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl NormParams {
    /// gamma <- 1, beta <- 0, the initialization used everywhere.
    pub fn identity(d: usize, dtype: crate::tensor::DType) -> NormParams {
        NormParams {
            gamma: Tensor::full(vec![d], 1.0, dtype),
            beta: Tensor::zeros(vec![d], dtype),
            eps: DEFAULT_EPS,
        }
    }

    fn check(&self, d: usize) {
        assert_eq!(self.gamma.shape(), [d], "gamma length must match the normalized axis");
        assert_eq!(self.beta.shape(), [d], "beta length must match the normalized axis");
        assert!(self.eps > 0.0, "eps must be positive");
    }
}

pub(crate) fn layer_norm_slice(xs: &[f64], gamma: &[f64], beta: &[f64], eps: f64, out: &mut [f64]) {
    let d = xs.len();
    let (mean, inv_std) = slice_moments(xs, eps);
    for j in 0..d {
        out[j] = (xs[j] - mean) * inv_std * gamma[j] + beta[j];
    }
}

pub(crate) fn slice_moments(xs: &[f64], eps: f64) -> (f64, f64) {
    let d = xs.len() as f64;
    let mut s = 0.0;
    for &v in xs {
        s += v;
    }
    let mean = s / d;
    let mut var = 0.0;
    for &v in xs {
        let dd = v - mean;
        var += dd * dd;
    }
    var /= d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn map_slices(x: &Tensor, mut f: impl FnMut(&[f64], &mut [f64])) -> Tensor {
    let d = *x.shape().last().expect("norm input must have at least one axis");
    assert!(d >= 1);
    let mut out = vec![0.0; x.numel()];
    for (xs, os) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        f(xs, os);
    }
    Tensor::from_vec(x.shape().to_vec(), out, x.dtype())
}

/// Standardize each last-axis slice (biased variance) and
/// apply the learnable affine.
pub fn layer_norm(x: &Tensor, p: &NormParams) -> Tensor {
    p.check(*x.shape().last().unwrap());
    map_slices(x, |xs, os| layer_norm_slice(xs, p.gamma.data(), p.beta.data(), p.eps, os))
}

/// x / sqrt(mean(x^2) + eps) * gamma.
pub fn rms_norm(x: &Tensor, gamma: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().unwrap();
    assert_eq!(gamma.shape(), [d]);
    map_slices(x, |xs, os| {
        let mut ms = 0.0;
        for &v in xs {
            ms += v * v;
        }
        let r = 1.0 / (ms / d as f64 + eps).sqrt();
        for j in 0..d {
            os[j] = xs[j] * r * gamma.data()[j];
        }
    })
}

/// gamma * x + beta with no standardization ("only learnable"). eps plays
/// no role here.
pub fn affine_only(x: &Tensor, p: &NormParams) -> Tensor {
    p.check(*x.shape().last().unwrap());
    map_slices(x, |xs, os| {
        for j in 0..xs.len() {
            os[j] = p.gamma.data()[j] * xs[j] + p.beta.data()[j];
        }
    })
}

/// Standardization alone ("no learnable").
pub fn normalize_only(x: &Tensor, eps: f64) -> Tensor {
    map_slices(x, |xs, os| {
        let (mean, inv_std) = slice_moments(xs, eps);
        for j in 0..xs.len() {
            os[j] = (xs[j] - mean) * inv_std;
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Tensor};

    fn t(v: Vec<f64>) -> Tensor {
        let n = v.len();
        Tensor::from_vec(vec![n], v, DType::F64)
    }

    #[test]
    fn zero_variance_slice_maps_to_beta() {
        let p = NormParams::identity(3, DType::F64);
        let y = layer_norm(&t(vec![5.0, 5.0, 5.0]), &p);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let mut p2 = NormParams::identity(3, DType::F64);
        p2.beta = t(vec![7.0, 8.0, 9.0]);
        let y2 = layer_norm(&t(vec![5.0, 5.0, 5.0]), &p2);
        assert_eq!(y2.data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn layer_norm_matches_hand_evaluation() {
        // x=[1,2,3], biased variance 2/3; with eps ~ 0 the output is
        // +-sqrt(3/2) around zero.
        let mut p = NormParams::identity(3, DType::F64);
        p.eps = 1e-300;
        let y = layer_norm(&t(vec![1.0, 2.0, 3.0]), &p);
        let e = (1.5f64).sqrt();
        assert!((y.data()[0] + e).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - e).abs() < 1e-12);
    }

    #[test]
    fn affine_applies_to_standardized_input() {
        let mut p = NormParams::identity(2, DType::F64);
        p.gamma = t(vec![2.0, 2.0]);
        p.beta = t(vec![1.0, 1.0]);
        let z = t(vec![-1.0, 1.0]); // already standardized
        let y = layer_norm(&z, &p);
        for (a, b) in y.data().iter().zip([-1.0, 1.0]) {
            assert!((a - (2.0 * b + 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn rms_norm_hand_case() {
        // x=[3,4]: rms = sqrt(25/2) = 3.5355339
        let y = rms_norm(&t(vec![3.0, 4.0]), &t(vec![1.0, 1.0]), 1e-300);
        assert!((y.data()[0] - 0.848528137423857).abs() < 1e-12);
        assert!((y.data()[1] - 1.1313708498984762).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_zero_cases() {
        let y = rms_norm(&t(vec![0.0, 0.0]), &t(vec![1.0, 1.0]), 1e-6);
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = rms_norm(&t(vec![3.0, 4.0]), &t(vec![0.0, 0.0]), 1e-6);
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn affine_only_identity_and_constant() {
        let p = NormParams::identity(3, DType::F64);
        let x = t(vec![0.5, -1.0, 2.0]);
        assert_eq!(affine_only(&x, &p).data(), x.data());

        let mut p0 = NormParams::identity(3, DType::F64);
        p0.gamma = t(vec![0.0, 0.0, 0.0]);
        p0.beta = t(vec![4.0, 4.0, 4.0]);
        assert_eq!(affine_only(&x, &p0).data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn affine_only_equals_layer_norm_minus_standardization() {
        // layer_norm = affine_only o normalize_only by definition
        let mut rng = crate::rng::SplitMix64::new(11);
        let x = t((0..7).map(|_| rng.next_f64() * 4.0 - 2.0).collect());
        let mut p = NormParams::identity(7, DType::F64);
        p.gamma = t((0..7).map(|_| rng.next_f64()).collect());
        p.beta = t((0..7).map(|_| rng.next_f64()).collect());
        let via_parts = affine_only(&normalize_only(&x, p.eps), &p);
        let direct = layer_norm(&x, &p);
        for (a, b) in via_parts.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_only_equals_layer_norm_with_unit_params() {
        let x = t(vec![0.3, -1.2, 2.2, 0.0]);
        let p = NormParams::identity(4, DType::F64);
        assert_eq!(normalize_only(&x, p.eps).data(), layer_norm(&x, &p).data());
    }

    #[test]
    fn normalize_only_output_statistics() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let x = t((0..64).map(|_| rng.next_f64() * 4.0 - 2.0).collect());
        let y = normalize_only(&x, 1e-12);
        let d = y.numel() as f64;
        let mean: f64 = y.data().iter().sum::<f64>() / d;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-5);
    }

    proptest::proptest! {
        // standardization holds for arbitrary finite inputs, not just the
        // seeded cases above
        #[test]
        fn layer_norm_standardizes_arbitrary_rows(
            xs in proptest::collection::vec(-1e3f64..1e3, 2..48),
        ) {
            let d = xs.len();
            let x = Tensor::from_vec(vec![1, d], xs, DType::F64);
            let y = layer_norm(&x, &NormParams::identity(d, DType::F64));
            let mean: f64 = y.data().iter().sum::<f64>() / d as f64;
            let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            proptest::prop_assert!(mean.abs() < 1e-6);
            // zero-variance inputs legitimately standardize to all zeros
            proptest::prop_assert!(var.sqrt() < 1.0 + 1e-5);
        }

        #[test]
        fn shift_and_positive_scale_invariance(
            xs in proptest::collection::vec(-10.0f64..10.0, 4..32),
            shift in -50.0f64..50.0,
            scale in 0.1f64..20.0,
        ) {
            let d = xs.len();
            let p = NormParams::identity(d, DType::F64);
            let a = layer_norm(&Tensor::from_vec(vec![1, d], xs.clone(), DType::F64), &p);
            let moved: Vec<f64> = xs.iter().map(|v| v * scale + shift).collect();
            let b = layer_norm(&Tensor::from_vec(vec![1, d], moved, DType::F64), &p);
            for (x, y) in a.data().iter().zip(b.data()) {
                proptest::prop_assert!((x - y).abs() < 1e-5, "{} vs {}", x, y);
            }
        }
    }
}
