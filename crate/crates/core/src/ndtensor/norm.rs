use rayon::prelude::*;

use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

/// Per-channel statistics saved by [`batchnorm`] for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn check<E: Scalar>(input: &Tensor4<E>, gamma: &Tensor4<E>, beta: &Tensor4<E>) -> Result<usize> {
    let s = input.shape();
    if s.n * s.h * s.w == 0 {
        return Err(Error::shape(
            "batchnorm",
            format!("input {s} has no elements per channel"),
        ));
    }
    if gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "input {s} has {} channels but gamma {} / beta {}",
                s.c,
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(s.c)
}

fn channel_stats<E: Scalar>(input: &Tensor4<E>, c: usize, epsilon: f64) -> BatchNormStats {
    let m = (input.len() / c) as f64;
    let mut mean = vec![0.0f64; c];
    for px in input.data().chunks(c) {
        for (a, &v) in mean.iter_mut().zip(px) {
            *a += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![0.0f64; c];
    for px in input.data().chunks(c) {
        for ((a, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
            let d = v.to_f64() - mu;
            *a += d * d;
        }
    }
    let inv_std = var.iter().map(|&v| 1.0 / (v / m + epsilon).sqrt()).collect();
    BatchNormStats { mean, inv_std }
}

/// Normalizes every channel with the statistics of the current batch over
/// batch, height, and width, then applies `gamma · x̂ + beta`.
pub fn batchnorm<E: Scalar>(
    input: &Tensor4<E>,
    gamma: &Tensor4<E>,
    beta: &Tensor4<E>,
    epsilon: f64,
) -> Result<(Tensor4<E>, BatchNormStats)> {
    let c = check(input, gamma, beta)?;
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("batchnorm epsilon {epsilon}")));
    }
    let stats = channel_stats(input, c, epsilon);
    let g = gamma.to_f64_vec();
    let b = beta.to_f64_vec();
    let mut out = Tensor4::zeros(input.shape());
    out.data_mut()
        .par_chunks_mut(c)
        .zip(input.data().par_chunks(c))
        .for_each(|(o, x)| {
            for ch in 0..c {
                let xhat = (x[ch].to_f64() - stats.mean[ch]) * stats.inv_std[ch];
                o[ch] = E::from_f64(g[ch] * xhat + b[ch]);
            }
        });
    Ok((out, stats))
}

/// Gradients of [`batchnorm`] with respect to input, gamma, and beta.
pub fn batchnorm_backward<E: Scalar>(
    input: &Tensor4<E>,
    gamma: &Tensor4<E>,
    stats: &BatchNormStats,
    grad_out: &Tensor4<E>,
) -> (Tensor4<E>, Tensor4<E>, Tensor4<E>) {
    let c = input.shape().c;
    let m = (input.len() / c) as f64;
    let g = gamma.to_f64_vec();
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (x, dy) in input.data().chunks(c).zip(grad_out.data().chunks(c)) {
        for ch in 0..c {
            let xhat = (x[ch].to_f64() - stats.mean[ch]) * stats.inv_std[ch];
            let d = dy[ch].to_f64();
            sum_dy[ch] += d;
            sum_dy_xhat[ch] += d * xhat;
        }
    }
    let mut dx = Tensor4::zeros(input.shape());
    dx.data_mut()
        .par_chunks_mut(c)
        .zip(input.data().par_chunks(c).zip(grad_out.data().par_chunks(c)))
        .for_each(|(o, (x, dy))| {
            for ch in 0..c {
                let xhat = (x[ch].to_f64() - stats.mean[ch]) * stats.inv_std[ch];
                let v = g[ch] * stats.inv_std[ch] / m * (m * dy[ch].to_f64() - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                o[ch] = E::from_f64(v);
            }
        });
    (dx, Tensor4::vector(&sum_dy_xhat), Tensor4::vector(&sum_dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Shape;

    fn unit(c: usize) -> (Tensor4<f64>, Tensor4<f64>) {
        (Tensor4::filled(Shape::vector(c), 1.0), Tensor4::zeros(Shape::vector(c)))
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor4::<f64>::filled(Shape::new(2, 3, 3, 2), 4.25);
        let (g, b) = unit(2);
        let (y, _) = batchnorm(&x, &g, &b, DEFAULT_BN_EPSILON).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_values_standardize_to_unit() {
        let x = Tensor4::<f64>::from_vec(Shape::new(1, 1, 2, 1), vec![1.0, 3.0]).unwrap();
        let (g, b) = unit(1);
        let (y, _) = batchnorm(&x, &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn output_moments_follow_gamma_beta() {
        let x = Tensor4::<f64>::from_fn(Shape::new(2, 4, 4, 2), |n, y, x, c| {
            ((n * 31 + y * 7 + x * 3 + c) % 11) as f64 * (c + 1) as f64
        });
        let g = Tensor4::vector(&[2.0, 0.5]);
        let b = Tensor4::vector(&[-1.0, 3.0]);
        let (y, _) = batchnorm(&x, &g, &b, 1e-12).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - b.data()[ch]).abs() < 1e-9);
            assert!((sd - g.data()[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_empty_slab_and_bad_params() {
        let (g, b) = unit(3);
        let empty = Tensor4::<f64>::zeros(Shape::new(0, 2, 2, 3));
        assert!(batchnorm(&empty, &g, &b, 1e-5).is_err());
        let x = Tensor4::<f64>::zeros(Shape::new(1, 2, 2, 2));
        assert!(batchnorm(&x, &g, &b, 1e-5).is_err());
    }
}
