//! Central finite-difference checks of the tape's analytic gradients.
//!
//! The numeric side only ever calls forward kernels, so it stays independent
//! of every backward formula it checks. Everything runs in `f64`.
//!
//! Error measure: `max_i |analytic_i − numeric_i| / max(‖analytic‖∞, ‖numeric‖∞)`,
//! i.e. the worst coordinate error relative to the gradient's scale. A plain
//! per-coordinate ratio blows up on coordinates whose true gradient is ~0.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv2d, conv2d_transpose, Padding};
use super::norm::batchnorm;
use super::ops::{self, Activation};
use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::{Shape, Tensor4};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-3;
/// Threshold for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Threshold for whole reduced-depth networks.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Central differences of `f` at `x` for the listed flat indices.
pub fn finite_difference(
    f: &mut dyn FnMut(&Tensor4<f64>) -> Result<f64>,
    x: &Tensor4<f64>,
    h: f64,
    indices: &[usize],
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Up to `max` flat indices of a tensor of `len` elements, spread evenly.
pub fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

type Forward<'a> = dyn Fn(&[Tensor4<f64>]) -> Result<Tensor4<f64>> + 'a;
type Taped<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Checks every argument of one operation. `forward` evaluates the kernel
/// directly; `taped` records the same operation on a tape. The output is
/// scalarized with a random weighting so all output coordinates contribute.
pub fn check_op(
    name: &str,
    args: &[Tensor4<f64>],
    forward: &Forward<'_>,
    taped: &Taped<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<CheckReport> {
    let out = forward(args)?;
    let weights = Tensor4::<f64>::random_normal(out.shape(), 0.0, 1.0, rng);

    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = args.iter().map(|a| tape.input_with_grad(a.clone())).collect();
    let y = taped(&mut tape, &vars)?;
    let loss = tape.weighted_sum(y, weights.clone())?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap_or_else(|| Tensor4::zeros(args[k].shape()));
        let idx = sample_indices(args[k].len(), 256);
        let mut f = |probe: &Tensor4<f64>| {
            let mut a = args.to_vec();
            a[k] = probe.clone();
            forward(&a)?.dot(&weights)
        };
        let numeric = finite_difference(&mut f, &args[k], FD_STEP, &idx)?;
        let picked: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
        worst = worst.max(relative_error(&picked, &numeric));
        coords += idx.len();
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
        coords,
    })
}

fn normal(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::random_normal(shape, 0.0, 1.0, rng)
}

/// Values with magnitude in `[0.1, 2)` and random sign, away from kinks at 0.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let data = (0..shape.len())
        .map(|_| {
            let m: f64 = rng.random_range(0.1..2.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor4::from_vec(shape, data).expect("sized")
}

/// Finite-difference checks of every differentiable operation.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    let args = vec![
        normal(Shape::new(1, 5, 5, 2), &mut rng),
        normal(Shape::new(3, 3, 2, 2), &mut rng),
        normal(Shape::vector(2), &mut rng),
    ];
    reports.push(check_op(
        "conv2d k3 s1 same",
        &args,
        &|a| conv2d(&a[0], &a[1], Some(&a[2]), 1, Padding::Same),
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same),
        &mut rng,
    )?);

    let args = vec![
        normal(Shape::new(2, 7, 6, 3), &mut rng),
        normal(Shape::new(4, 4, 3, 4), &mut rng),
        normal(Shape::vector(4), &mut rng),
    ];
    reports.push(check_op(
        "conv2d k4 s2 same",
        &args,
        &|a| conv2d(&a[0], &a[1], Some(&a[2]), 2, Padding::Same),
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same),
        &mut rng,
    )?);

    let args = vec![
        normal(Shape::new(1, 6, 6, 3), &mut rng),
        normal(Shape::new(4, 4, 3, 2), &mut rng),
    ];
    reports.push(check_op(
        "conv2d k4 s1 valid",
        &args,
        &|a| conv2d(&a[0], &a[1], None, 1, Padding::Valid),
        &|t, v| t.conv2d(v[0], v[1], None, 1, Padding::Valid),
        &mut rng,
    )?);

    let args = vec![
        normal(Shape::new(1, 3, 3, 4), &mut rng),
        normal(Shape::new(4, 4, 2, 4), &mut rng),
        normal(Shape::vector(2), &mut rng),
    ];
    reports.push(check_op(
        "conv2d_transpose k4 s2",
        &args,
        &|a| conv2d_transpose(&a[0], &a[1], Some(&a[2]), 2),
        &|t, v| t.conv2d_transpose(v[0], v[1], Some(v[2]), 2),
        &mut rng,
    )?);

    let args = vec![
        normal(Shape::new(2, 4, 4, 3), &mut rng),
        normal(Shape::vector(3), &mut rng),
        normal(Shape::vector(3), &mut rng),
    ];
    reports.push(check_op(
        "batchnorm",
        &args,
        &|a| Ok(batchnorm(&a[0], &a[1], &a[2], 1e-5)?.0),
        &|t, v| t.batchnorm(v[0], v[1], v[2], 1e-5),
        &mut rng,
    )?);

    let x = vec![away_from_zero(Shape::new(1, 4, 4, 3), &mut rng)];
    for (name, act) in [
        ("leaky_relu", Activation::LeakyRelu(0.2)),
        ("relu", Activation::Relu),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        reports.push(check_op(
            name,
            &x,
            &|a| Ok(ops::activate(&a[0], act)),
            &|t, v| t.activation(v[0], act),
            &mut rng,
        )?);
    }

    let x = vec![normal(Shape::new(1, 4, 4, 3), &mut rng)];
    reports.push(check_op(
        "dropout",
        &x,
        &|a| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            Ok(ops::dropout(&a[0], 0.5, &mut r, true)?.0)
        },
        &|t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            t.dropout(v[0], 0.5, &mut r, true)
        },
        &mut rng,
    )?);

    let args = vec![
        normal(Shape::new(1, 3, 3, 2), &mut rng),
        normal(Shape::new(1, 3, 3, 3), &mut rng),
    ];
    reports.push(check_op(
        "concat_channels",
        &args,
        &|a| ops::concat_channels(&a[0], &a[1]),
        &|t, v| t.concat_channels(v[0], v[1]),
        &mut rng,
    )?);

    let x = vec![normal(Shape::new(1, 3, 4, 2), &mut rng)];
    reports.push(check_op(
        "zero_pad",
        &x,
        &|a| Ok(ops::zero_pad(&a[0], 1)),
        &|t, v| t.zero_pad(v[0], 1),
        &mut rng,
    )?);

    let x = vec![normal(Shape::new(1, 3, 3, 1), &mut rng).map(|v| 3.0 * v)];
    for real in [true, false] {
        reports.push(check_op(
            if real { "gan_bce real" } else { "gan_bce fake" },
            &x,
            &|a| Ok(Tensor4::scalar(ops::gan_bce(&a[0], real))),
            &|t, v| t.gan_bce(v[0], real),
            &mut rng,
        )?);
    }

    let a = normal(Shape::new(1, 3, 3, 2), &mut rng);
    let gap = away_from_zero(a.shape(), &mut rng);
    let mut b = a.clone();
    b.add_assign(&gap)?;
    reports.push(check_op(
        "l1_loss",
        &[a, b],
        &|a| Ok(Tensor4::scalar(ops::l1_loss(&a[0], &a[1])?)),
        &|t, v| t.l1(v[0], v[1]),
        &mut rng,
    )?);

    Ok(reports)
}

type NetworkLoss<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

/// Checks the gradient of a whole network's scalar loss with respect to every
/// parameter tensor of `store`, all of which `loss` must bind as trainable.
/// Other networks the loss runs through belong in the closure, not in `store`.
///
/// Coordinates are drawn at random, at least one per tensor, up to
/// `max_coords`. A coordinate whose `±h` probes land on a different side of
/// any kink than the base point (see [`Tape::kink_signature`]) is skipped, as
/// central differences are meaningless across it.
pub fn check_network(
    name: &str,
    store: &ParamStore<f64>,
    loss: &NetworkLoss<'_>,
    max_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CheckReport> {
    let mut base = store.clone();
    base.zero_grads();
    let mut tape = Tape::<f64>::new();
    let l = loss(&mut tape, &base)?;
    let signature = tape.kink_signature();
    tape.backward_into(l, &mut base)?;

    let eval = |probe: &ParamStore<f64>| -> Result<(f64, bool)> {
        let mut t = Tape::<f64>::new();
        let v = loss(&mut t, probe)?;
        Ok((t.value(v)?.data()[0], t.kink_signature() == signature))
    };

    let mut candidates: Vec<(usize, usize)> = Vec::new();
    let mut rest: Vec<(usize, usize)> = Vec::new();
    for (p, param) in base.iter().enumerate() {
        let mut idx: Vec<usize> = (0..param.value().len()).collect();
        idx.shuffle(rng);
        candidates.push((p, idx[0]));
        rest.extend(idx[1..].iter().map(|&i| (p, i)));
    }
    rest.shuffle(rng);
    candidates.extend(rest);

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut probe = base.clone();
    for (p, i) in candidates {
        if analytic.len() >= max_coords {
            break;
        }
        let orig = probe.entry(p).value().data()[i];
        probe.value_mut(p).data_mut()[i] = orig + FD_STEP;
        let (up, up_ok) = eval(&probe)?;
        probe.value_mut(p).data_mut()[i] = orig - FD_STEP;
        let (down, down_ok) = eval(&probe)?;
        probe.value_mut(p).data_mut()[i] = orig;
        if up_ok && down_ok {
            analytic.push(base.entry(p).grad().data()[i]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_error: relative_error(&analytic, &numeric),
        tolerance: NETWORK_TOLERANCE,
        coords: analytic.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_a_cubic() {
        let x = Tensor4::<f64>::vector(&[0.5, -2.0]);
        let mut f = |t: &Tensor4<f64>| Ok(t.data().iter().map(|v| v * v * v).sum::<f64>());
        let g = finite_difference(&mut f, &x, 1e-3, &[0, 1]).unwrap();
        // Central differences of x³ carry an h² truncation term exactly equal to h².
        assert!((g[0] - (0.75 + 1e-6)).abs() < 1e-12);
        assert!((g[1] - (12.0 + 1e-6)).abs() < 1e-9);
    }

    #[test]
    fn relative_error_scale() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0, 0.0], &[1.0, 0.0]) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn every_op_passes() {
        for r in op_suite(2024).unwrap() {
            assert!(r.passed(), "{}: {:.3e}", r.name, r.max_rel_error);
        }
    }
}
