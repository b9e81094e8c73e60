//! Elementwise activations, dropout, channel concatenation, zero padding, and
//! the scalar loss reductions.

use rand::Rng;

use super::tensor::{Scalar, Shape, Tensor4};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

#[inline]
pub fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if v >= 0.0 {
                    v
                } else {
                    slope * v
                }
            }
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid_f64(v),
        }
    }

    /// Derivative expressed through the input `v` and the output `y`.
    #[inline]
    pub fn derivative(self, v: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if v > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub fn activate<E: Scalar>(input: &Tensor4<E>, act: Activation) -> Tensor4<E> {
    match act {
        // tanh saturates to ±1 in floating point from |v| ≈ 9 (f32) / 19 (f64);
        // keep the output inside the open interval.
        Activation::Tanh => input.map(|v| v.tanh().clamp(-E::BELOW_ONE, E::BELOW_ONE)),
        _ => input.map(|v| act.apply(v)),
    }
}

pub fn activate_backward<E: Scalar>(
    input: &Tensor4<E>,
    output: &Tensor4<E>,
    grad_out: &Tensor4<E>,
    act: Activation,
) -> Tensor4<E> {
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad_out.data())
        .map(|((&v, &y), &g)| E::from_f64(g.to_f64() * act.derivative(v.to_f64(), y.to_f64())))
        .collect();
    Tensor4::from_vec(input.shape(), data).expect("same shape")
}

/// `max(v, slope·v)` elementwise.
pub fn leaky_relu<E: Scalar>(input: &Tensor4<E>, slope: f64) -> Result<Tensor4<E>> {
    if !(slope >= 0.0) {
        return Err(Error::InvalidArgument(format!("leaky relu slope {slope}")));
    }
    Ok(activate(input, Activation::LeakyRelu(slope)))
}

pub fn relu<E: Scalar>(input: &Tensor4<E>) -> Tensor4<E> {
    activate(input, Activation::Relu)
}

pub fn tanh_act<E: Scalar>(input: &Tensor4<E>) -> Tensor4<E> {
    activate(input, Activation::Tanh)
}

pub fn sigmoid<E: Scalar>(input: &Tensor4<E>) -> Tensor4<E> {
    activate(input, Activation::Sigmoid)
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` or `1/(1-rate)`) that the backward pass reuses.
pub fn dropout<E: Scalar, R: Rng + ?Sized>(
    input: &Tensor4<E>,
    rate: f64,
    rng: &mut R,
    active: bool,
) -> Result<(Tensor4<E>, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !active || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok((apply_mask(input, &mask), Some(mask)))
}

pub(crate) fn apply_mask<E: Scalar>(t: &Tensor4<E>, mask: &[f64]) -> Tensor4<E> {
    let data = t
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| E::from_f64(v.to_f64() * m))
        .collect();
    Tensor4::from_vec(t.shape(), data).expect("same shape")
}

/// Joins `a` and `b` along the channel axis, `a` first.
pub fn concat_channels<E: Scalar>(a: &Tensor4<E>, b: &Tensor4<E>) -> Result<Tensor4<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::shape(
            "concat_channels",
            format!("{sa} and {sb} differ outside the channel axis"),
        ));
    }
    let out = Shape::new(sa.n, sa.h, sa.w, sa.c + sb.c);
    let mut data = Vec::with_capacity(out.len());
    let pixels = sa.n * sa.h * sa.w;
    for p in 0..pixels {
        data.extend_from_slice(&a.data()[p * sa.c..(p + 1) * sa.c]);
        data.extend_from_slice(&b.data()[p * sb.c..(p + 1) * sb.c]);
    }
    Tensor4::from_vec(out, data)
}

/// Inverse of [`concat_channels`]: the first `first` channels and the rest.
pub fn split_channels<E: Scalar>(t: &Tensor4<E>, first: usize) -> Result<(Tensor4<E>, Tensor4<E>)> {
    let s = t.shape();
    if first > s.c {
        return Err(Error::shape(
            "split_channels",
            format!("cannot take {first} channels from {s}"),
        ));
    }
    let rest = s.c - first;
    let pixels = s.n * s.h * s.w;
    let mut a = Vec::with_capacity(pixels * first);
    let mut b = Vec::with_capacity(pixels * rest);
    for px in t.data().chunks(s.c.max(1)).take(pixels) {
        a.extend_from_slice(&px[..first]);
        b.extend_from_slice(&px[first..]);
    }
    Ok((
        Tensor4::from_vec(Shape::new(s.n, s.h, s.w, first), a)?,
        Tensor4::from_vec(Shape::new(s.n, s.h, s.w, rest), b)?,
    ))
}

/// Surrounds every spatial plane with `pad` zero pixels on each side.
pub fn zero_pad<E: Scalar>(input: &Tensor4<E>, pad: usize) -> Tensor4<E> {
    let s = input.shape();
    let out = Shape::new(s.n, s.h + 2 * pad, s.w + 2 * pad, s.c);
    let mut t = Tensor4::zeros(out);
    for n in 0..s.n {
        for y in 0..s.h {
            let src = s.offset(n, y, 0, 0);
            let dst = out.offset(n, y + pad, pad, 0);
            t.data_mut()[dst..dst + s.w * s.c].copy_from_slice(&input.data()[src..src + s.w * s.c]);
        }
    }
    t
}

/// Backward of [`zero_pad`]: crops the border back off.
pub fn zero_pad_backward<E: Scalar>(grad_out: &Tensor4<E>, pad: usize) -> Result<Tensor4<E>> {
    let s = grad_out.shape();
    if s.h < 2 * pad || s.w < 2 * pad {
        return Err(Error::shape(
            "zero_pad backward",
            format!("{s} smaller than padding {pad}"),
        ));
    }
    grad_out.crop(pad, pad, s.h - 2 * pad, s.w - 2 * pad)
}

/// Mean sigmoid cross-entropy of `logits` against an all-ones (`real`) or
/// all-zeros target, in the overflow-free form
/// `max(z,0) − z·t + ln(1 + e^{−|z|})`.
pub fn gan_bce<E: Scalar>(logits: &Tensor4<E>, target_is_real: bool) -> f64 {
    let t = if target_is_real { 1.0 } else { 0.0 };
    let total: f64 = logits
        .data()
        .iter()
        .map(|&z| {
            let z = z.to_f64();
            z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
        })
        .sum();
    total / logits.len().max(1) as f64
}

pub fn gan_bce_backward<E: Scalar>(logits: &Tensor4<E>, target_is_real: bool, grad: f64) -> Tensor4<E> {
    let t = if target_is_real { 1.0 } else { 0.0 };
    let scale = grad / logits.len().max(1) as f64;
    logits.map(|z| (sigmoid_f64(z) - t) * scale)
}

/// Mean absolute difference.
pub fn l1_loss<E: Scalar>(a: &Tensor4<E>, b: &Tensor4<E>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l1_loss", format!("{} vs {}", a.shape(), b.shape())));
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .sum();
    Ok(total / a.len().max(1) as f64)
}

/// Gradient of [`l1_loss`] with respect to `a` (negate for `b`); zero where `a = b`.
pub fn l1_loss_backward<E: Scalar>(a: &Tensor4<E>, b: &Tensor4<E>, grad: f64) -> Tensor4<E> {
    let scale = grad / a.len().max(1) as f64;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            E::from_f64(if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            })
        })
        .collect();
    Tensor4::from_vec(a.shape(), data).expect("same shape")
}
