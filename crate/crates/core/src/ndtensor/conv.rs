//! Convolution and transposed-convolution kernels over NHWC tensors.
//!
//! Weights are stored as `kh × kw × cin × cout` (in the [`Shape`] fields
//! `n × h × w × c`). A transposed convolution shares that layout read the other
//! way round: a weight `k × k × A × B` maps `B` input channels to `A` output
//! channels, so that `conv2d_transpose(·, w)` is exactly the adjoint of
//! `conv2d(·, w)` at the matching stride.
//!
//! Each output element is reduced in a fixed order in `f64` regardless of how
//! rows are spread across threads, so results are bit-reproducible.

use rayon::prelude::*;

use super::tensor::{Scalar, Shape, Tensor4};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zero padding split evenly, the odd
    /// pixel going to the bottom/right.
    Same,
    /// No padding; output extent `floor((in - k) / stride) + 1`.
    Valid,
}

/// Resolved spatial geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn extent(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out.saturating_sub(1)) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if input < k {
                None
            } else {
                Some(((input - k) / stride + 1, 0))
            }
        }
    }
}

impl ConvGeometry {
    pub fn new(in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}×{kw} and stride {stride} must be positive"
            )));
        }
        let (out_h, pad_top) = extent(in_h, kh, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("input height {in_h} smaller than kernel {kh} with valid padding"),
            )
        })?;
        let (out_w, pad_left) = extent(in_w, kw, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("input width {in_w} smaller than kernel {kw} with valid padding"),
            )
        })?;
        Ok(ConvGeometry {
            in_h,
            in_w,
            out_h,
            out_w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        })
    }

    #[inline(always)]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad_top)
            .filter(|&iy| iy < self.in_h)
    }

    #[inline(always)]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx)
            .checked_sub(self.pad_left)
            .filter(|&ix| ix < self.in_w)
    }

    /// Output row fed by input row `iy` through kernel row `ky`, if any.
    #[inline(always)]
    fn out_row(&self, iy: usize, ky: usize) -> Option<usize> {
        let num = (iy + self.pad_top).checked_sub(ky)?;
        (num % self.stride == 0)
            .then_some(num / self.stride)
            .filter(|&oy| oy < self.out_h)
    }

    #[inline(always)]
    fn out_col(&self, ix: usize, kx: usize) -> Option<usize> {
        let num = (ix + self.pad_left).checked_sub(kx)?;
        (num % self.stride == 0)
            .then_some(num / self.stride)
            .filter(|&ox| ox < self.out_w)
    }
}

fn check_bias<E: Scalar>(op: &'static str, bias: Option<&Tensor4<E>>, channels: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != channels => Err(Error::shape(
            op,
            format!("bias {} does not match {channels} output channels", b.shape()),
        )),
        _ => Ok(()),
    }
}

/// Geometry and output shape of `conv2d(input, weight)`, validating channel agreement.
pub fn conv2d_geometry(input: Shape, weight: Shape, stride: usize, padding: Padding) -> Result<(ConvGeometry, Shape)> {
    if input.c != weight.w {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {input} has {} channels but weight {weight} expects {}",
                input.c, weight.w
            ),
        ));
    }
    let g = ConvGeometry::new(input.h, input.w, weight.n, weight.h, stride, padding).map_err(|e| match e {
        Error::Shape { msg, .. } => Error::shape("conv2d", format!("input {input}, weight {weight}: {msg}")),
        other => other,
    })?;
    Ok((g, Shape::new(input.n, g.out_h, g.out_w, weight.c)))
}

/// Geometry and output shape of `conv2d_transpose(input, weight)`.
///
/// The returned geometry describes the forward convolution whose adjoint this
/// is: it maps the (larger) output back onto the input.
pub fn conv2d_transpose_geometry(input: Shape, weight: Shape, stride: usize) -> Result<(ConvGeometry, Shape)> {
    if input.c != weight.c {
        return Err(Error::shape(
            "conv2d_transpose",
            format!(
                "input {input} has {} channels but weight {weight} expects {}",
                input.c, weight.c
            ),
        ));
    }
    let out = Shape::new(input.n, input.h * stride, input.w * stride, weight.w);
    let g = ConvGeometry::new(out.h, out.w, weight.n, weight.h, stride, Padding::Same)?;
    debug_assert_eq!((g.out_h, g.out_w), (input.h, input.w));
    Ok((g, out))
}

/// Forward convolution. `bias`, when present, holds one value per output channel.
pub fn conv2d<E: Scalar>(
    input: &Tensor4<E>,
    weight: &Tensor4<E>,
    bias: Option<&Tensor4<E>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor4<E>> {
    let (g, out_shape) = conv2d_geometry(input.shape(), weight.shape(), stride, padding)?;
    check_bias("conv2d", bias, out_shape.c)?;
    Ok(conv_forward_raw(input, weight, bias, &g, out_shape))
}

/// Transposed convolution with "same"-style padding: spatial extents grow by `stride`.
pub fn conv2d_transpose<E: Scalar>(
    input: &Tensor4<E>,
    weight: &Tensor4<E>,
    bias: Option<&Tensor4<E>>,
    stride: usize,
) -> Result<Tensor4<E>> {
    let (g, out_shape) = conv2d_transpose_geometry(input.shape(), weight.shape(), stride)?;
    check_bias("conv2d_transpose", bias, out_shape.c)?;
    let mut out = conv_input_grad_raw(input, weight, &g, out_shape);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b);
    }
    Ok(out)
}

fn add_channel_bias<E: Scalar>(t: &mut Tensor4<E>, bias: &Tensor4<E>) {
    let c = t.shape().c;
    let b: Vec<f64> = bias.to_f64_vec();
    t.data_mut().par_chunks_mut(c.max(1)).for_each(|px| {
        for (v, &bv) in px.iter_mut().zip(&b) {
            *v = E::from_f64(v.to_f64() + bv);
        }
    });
}

pub(crate) fn conv_forward_raw<E: Scalar>(
    input: &Tensor4<E>,
    weight: &Tensor4<E>,
    bias: Option<&Tensor4<E>>,
    g: &ConvGeometry,
    out_shape: Shape,
) -> Tensor4<E> {
    let is = input.shape();
    let (cin, cout) = (is.c, out_shape.c);
    let xd = input.data();
    let wd = weight.data();
    let bias: Vec<f64> = bias.map(|b| b.to_f64_vec()).unwrap_or_else(|| vec![0.0; cout]);
    let mut out = Tensor4::zeros(out_shape);
    if out_shape.is_empty() {
        return out;
    }
    out.data_mut()
        .par_chunks_mut(g.out_w * cout)
        .enumerate()
        .for_each(|(row, orow)| {
            let (b, oy) = (row / g.out_h, row % g.out_h);
            let mut acc = vec![0.0f64; cout];
            for ox in 0..g.out_w {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let xo = is.offset(b, iy, ix, 0);
                        let xrow = &xd[xo..xo + cin];
                        let wbase = (ky * g.kw + kx) * cin * cout;
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let xv = xv.to_f64();
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv.to_f64();
                            }
                        }
                    }
                }
                let dst = &mut orow[ox * cout..(ox + 1) * cout];
                for ((d, &a), &bv) in dst.iter_mut().zip(&acc).zip(&bias) {
                    *d = E::from_f64(a + bv);
                }
            }
        });
    out
}

/// Gradient of a convolution with respect to its input; also the forward pass
/// of the transposed convolution.
pub(crate) fn conv_input_grad_raw<E: Scalar>(
    grad_out: &Tensor4<E>,
    weight: &Tensor4<E>,
    g: &ConvGeometry,
    in_shape: Shape,
) -> Tensor4<E> {
    let os = grad_out.shape();
    let (cin, cout) = (in_shape.c, os.c);
    let dyd = grad_out.data();
    let wd = weight.data();
    let mut dx = Tensor4::zeros(in_shape);
    if in_shape.is_empty() {
        return dx;
    }
    dx.data_mut()
        .par_chunks_mut(in_shape.w * cin)
        .enumerate()
        .for_each(|(row, xrow)| {
            let (b, iy) = (row / in_shape.h, row % in_shape.h);
            let mut acc = vec![0.0f64; cin];
            for ix in 0..in_shape.w {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for ky in 0..g.kh {
                    let Some(oy) = g.out_row(iy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ox) = g.out_col(ix, kx) else { continue };
                        let yo = os.offset(b, oy, ox, 0);
                        let dyrow = &dyd[yo..yo + cout];
                        let wbase = (ky * g.kw + kx) * cin * cout;
                        for (ci, a) in acc.iter_mut().enumerate() {
                            let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let mut s = 0.0f64;
                            for (&d, &wv) in dyrow.iter().zip(wrow) {
                                s += d.to_f64() * wv.to_f64();
                            }
                            *a += s;
                        }
                    }
                }
                for (d, &a) in xrow[ix * cin..(ix + 1) * cin].iter_mut().zip(&acc) {
                    *d = E::from_f64(a);
                }
            }
        });
    dx
}

/// Gradient of a convolution with respect to its weight.
pub(crate) fn conv_weight_grad_raw<E: Scalar>(
    input: &Tensor4<E>,
    grad_out: &Tensor4<E>,
    g: &ConvGeometry,
    w_shape: Shape,
) -> Tensor4<E> {
    let is = input.shape();
    let os = grad_out.shape();
    let (cin, cout) = (is.c, os.c);
    let xd = input.data();
    let dyd = grad_out.data();
    let mut dw = Tensor4::zeros(w_shape);
    let tap = cin * cout;
    if tap == 0 {
        return dw;
    }
    dw.data_mut().par_chunks_mut(tap).enumerate().for_each(|(k, dtap)| {
        let (ky, kx) = (k / g.kw, k % g.kw);
        let mut acc = vec![0.0f64; tap];
        for b in 0..os.n {
            for oy in 0..g.out_h {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                for ox in 0..g.out_w {
                    let Some(ix) = g.in_col(ox, kx) else { continue };
                    let xo = is.offset(b, iy, ix, 0);
                    let yo = os.offset(b, oy, ox, 0);
                    let dyrow = &dyd[yo..yo + cout];
                    for (ci, &xv) in xd[xo..xo + cin].iter().enumerate() {
                        let xv = xv.to_f64();
                        if xv == 0.0 {
                            continue;
                        }
                        let arow = &mut acc[ci * cout..(ci + 1) * cout];
                        for (a, &d) in arow.iter_mut().zip(dyrow) {
                            *a += xv * d.to_f64();
                        }
                    }
                }
            }
        }
        for (d, &a) in dtap.iter_mut().zip(&acc) {
            *d = E::from_f64(a);
        }
    });
    dw
}

/// Per-channel sum over batch and spatial positions: the bias gradient.
pub(crate) fn channel_sum<E: Scalar>(grad_out: &Tensor4<E>) -> Tensor4<E> {
    let c = grad_out.shape().c;
    let mut acc = vec![0.0f64; c];
    for px in grad_out.data().chunks(c.max(1)) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v.to_f64();
        }
    }
    Tensor4::vector(&acc)
}

/// Gradients of `conv2d` with respect to input, weight, and bias.
pub fn conv2d_backward<E: Scalar>(
    input: &Tensor4<E>,
    weight: &Tensor4<E>,
    grad_out: &Tensor4<E>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor4<E>, Tensor4<E>, Tensor4<E>)> {
    let (g, out_shape) = conv2d_geometry(input.shape(), weight.shape(), stride, padding)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(
            "conv2d backward",
            format!("gradient {} does not match output {out_shape}", grad_out.shape()),
        ));
    }
    Ok((
        conv_input_grad_raw(grad_out, weight, &g, input.shape()),
        conv_weight_grad_raw(input, grad_out, &g, weight.shape()),
        channel_sum(grad_out),
    ))
}

/// Gradients of `conv2d_transpose` with respect to input, weight, and bias.
pub fn conv2d_transpose_backward<E: Scalar>(
    input: &Tensor4<E>,
    weight: &Tensor4<E>,
    grad_out: &Tensor4<E>,
    stride: usize,
) -> Result<(Tensor4<E>, Tensor4<E>, Tensor4<E>)> {
    let (g, out_shape) = conv2d_transpose_geometry(input.shape(), weight.shape(), stride)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(
            "conv2d_transpose backward",
            format!("gradient {} does not match output {out_shape}", grad_out.shape()),
        ));
    }
    Ok((
        conv_forward_raw(grad_out, weight, None, &g, input.shape()),
        conv_weight_grad_raw(grad_out, input, &g, weight.shape()),
        channel_sum(grad_out),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn scalar_multiply() {
        let x = Tensor4::<f32>::scalar(2.0);
        let w = Tensor4::<f32>::scalar(3.0);
        let y = conv2d(&x, &w, Some(&Tensor4::vector(&[0.0])), 1, Padding::Same).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn same_padding_extents() {
        let x = Tensor4::<f32>::zeros(Shape::new(1, 256, 256, 3));
        let w = Tensor4::<f32>::zeros(Shape::new(4, 4, 3, 64));
        let y = conv2d(&x, &w, None, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 128, 128, 64));

        let g = ConvGeometry::new(5, 5, 4, 4, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (3, 1));
        let g = ConvGeometry::new(32, 32, 3, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (32, 1));
        let g = ConvGeometry::new(34, 34, 4, 4, 1, Padding::Valid).unwrap();
        assert_eq!(g.out_h, 31);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let x = Tensor4::<f32>::zeros(Shape::new(1, 8, 8, 3));
        let w = Tensor4::<f32>::zeros(Shape::new(4, 4, 2, 8));
        let msg = conv2d(&x, &w, None, 2, Padding::Same).unwrap_err().to_string();
        assert!(msg.contains("1×8×8×3") && msg.contains("4×4×2×8"), "{msg}");
        let short = Tensor4::<f32>::zeros(Shape::new(1, 2, 2, 2));
        assert!(conv2d(&short, &w, None, 1, Padding::Valid).is_err());
    }

    #[test]
    fn transpose_doubles_extent() {
        let x = Tensor4::<f32>::zeros(Shape::new(1, 1, 1, 512));
        let w = Tensor4::<f32>::zeros(Shape::new(4, 4, 512, 512));
        let y = conv2d_transpose(&x, &w, None, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 512));
        let y = conv2d_transpose(&y, &w, None, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 4, 512));
    }

    #[test]
    fn adjoint_identity() {
        let mut r = rng();
        for &(h, cin, cout, stride) in &[(8usize, 3usize, 5usize, 2usize), (6, 2, 4, 2), (7, 3, 2, 2)] {
            let w = Tensor4::<f64>::random_normal(Shape::new(4, 4, cin, cout), 0.0, 1.0, &mut r);
            let a = Tensor4::<f64>::random_normal(Shape::new(2, h * stride, h * stride, cin), 0.0, 1.0, &mut r);
            let b = Tensor4::<f64>::random_normal(Shape::new(2, h, h, cout), 0.0, 1.0, &mut r);
            let ca = conv2d(&a, &w, None, stride, Padding::Same).unwrap();
            let tb = conv2d_transpose(&b, &w, None, stride).unwrap();
            let lhs = ca.dot(&b).unwrap();
            let rhs = a.dot(&tb).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn bias_gradient_is_channel_sum() {
        let g = Tensor4::<f64>::from_fn(Shape::new(1, 2, 2, 2), |_, y, x, c| {
            (y * 2 + x) as f64 + 10.0 * c as f64
        });
        assert_eq!(channel_sum(&g).to_f64_vec(), vec![6.0, 46.0]);
    }
}
