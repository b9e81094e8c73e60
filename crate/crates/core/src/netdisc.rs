//! PatchGAN discriminator over a channel-concatenated `(input, target)` pair.
//!
//! Layers: three stride-2 downsamples, a 3×3 256-filter convolution with
//! ReLU, then two zero-pad + 4×4 valid convolutions (512 filters without
//! bias, then 1 filter). The result is a map of raw logits, one per patch.
//! Parameters are named `disc/down{i}/…`, `disc/conv256/…`, `disc/conv512/…`
//! and `disc/out/…`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndtensor::ops::sigmoid_f64;
use crate::ndtensor::{
    Padding, ParamStore, Scalar, Shape, Tape, Tensor4, Var, DEFAULT_BN_EPSILON, DEFAULT_LEAKY_SLOPE,
};
use crate::netgen::layer_params;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    pub down_filters: Vec<usize>,
    pub extra_conv_filters: usize,
    pub extra_conv_kernel: usize,
    /// `Same` keeps the canonical 30×30 patch map at 256 input; `Valid` gives 28×28.
    pub extra_conv_padding: Padding,
    pub deep_conv_filters: usize,
    /// Channels of each image; the network sees twice this after concatenation.
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    /// Batch-statistics normalization in downsamples 2.. and after the deep
    /// convolution. Disabling it makes every logit a function of its
    /// receptive field alone.
    pub batchnorm: bool,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        DiscriminatorSpec {
            down_filters: vec![64, 128, 256],
            extra_conv_filters: 256,
            extra_conv_kernel: 3,
            extra_conv_padding: Padding::Same,
            deep_conv_filters: 512,
            in_channels: 3,
            kernel: 4,
            stride: 2,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            batchnorm: true,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("discriminator spec: {msg}")));
        let counts = [self.extra_conv_filters, self.deep_conv_filters, self.in_channels];
        if self.down_filters.iter().chain(&counts).any(|&f| f == 0) {
            return bad("filter counts must be positive".into());
        }
        if self.kernel == 0 || self.extra_conv_kernel == 0 || self.stride == 0 {
            return bad(format!(
                "kernel {} extra kernel {} stride {}",
                self.kernel, self.extra_conv_kernel, self.stride
            ));
        }
        if self.leaky_slope < 0.0 {
            return bad(format!("leaky slope {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Side of the logit map for a `size × size` input, or an error when the
    /// input is too small to reach the output layer.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        let mut s = size;
        for _ in &self.down_filters {
            s = s.div_ceil(self.stride);
        }
        if self.extra_conv_padding == Padding::Valid {
            s = s
                .checked_sub(self.extra_conv_kernel - 1)
                .filter(|&v| v > 0)
                .ok_or_else(|| too_small(size))?;
        }
        for _ in 0..2 {
            s = (s + 2)
                .checked_sub(self.kernel - 1)
                .filter(|&v| v > 0)
                .ok_or_else(|| too_small(size))?;
        }
        Ok(s)
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let mut total = 0;
        let mut cin = 2 * self.in_channels;
        for (i, &f) in self.down_filters.iter().enumerate() {
            total += k2 * cin * f + f + if i > 0 && self.batchnorm { 2 * f } else { 0 };
            cin = f;
        }
        let e = self.extra_conv_filters;
        total += self.extra_conv_kernel.pow(2) * cin * e + e;
        let d = self.deep_conv_filters;
        total += k2 * e * d + if self.batchnorm { 2 * d } else { 0 };
        total + k2 * d + 1
    }
}

fn too_small(size: usize) -> Error {
    Error::shape(
        "discriminator",
        format!("input {size}×{size} is too small for the patch layers"),
    )
}

/// Fresh discriminator parameters, initialized like the generator's.
pub fn build_discriminator<E: Scalar, R: Rng + ?Sized>(spec: &DiscriminatorSpec, rng: &mut R) -> Result<ParamStore<E>> {
    spec.validate()?;
    let k = spec.kernel;
    let mut store = ParamStore::new();
    let mut cin = 2 * spec.in_channels;
    for (i, &f) in spec.down_filters.iter().enumerate() {
        let name = format!("disc/down{}", i + 1);
        layer_params(
            &mut store,
            &name,
            Shape::new(k, k, cin, f),
            f,
            true,
            i > 0 && spec.batchnorm,
            rng,
        )?;
        cin = f;
    }
    let (e, ek) = (spec.extra_conv_filters, spec.extra_conv_kernel);
    layer_params(
        &mut store,
        "disc/conv256",
        Shape::new(ek, ek, cin, e),
        e,
        true,
        false,
        rng,
    )?;
    let d = spec.deep_conv_filters;
    layer_params(
        &mut store,
        "disc/conv512",
        Shape::new(k, k, e, d),
        d,
        false,
        spec.batchnorm,
        rng,
    )?;
    layer_params(&mut store, "disc/out", Shape::new(k, k, d, 1), 1, true, false, rng)?;
    Ok(store)
}

/// Logit map for the pair `(x, y)`; `x` occupies the leading channels.
///
/// With `trainable` false the parameters are read as constants, so a
/// backward pass routes nothing into `store`.
pub fn discriminator_forward<E: Scalar>(
    store: &ParamStore<E>,
    spec: &DiscriminatorSpec,
    tape: &mut Tape<E>,
    x: Var,
    y: Var,
    trainable: bool,
) -> Result<Var> {
    spec.validate()?;
    let (xs, ys) = (tape.value(x)?.shape(), tape.value(y)?.shape());
    if xs != ys || xs.c != spec.in_channels || xs.h != xs.w {
        return Err(Error::shape(
            "discriminator",
            format!(
                "inputs {xs} and {ys} must be equal squares with {} channels",
                spec.in_channels
            ),
        ));
    }
    spec.output_size(xs.h)?;
    let param = |tape: &mut Tape<E>, name: String| tape.param_as(store, &name, trainable);

    let mut h = tape.concat_channels(x, y)?;
    tape.mark("disc/input", h)?;
    for i in 0..spec.down_filters.len() {
        let name = format!("disc/down{}", i + 1);
        h = (|| {
            let w = param(tape, format!("{name}/w"))?;
            let b = param(tape, format!("{name}/b"))?;
            let mut v = tape.conv2d(h, w, Some(b), spec.stride, Padding::Same)?;
            if i > 0 && spec.batchnorm {
                let gamma = param(tape, format!("{name}/gamma"))?;
                let beta = param(tape, format!("{name}/beta"))?;
                v = tape.batchnorm(v, gamma, beta, DEFAULT_BN_EPSILON)?;
            }
            tape.leaky_relu(v, spec.leaky_slope)
        })()
        .map_err(|e| e.in_layer(&name))?;
        tape.mark(&name, h)?;
    }

    h = (|| {
        let w = param(tape, "disc/conv256/w".into())?;
        let b = param(tape, "disc/conv256/b".into())?;
        let v = tape.conv2d(h, w, Some(b), 1, spec.extra_conv_padding)?;
        tape.relu(v)
    })()
    .map_err(|e| e.in_layer("disc/conv256"))?;
    tape.mark("disc/conv256", h)?;

    h = tape.zero_pad(h, 1)?;
    tape.mark("disc/pad1", h)?;
    h = (|| {
        let w = param(tape, "disc/conv512/w".into())?;
        let mut v = tape.conv2d(h, w, None, 1, Padding::Valid)?;
        if spec.batchnorm {
            let gamma = param(tape, "disc/conv512/gamma".into())?;
            let beta = param(tape, "disc/conv512/beta".into())?;
            v = tape.batchnorm(v, gamma, beta, DEFAULT_BN_EPSILON)?;
        }
        tape.leaky_relu(v, spec.leaky_slope)
    })()
    .map_err(|e| e.in_layer("disc/conv512"))?;
    tape.mark("disc/conv512", h)?;

    h = tape.zero_pad(h, 1)?;
    tape.mark("disc/pad2", h)?;
    let out = (|| {
        let w = param(tape, "disc/out/w".into())?;
        let b = param(tape, "disc/out/b".into())?;
        tape.conv2d(h, w, Some(b), 1, Padding::Valid)
    })()
    .map_err(|e| e.in_layer("disc/out"))?;
    tape.mark("disc/out", out)?;
    Ok(out)
}

/// Logit map as a plain tensor.
pub fn discriminate<E: Scalar>(
    store: &ParamStore<E>,
    spec: &DiscriminatorSpec,
    x: &Tensor4<E>,
    y: &Tensor4<E>,
) -> Result<Tensor4<E>> {
    let mut tape = Tape::new();
    let (xv, yv) = (tape.input(x.clone()), tape.input(y.clone()));
    let out = discriminator_forward(store, spec, &mut tape, xv, yv, false)?;
    Ok(tape.value(out)?.clone())
}

/// Mean patch probability: the average sigmoid of a logit map.
pub fn patch_probability<E: Scalar>(logits: &Tensor4<E>) -> f64 {
    logits.data().iter().map(|v| sigmoid_f64(v.to_f64())).sum::<f64>() / logits.len().max(1) as f64
}
