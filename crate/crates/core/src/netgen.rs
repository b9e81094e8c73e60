//! U-Net generator: a stride-2 convolutional encoder down to a 1×1
//! bottleneck, a mirrored transposed-convolution decoder with skip
//! connections, and a tanh output layer.
//!
//! Parameters live in a [`ParamStore`] under `gen/enc{i}/…`, `gen/dec{i}/…`
//! and `gen/out/…` with 1-based `i`; each layer has `w` and `b`, plus `gamma`
//! and `beta` when it is batch-normalized.

use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::ndtensor::{
    Padding, ParamStore, Scalar, Shape, Tape, Tensor4, Var, DEFAULT_BN_EPSILON, DEFAULT_LEAKY_SLOPE,
};

/// Standard deviation of every initial convolution weight.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub enc_filters: Vec<usize>,
    pub dec_filters: Vec<usize>,
    /// Leading decoder layers that apply dropout while training.
    pub dropout_layers: usize,
    pub dropout_rate: f64,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            enc_filters: vec![64, 128, 256, 512, 512, 512, 512, 512],
            dec_filters: vec![512, 512, 512, 512, 256, 128, 64],
            dropout_layers: 3,
            dropout_rate: 0.5,
            in_channels: 3,
            out_channels: 3,
            kernel: 4,
            stride: 2,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl GeneratorSpec {
    /// A spec with the given encoder widths and a decoder mirroring all but
    /// the innermost of them.
    pub fn mirrored(enc_filters: Vec<usize>) -> Self {
        let dec_filters: Vec<usize> = enc_filters.iter().rev().skip(1).copied().collect();
        let base = GeneratorSpec::default();
        GeneratorSpec {
            dropout_layers: base.dropout_layers.min(dec_filters.len()),
            enc_filters,
            dec_filters,
            ..base
        }
    }

    pub fn depth(&self) -> usize {
        self.enc_filters.len()
    }

    /// The one input extent that reaches a 1×1 bottleneck: `stride^depth`.
    pub fn input_size(&self) -> usize {
        self.stride.pow(self.depth() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("generator spec: {msg}")));
        if self.enc_filters.is_empty() {
            return bad("no encoder layers".into());
        }
        if self.enc_filters.len() != self.dec_filters.len() + 1 {
            return bad(format!(
                "{} encoder layers need {} decoder layers, got {}",
                self.enc_filters.len(),
                self.enc_filters.len() - 1,
                self.dec_filters.len()
            ));
        }
        let widths = self.enc_filters.iter().chain(&self.dec_filters);
        if widths.chain([&self.in_channels, &self.out_channels]).any(|&f| f == 0) {
            return bad("filter counts must be positive".into());
        }
        if self.kernel == 0 || self.stride < 2 {
            return bad(format!("kernel {} stride {}", self.kernel, self.stride));
        }
        if self.dropout_layers > self.dec_filters.len() {
            return bad(format!(
                "{} dropout layers but only {} decoder layers",
                self.dropout_layers,
                self.dec_filters.len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {}", self.dropout_rate));
        }
        if self.leaky_slope < 0.0 {
            return bad(format!("leaky slope {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Input channels seen by decoder layer `i` (0-based) or, for
    /// `i = dec_filters.len()`, by the output layer.
    fn decoder_input(&self, i: usize) -> usize {
        if i == 0 {
            self.enc_filters[self.depth() - 1]
        } else {
            self.dec_filters[i - 1] + self.enc_filters[self.depth() - 1 - i]
        }
    }

    /// Trainable scalar count, from the layer list alone.
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let mut total = 0;
        let mut cin = self.in_channels;
        for (i, &f) in self.enc_filters.iter().enumerate() {
            total += k2 * cin * f + f + if i > 0 { 2 * f } else { 0 };
            cin = f;
        }
        for (i, &f) in self.dec_filters.iter().enumerate() {
            total += k2 * self.decoder_input(i) * f + 3 * f;
        }
        total + k2 * self.decoder_input(self.dec_filters.len()) * self.out_channels + self.out_channels
    }

    /// Recovers the layer widths from a store built by [`build_generator`],
    /// keeping the remaining fields of `base` (dropout layers capped at the
    /// recovered decoder depth).
    pub fn from_store<E: Scalar>(store: &ParamStore<E>, base: &GeneratorSpec) -> Result<GeneratorSpec> {
        let width = |name: String| -> Option<(usize, Shape)> {
            let w = store.get(&name)?;
            Some((w.shape().c, w.shape()))
        };
        let mut enc = Vec::new();
        while let Some((f, _)) = width(format!("gen/enc{}/w", enc.len() + 1)) {
            enc.push(f);
        }
        // Transposed-convolution weights are stored `[k, k, out, in]`.
        let mut dec = Vec::new();
        while let Some((_, s)) = width(format!("gen/dec{}/w", dec.len() + 1)) {
            dec.push(s.w);
        }
        let out = store
            .get("gen/out/w")
            .ok_or_else(|| Error::InvalidArgument("store has no gen/out/w".into()))?;
        let first = store
            .get("gen/enc1/w")
            .ok_or_else(|| Error::InvalidArgument("store has no gen/enc1/w".into()))?;
        let spec = GeneratorSpec {
            dropout_layers: base.dropout_layers.min(dec.len()),
            enc_filters: enc,
            dec_filters: dec,
            in_channels: first.shape().w,
            out_channels: out.shape().w,
            kernel: first.shape().n,
            ..base.clone()
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn layer_params<E: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<E>,
    prefix: &str,
    weight: Shape,
    out_channels: usize,
    bias: bool,
    batchnorm: bool,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{prefix}/w"),
        Tensor4::random_normal(weight, 0.0, INIT_STD, rng),
    )?;
    if bias {
        store.insert(format!("{prefix}/b"), Tensor4::zeros(Shape::vector(out_channels)))?;
    }
    if batchnorm {
        store.insert(
            format!("{prefix}/gamma"),
            Tensor4::filled(Shape::vector(out_channels), 1.0),
        )?;
        store.insert(format!("{prefix}/beta"), Tensor4::zeros(Shape::vector(out_channels)))?;
    }
    Ok(())
}

/// Fresh generator parameters: weights from N(0, 0.02²), biases 0,
/// batchnorm scale 1 and shift 0. The first encoder layer is not normalized.
pub fn build_generator<E: Scalar, R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Result<ParamStore<E>> {
    spec.validate()?;
    let k = spec.kernel;
    let mut store = ParamStore::new();
    let mut cin = spec.in_channels;
    for (i, &f) in spec.enc_filters.iter().enumerate() {
        let name = format!("gen/enc{}", i + 1);
        layer_params(&mut store, &name, Shape::new(k, k, cin, f), f, true, i > 0, rng)?;
        cin = f;
    }
    for (i, &f) in spec.dec_filters.iter().enumerate() {
        let name = format!("gen/dec{}", i + 1);
        layer_params(
            &mut store,
            &name,
            Shape::new(k, k, f, spec.decoder_input(i)),
            f,
            true,
            true,
            rng,
        )?;
    }
    let last = spec.decoder_input(spec.dec_filters.len());
    layer_params(
        &mut store,
        "gen/out",
        Shape::new(k, k, spec.out_channels, last),
        spec.out_channels,
        true,
        false,
        rng,
    )?;
    Ok(store)
}

fn norm<E: Scalar>(tape: &mut Tape<E>, store: &ParamStore<E>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = tape.param(store, &format!("{prefix}/gamma"))?;
    let beta = tape.param(store, &format!("{prefix}/beta"))?;
    tape.batchnorm(x, gamma, beta, DEFAULT_BN_EPSILON)
}

/// Runs the generator on `x` (`1×S×S×in_channels`, values in `[-1, 1]`),
/// returning `1×S×S×out_channels` strictly inside `(-1, 1)`.
///
/// Encoder levels are conv → batchnorm → LeakyReLU; decoder levels are
/// transposed conv → batchnorm → dropout (first `dropout_layers` levels, only
/// when `training`) → ReLU, then concatenation with the mirror encoder output.
/// Every layer output is marked on the tape's shape trace.
pub fn generator_forward<E: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<E>,
    spec: &GeneratorSpec,
    tape: &mut Tape<E>,
    x: Var,
    training: bool,
    dropout_rng: &mut R,
) -> Result<Var> {
    spec.validate()?;
    let s = tape.value(x)?.shape();
    let size = spec.input_size();
    if s.h != size || s.w != size || s.c != spec.in_channels {
        return Err(Error::shape(
            "generator",
            format!(
                "input {s} does not fit a {}-level encoder, which needs ·×{size}×{size}×{}",
                spec.depth(),
                spec.in_channels
            ),
        ));
    }
    tape.mark("gen/input", x)?;

    let mut skips = Vec::with_capacity(spec.depth());
    let mut h = x;
    for i in 0..spec.depth() {
        let name = format!("gen/enc{}", i + 1);
        h = (|| {
            let w = tape.param(store, &format!("{name}/w"))?;
            let b = tape.param(store, &format!("{name}/b"))?;
            let mut y = tape.conv2d(h, w, Some(b), spec.stride, Padding::Same)?;
            if i > 0 {
                y = norm(tape, store, &name, y)?;
            }
            tape.leaky_relu(y, spec.leaky_slope)
        })()
        .map_err(|e| e.in_layer(&name))?;
        tape.mark(&name, h)?;
        skips.push(h);
    }

    for i in 0..spec.dec_filters.len() {
        let name = format!("gen/dec{}", i + 1);
        h = (|| {
            let w = tape.param(store, &format!("{name}/w"))?;
            let b = tape.param(store, &format!("{name}/b"))?;
            let mut y = tape.conv2d_transpose(h, w, Some(b), spec.stride)?;
            y = norm(tape, store, &name, y)?;
            if i < spec.dropout_layers {
                y = tape.dropout(y, spec.dropout_rate, dropout_rng, training)?;
            }
            let y = tape.relu(y)?;
            tape.mark(&name, y)?;
            tape.concat_channels(y, skips[spec.depth() - 2 - i])
        })()
        .map_err(|e| e.in_layer(&name))?;
        tape.mark(format!("{name}+skip"), h)?;
    }

    let out = (|| {
        let w = tape.param(store, "gen/out/w")?;
        let b = tape.param(store, "gen/out/b")?;
        let y = tape.conv2d_transpose(h, w, Some(b), spec.stride)?;
        tape.tanh(y)
    })()
    .map_err(|e| e.in_layer("gen/out"))?;
    tape.mark("gen/out", out)?;
    Ok(out)
}

/// Plain inference: dropout off, output as a tensor.
pub fn generate<E: Scalar>(store: &ParamStore<E>, spec: &GeneratorSpec, x: &Tensor4<E>) -> Result<Tensor4<E>> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    // Inactive dropout draws nothing.
    let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let y = generator_forward(store, spec, &mut tape, xv, false, &mut unused)?;
    Ok(tape.value(y)?.clone())
}
