//! Built-in correctness checks: per-operation gradient checks, gradient
//! checks through reduced-depth networks, and shape traces of the full-size
//! networks at 256×256.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndtensor::gradcheck::{check_network, op_suite, CheckReport};
use crate::ndtensor::{ParamStore, Shape, Tape, Tensor4};
use crate::netdisc::{build_discriminator, discriminator_forward, DiscriminatorSpec};
use crate::netgen::{build_generator, generator_forward, GeneratorSpec};

/// Coordinates sampled per network check.
pub const NETWORK_COORDS: usize = 256;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn image(size: usize, seed: u64) -> Tensor4<f64> {
    Tensor4::random_uniform(Shape::new(1, size, size, 3), -1.0, 1.0, &mut rng(seed))
}

/// Three-level generator on 8×8 inputs.
pub fn micro_generator() -> GeneratorSpec {
    GeneratorSpec {
        dropout_layers: 1,
        ..GeneratorSpec::mirrored(vec![4, 8, 16])
    }
}

/// One-downsample discriminator; 8×8 inputs give 2×2 logits.
pub fn micro_discriminator() -> DiscriminatorSpec {
    DiscriminatorSpec {
        down_filters: vec![4],
        extra_conv_filters: 4,
        deep_conv_filters: 8,
        ..DiscriminatorSpec::default()
    }
}

/// Gradient checks of both training losses through the micro networks:
/// the discriminator's real/fake BCE, and the generator's adversarial plus
/// L1 loss through a frozen discriminator.
pub fn network_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let (gs, ds) = (micro_generator(), micro_discriminator());
    let gen: ParamStore<f64> = build_generator(&gs, &mut rng(seed))?;
    let disc: ParamStore<f64> = build_discriminator(&ds, &mut rng(seed + 1))?;
    let [x, y, g] = [2, 3, 4].map(|s| image(8, seed + s));

    let disc_loss = |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
        let (xv, yv, gv) = (tape.input(x.clone()), tape.input(y.clone()), tape.input(g.clone()));
        let real = discriminator_forward(p, &ds, tape, xv, yv, true)?;
        let fake = discriminator_forward(p, &ds, tape, xv, gv, true)?;
        let (a, b) = (tape.gan_bce(real, true)?, tape.gan_bce(fake, false)?);
        tape.add(a, b)
    };
    let gen_loss = |tape: &mut Tape<f64>, p: &ParamStore<f64>| {
        let (xv, yv) = (tape.input(x.clone()), tape.input(y.clone()));
        let out = generator_forward(p, &gs, tape, xv, true, &mut rng(seed + 5))?;
        let logits = discriminator_forward(&disc, &ds, tape, xv, out, false)?;
        let gan = tape.gan_bce(logits, true)?;
        let l1 = tape.l1(out, yv)?;
        let weighted = tape.scale(l1, 100.0)?;
        tape.add(gan, weighted)
    };
    Ok(vec![
        check_network(
            "discriminator bce (micro)",
            &disc,
            &disc_loss,
            NETWORK_COORDS,
            &mut rng(seed + 6),
        )?,
        check_network(
            "generator gan + l1 (micro)",
            &gen,
            &gen_loss,
            NETWORK_COORDS,
            &mut rng(seed + 7),
        )?,
    ])
}

/// `(label, dims)` of every traced layer.
pub type Trace = Vec<(String, [usize; 4])>;

fn trace_of(tape: &Tape) -> Trace {
    tape.trace().iter().map(|e| (e.label.clone(), e.shape.dims())).collect()
}

/// Forward trace of the default generator on one `size`×`size` input.
pub fn generator_trace(spec: &GeneratorSpec, size: usize) -> Result<Trace> {
    let store: ParamStore = build_generator(spec, &mut rng(1))?;
    let mut tape = Tape::new();
    let x = tape.input(image(size, 2).cast());
    generator_forward(&store, spec, &mut tape, x, false, &mut rng(3))?;
    Ok(trace_of(&tape))
}

/// Forward trace of a discriminator on one `size`×`size` pair.
pub fn discriminator_trace(spec: &DiscriminatorSpec, size: usize) -> Result<Trace> {
    let store: ParamStore = build_discriminator(spec, &mut rng(4))?;
    let mut tape = Tape::new();
    let x = tape.input(image(size, 5).cast());
    let y = tape.input(image(size, 6).cast());
    discriminator_forward(&store, spec, &mut tape, x, y, true)?;
    Ok(trace_of(&tape))
}

/// The generator trace implied by halving at every encoder level, doubling at
/// every decoder level, and concatenating the mirrored skip.
pub fn expected_generator_trace(spec: &GeneratorSpec, size: usize) -> Trace {
    let mut t = vec![("gen/input".to_string(), [1, size, size, spec.in_channels])];
    let depth = spec.enc_filters.len();
    for (i, &c) in spec.enc_filters.iter().enumerate() {
        let s = size >> (i + 1);
        t.push((format!("gen/enc{}", i + 1), [1, s, s, c]));
    }
    for (i, &c) in spec.dec_filters.iter().enumerate() {
        let s = size >> (depth - 1 - i);
        let skip = spec.enc_filters[depth - 2 - i];
        t.push((format!("gen/dec{}", i + 1), [1, s, s, c]));
        t.push((format!("gen/dec{}+skip", i + 1), [1, s, s, c + skip]));
    }
    t.push(("gen/out".to_string(), [1, size, size, spec.out_channels]));
    t
}

/// The 256×256 discriminator trace of the default spec, ending in 30×30 logits.
pub fn expected_discriminator_trace_256() -> Trace {
    [
        ("disc/input", 256, 6),
        ("disc/down1", 128, 64),
        ("disc/down2", 64, 128),
        ("disc/down3", 32, 256),
        ("disc/conv256", 32, 256),
        ("disc/pad1", 34, 256),
        ("disc/conv512", 31, 512),
        ("disc/pad2", 33, 512),
        ("disc/out", 30, 1),
    ]
    .map(|(l, s, c)| (l.to_string(), [1, s, s, c]))
    .to_vec()
}

fn line(out: &mut dyn Write, ok: bool, text: &str) -> Result<()> {
    writeln!(out, "[{}] {text}", if ok { "PASS" } else { "FAIL" }).map_err(|e| Error::io("<output>", e))
}

/// Runs every check, writing one line per check to `out`. Returns whether
/// all passed.
pub fn run(seed: u64, out: &mut dyn Write) -> Result<bool> {
    let mut all = true;
    for r in op_suite(seed)?.into_iter().chain(network_checks(seed)?) {
        let ok = r.passed();
        all &= ok;
        line(
            out,
            ok,
            &format!(
                "grad {}: rel error {:.2e} < {:.0e} over {} coords",
                r.name, r.max_rel_error, r.tolerance, r.coords
            ),
        )?;
    }

    let spec = GeneratorSpec::default();
    let start = Instant::now();
    let got = generator_trace(&spec, 256)?;
    let ok = got == expected_generator_trace(&spec, 256);
    all &= ok;
    let last = got.last().map(|(_, d)| *d).unwrap_or_default();
    line(
        out,
        ok,
        &format!(
            "generator trace at 256: {} layers, output {last:?} ({:.1?})",
            got.len(),
            start.elapsed()
        ),
    )?;
    let sides: Vec<String> = got
        .iter()
        .filter(|(l, _)| l != "gen/input" && !l.ends_with("+skip"))
        .map(|(_, d)| d[1].to_string())
        .collect();
    writeln!(out, "       256→{}", sides.join("→")).map_err(|e| Error::io("<output>", e))?;

    let start = Instant::now();
    let got = discriminator_trace(&DiscriminatorSpec::default(), 256)?;
    let ok = got == expected_discriminator_trace_256();
    all &= ok;
    let last = got.last().map(|(_, d)| *d).unwrap_or_default();
    line(
        out,
        ok,
        &format!("discriminator trace at 256: logits {last:?} ({:.1?})", start.elapsed()),
    )?;
    let stages: Vec<String> = got.iter().map(|(_, d)| format!("{}×{}×{}", d[1], d[2], d[3])).collect();
    writeln!(out, "       {}", stages.join(" → ")).map_err(|e| Error::io("<output>", e))?;
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_network_checks_pass() {
        for r in network_checks(40).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert!(r.coords >= 128, "{r:?}");
        }
    }

    #[test]
    fn expected_trace_matches_micro_generator() {
        let spec = micro_generator();
        assert_eq!(generator_trace(&spec, 8).unwrap(), expected_generator_trace(&spec, 8));
    }
}
