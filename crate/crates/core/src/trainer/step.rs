use crate::error::{Error, Result};
use crate::imgio::ImagePair;
use crate::ndtensor::{ParamStore, Tape, Tensor4};
use crate::netdisc::discriminator_forward;
use crate::netgen::generator_forward;
use crate::pipeline::{KeyedRng, Stream};

use super::adam::{adam_step, AdamState};
use super::config::TrainConfig;

/// Losses of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub disc_loss: f64,
    /// `gen_gan + λ · gen_l1`.
    pub gen_total: f64,
    pub gen_gan: f64,
    pub gen_l1: f64,
}

/// Generator, discriminator and both optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
}

fn finite(step: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            step,
            what: what.to_string(),
        })
    }
}

/// `G(x)` with training-mode dropout drawn from the step's dropout stream.
pub fn generate_for_step(
    models: &Models,
    cfg: &TrainConfig,
    x: &Tensor4,
    rng: &KeyedRng,
    step: u64,
) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let g = generator_forward(
        &models.generator,
        &cfg.generator,
        &mut tape,
        xv,
        true,
        &mut rng.stream(Stream::Dropout, step),
    )?;
    Ok(tape.value(g)?.clone())
}

/// Discriminator update on `BCE(D(x, y), real) + BCE(D(x, g), fake)` with
/// `g` held constant. Touches only the discriminator and its optimizer.
pub fn disc_update(models: &mut Models, cfg: &TrainConfig, pair: &ImagePair, g: &Tensor4, step: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.input(pair.input_map.clone());
    let y = tape.input(pair.target_truth.clone());
    let gv = tape.input(g.clone());
    let spec = &cfg.discriminator;
    let real = discriminator_forward(&models.discriminator, spec, &mut tape, x, y, true)?;
    let fake = discriminator_forward(&models.discriminator, spec, &mut tape, x, gv, true)?;
    let (lr, lf) = (tape.gan_bce(real, true)?, tape.gan_bce(fake, false)?);
    let loss = tape.add(lr, lf)?;
    let value = finite(step, "discriminator loss", tape.value(loss)?.data()[0] as f64)?;
    tape.backward_into(loss, &mut models.discriminator)?;
    drop(tape);
    adam_step(&mut models.discriminator, &mut models.adam_d, &cfg.adam())?;
    Ok(value)
}

/// Generator update on `BCE(D(x, G(x)), real) + λ · L1(y, G(x))` through a
/// frozen discriminator, recomputing `G(x)` under the step's dropout stream.
/// Touches only the generator and its optimizer. Returns `(total, gan, l1)`.
pub fn gen_update(
    models: &mut Models,
    cfg: &TrainConfig,
    pair: &ImagePair,
    rng: &KeyedRng,
    step: u64,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let x = tape.input(pair.input_map.clone());
    let y = tape.input(pair.target_truth.clone());
    let g = generator_forward(
        &models.generator,
        &cfg.generator,
        &mut tape,
        x,
        true,
        &mut rng.stream(Stream::Dropout, step),
    )?;
    let logits = discriminator_forward(&models.discriminator, &cfg.discriminator, &mut tape, x, g, false)?;
    let gan = tape.gan_bce(logits, true)?;
    let l1 = tape.l1(g, y)?;
    let weighted = tape.scale(l1, cfg.lambda_l1)?;
    let total = tape.add(gan, weighted)?;
    let read = |v| -> Result<f64> { Ok(tape.value(v)?.data()[0] as f64) };
    let (t, a, b) = (read(total)?, read(gan)?, read(l1)?);
    finite(step, "generator loss", t)?;
    tape.backward_into(total, &mut models.generator)?;
    drop(tape);
    adam_step(&mut models.generator, &mut models.adam_g, &cfg.adam())?;
    Ok((t, a, b))
}

/// One alternating step on a preprocessed pair: `g = G(x)`, a discriminator
/// update, then a generator update against the updated discriminator.
pub fn train_step(
    models: &mut Models,
    pair: &ImagePair,
    cfg: &TrainConfig,
    rng: &KeyedRng,
    step: u64,
) -> Result<StepReport> {
    let g = generate_for_step(models, cfg, &pair.input_map, rng, step)?;
    let disc_loss = disc_update(models, cfg, pair, &g, step)?;
    let (gen_total, gen_gan, gen_l1) = gen_update(models, cfg, pair, rng, step)?;
    Ok(StepReport {
        disc_loss,
        gen_total,
        gen_gan,
        gen_l1,
    })
}
