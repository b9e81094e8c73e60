use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::imgio::{encode_png, make_triptych, ImagePair};
use crate::ndtensor::ParamStore;
use crate::netdisc::build_discriminator;
use crate::netgen::{build_generator, generate};
use crate::pipeline::{dataset_iter, Dataset, KeyedRng, Preprocess, Stream};

use super::adam::AdamState;
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::step::{train_step, Models, StepReport};

pub const LOSS_LOG_HEADER: &str = "step,disc_loss,gen_total,gen_gan,gen_l1,wall_ms";

/// Fresh networks from the config's specs and the seed's init streams, with
/// zeroed optimizer states.
pub fn init_models(cfg: &TrainConfig, rng: &KeyedRng) -> Result<Models> {
    let generator: ParamStore = build_generator(&cfg.generator, &mut rng.stream(Stream::GeneratorInit, 0))?;
    let discriminator: ParamStore =
        build_discriminator(&cfg.discriminator, &mut rng.stream(Stream::DiscriminatorInit, 0))?;
    Ok(Models {
        adam_g: AdamState::new(&generator),
        adam_d: AdamState::new(&discriminator),
        generator,
        discriminator,
    })
}

fn same_layout(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|(p, q)| p.name() == q.name() && p.value().shape() == q.value().shape())
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

pub fn sample_name(step: u64) -> String {
    format!("step_{step:06}.png")
}

/// Called after every step with the step number and its report.
pub type StepHook<'a> = &'a mut dyn FnMut(u64, &StepReport);

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Source of the fixed sample pair (its first entry); defaults to the
    /// training set.
    pub validation: Option<&'a Dataset>,
    pub resume: Option<Checkpoint>,
    pub on_step: Option<StepHook<'a>>,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    pub last_report: Option<StepReport>,
    pub samples_written: usize,
    pub models: Models,
}

struct Run<'a> {
    out_dir: &'a Path,
    log: BufWriter<File>,
    log_path: PathBuf,
}

impl Run<'_> {
    fn checkpoint(&self, step: u64, seed: u64, models: &Models) -> Result<PathBuf> {
        let path = self.out_dir.join("checkpoints").join(checkpoint_name(step));
        Checkpoint {
            step,
            seed,
            models: models.clone(),
        }
        .save(&path)?;
        Ok(path)
    }

    fn row(&mut self, step: u64, r: &StepReport, wall_ms: f64) -> Result<()> {
        writeln!(
            self.log,
            "{step},{},{},{},{},{wall_ms:.1}",
            r.disc_loss, r.gen_total, r.gen_gan, r.gen_l1
        )
        .map_err(|e| Error::io(&self.log_path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))
    }
}

/// Trains for `cfg.steps` steps, writing under `out_dir`:
///
/// * `loss.csv`: one row per step, header [`LOSS_LOG_HEADER`];
/// * `checkpoints/step_NNNNNN.ckpt`: at the starting step, every
///   `checkpoint_every` steps, and at the last step;
/// * `samples/step_NNNNNN.png`: input | truth | generated for a fixed pair,
///   every `sample_every` steps.
///
/// Step `s` (1-based) trains on stream position `s − 1`, so a run resumed
/// from the checkpoint of step `k` replays steps `k+1..` exactly as an
/// uninterrupted run would; its log holds only those rows.
pub fn fit(cfg: &TrainConfig, dataset: &Dataset, out_dir: &Path, opts: FitOptions<'_>) -> Result<FitSummary> {
    cfg.validate()?;
    let FitOptions {
        validation,
        resume,
        mut on_step,
    } = opts;
    let (start, mut models) = match resume {
        Some(ckpt) => {
            if ckpt.seed != cfg.seed {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint was trained with seed {}, config says {}",
                    ckpt.seed, cfg.seed
                )));
            }
            let fresh = init_models(cfg, &KeyedRng::new(cfg.seed))?;
            if !same_layout(&fresh.generator, &ckpt.models.generator)
                || !same_layout(&fresh.discriminator, &ckpt.models.discriminator)
            {
                return Err(Error::InvalidArgument(
                    "checkpoint networks do not match the configured specs".into(),
                ));
            }
            if ckpt.step > cfg.steps {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint is at step {}, beyond the configured {} steps",
                    ckpt.step, cfg.steps
                )));
            }
            (ckpt.step, ckpt.models)
        }
        None => (0, init_models(cfg, &KeyedRng::new(cfg.seed))?),
    };
    let rng = KeyedRng::new(cfg.seed);

    for sub in ["checkpoints", "samples"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let log_path = out_dir.join("loss.csv");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut run = Run {
        out_dir,
        log: BufWriter::new(file),
        log_path,
    };
    writeln!(run.log, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&run.log_path, e))?;

    let sample_pre = Preprocess::eval(cfg.jitter);
    let sample_pair: ImagePair = validation.unwrap_or(dataset).sample_at(0, &sample_pre, &rng, 0)?;
    let train_pre = Preprocess::train(cfg.jitter);
    let mut order = dataset_iter(dataset, train_pre, rng, cfg.shuffle);

    let mut last_checkpoint = run.checkpoint(start, cfg.seed, &models)?;
    let mut last_report = None;
    let mut samples_written = 0;
    let result = (|| -> Result<()> {
        for step in start + 1..=cfg.steps {
            let began = Instant::now();
            let position = step - 1;
            let index = order.index_at(position);
            let pair = dataset.sample_at(index, &train_pre, &rng, position)?;
            let report = train_step(&mut models, &pair, cfg, &rng, step)?;
            run.row(step, &report, began.elapsed().as_secs_f64() * 1e3)?;
            if let Some(f) = on_step.as_mut() {
                f(step, &report);
            }
            last_report = Some(report);
            if cfg.sample_every > 0 && step % cfg.sample_every == 0 {
                let g = generate(&models.generator, &cfg.generator, &sample_pair.input_map)?;
                let panel = make_triptych(&sample_pair.input_map, &sample_pair.target_truth, &g)?;
                encode_png(&panel, out_dir.join("samples").join(sample_name(step)))?;
                samples_written += 1;
            }
            if step == cfg.steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
                run.flush()?;
                last_checkpoint = run.checkpoint(step, cfg.seed, &models)?;
            }
        }
        Ok(())
    })();
    let flushed = run.flush();
    result?;
    flushed?;
    Ok(FitSummary {
        final_step: cfg.steps,
        final_checkpoint: last_checkpoint,
        last_report,
        samples_written,
        models,
    })
}
