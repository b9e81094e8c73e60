use std::fs;

use pix2pix::pipeline::{DataSource, Dataset, SynthSpec, SynthTask};
use pix2pix::trainer::*;

fn synth(task: SynthTask, count: usize, size: usize) -> Dataset {
    Dataset::open(DataSource::Synth(SynthSpec {
        task,
        count,
        size,
        seed: 1,
    }))
    .unwrap()
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::desk(16)
    };
    let summary = fit(
        &cfg,
        &synth(SynthTask::Invert, 2, 16),
        dir.path(),
        FitOptions::default(),
    )
    .unwrap();
    assert_eq!(
        summary.final_checkpoint,
        dir.path().join("checkpoints").join(checkpoint_name(0))
    );
    assert!(summary.last_report.is_none());
    assert_eq!(fs::read_dir(dir.path().join("checkpoints")).unwrap().count(), 1);
    assert_eq!(
        fs::read_to_string(dir.path().join("loss.csv")).unwrap().trim(),
        LOSS_LOG_HEADER
    );
    let ckpt = Checkpoint::load(&summary.final_checkpoint).unwrap();
    assert_eq!(
        ckpt.models,
        init_models(&cfg, &pix2pix::pipeline::KeyedRng::new(cfg.seed)).unwrap()
    );
}

#[test]
fn samples_and_checkpoints_follow_their_periods() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 30,
        sample_every: 10,
        checkpoint_every: 20,
        ..TrainConfig::desk(16)
    };
    let mut seen = Vec::new();
    let mut record = |step: u64, _: &StepReport| seen.push(step);
    let summary = fit(
        &cfg,
        &synth(SynthTask::Recolor, 5, 16),
        dir.path(),
        FitOptions {
            on_step: Some(&mut record),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(seen, (1..=30).collect::<Vec<_>>());
    assert_eq!(summary.samples_written, 3);
    let names = |sub: &str| {
        let mut v: Vec<String> = fs::read_dir(dir.path().join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names("samples"), [10, 20, 30].map(sample_name));
    assert_eq!(names("checkpoints"), [0, 20, 30].map(checkpoint_name));
    let sample = pix2pix::imgio::load_rgb(dir.path().join("samples").join(sample_name(10))).unwrap();
    assert_eq!(sample.shape().dims(), [1, 16, 48, 3]);
}

#[test]
fn losses_stay_finite_for_two_hundred_steps_on_every_task() {
    for task in [SynthTask::Invert, SynthTask::Recolor, SynthTask::Roads] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 200,
            sample_every: 0,
            checkpoint_every: 0,
            ..TrainConfig::desk(32)
        };
        fit(&cfg, &synth(task, 20, 32), dir.path(), FitOptions::default()).unwrap();
        let log = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        let rows: Vec<&str> = log.lines().skip(1).collect();
        assert_eq!(rows.len(), 200);
        for row in rows {
            assert!(
                row.split(',').all(|v| v.parse::<f64>().unwrap().is_finite()),
                "{task}: {row}"
            );
        }
    }
}

#[test]
fn resume_rejects_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth(SynthTask::Invert, 2, 16);
    let cfg = TrainConfig {
        steps: 2,
        ..TrainConfig::desk(16)
    };
    let summary = fit(&cfg, &ds, &dir.path().join("a"), FitOptions::default()).unwrap();
    let ckpt = Checkpoint::load(&summary.final_checkpoint).unwrap();

    let other_seed = TrainConfig {
        seed: cfg.seed + 1,
        steps: 4,
        ..cfg.clone()
    };
    let err = fit(
        &other_seed,
        &ds,
        &dir.path().join("b"),
        FitOptions {
            resume: Some(ckpt.clone()),
            ..Default::default()
        },
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("seed"), "{err}");

    let mut wider = TrainConfig {
        steps: 4,
        ..cfg.clone()
    };
    wider.discriminator.deep_conv_filters *= 2;
    let err = fit(
        &wider,
        &ds,
        &dir.path().join("c"),
        FitOptions {
            resume: Some(ckpt.clone()),
            ..Default::default()
        },
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("do not match"), "{err}");

    let shorter = TrainConfig { steps: 1, ..cfg };
    assert!(fit(
        &shorter,
        &ds,
        &dir.path().join("d"),
        FitOptions {
            resume: Some(ckpt),
            ..Default::default()
        }
    )
    .is_err());
}
