use crate::error::{Error, Result};
use crate::netdisc::DiscriminatorSpec;
use crate::netgen::GeneratorSpec;
use crate::pipeline::JitterSpec;

use super::adam::AdamConfig;

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the L1 reconstruction term in the generator objective.
    pub lambda_l1: f64,
    pub steps: u64,
    /// Write a sample triptych every this many steps; 0 disables.
    pub sample_every: u64,
    /// Write a checkpoint every this many steps; 0 keeps only the first and last.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub shuffle: bool,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub jitter: JitterSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            lambda_l1: 100.0,
            steps: 1000,
            sample_every: 100,
            checkpoint_every: 500,
            seed: 0,
            batch_size: 1,
            shuffle: true,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            jitter: JitterSpec::default(),
        }
    }
}

/// Encoder widths for a desk-scale generator on `size × size` tiles:
/// doubling from 32 and capped at 128, one level per halving.
pub fn desk_encoder(size: usize) -> Vec<usize> {
    let depth = size.trailing_zeros() as usize;
    (0..depth).map(|i| (32 << i).min(128)).collect()
}

impl TrainConfig {
    /// Reduced networks and proportionally scaled jitter for small
    /// power-of-two tiles (16 and up).
    pub fn desk(size: usize) -> Self {
        TrainConfig {
            generator: GeneratorSpec::mirrored(desk_encoder(size)),
            discriminator: DiscriminatorSpec {
                down_filters: vec![32, 64],
                extra_conv_filters: 64,
                deep_conv_filters: 128,
                ..DiscriminatorSpec::default()
            },
            jitter: JitterSpec::scaled(size),
            ..TrainConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    /// Side of the square tiles the networks consume.
    pub fn image_size(&self) -> usize {
        self.jitter.crop_to
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return bad(format!("lambda_l1 must be non-negative, got {}", self.lambda_l1));
        }
        if self.batch_size != 1 {
            return bad(format!("only batch_size 1 is supported, got {}", self.batch_size));
        }
        self.jitter.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        let size = self.image_size();
        if self.generator.input_size() != size {
            return bad(format!(
                "crop size {size} does not match the generator, which needs {} for {} encoder levels",
                self.generator.input_size(),
                self.generator.depth()
            ));
        }
        self.discriminator.output_size(size)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_desk_scales() {
        TrainConfig::default().validate().unwrap();
        for size in [16, 32, 64] {
            TrainConfig::desk(size).validate().unwrap();
        }
        assert_eq!(desk_encoder(32), vec![32, 64, 128, 128, 128]);
        let c = TrainConfig::desk(32);
        assert_eq!((c.jitter.resize_to, c.jitter.crop_to), (36, 32));
    }

    #[test]
    fn rejects_bad_values() {
        let base = TrainConfig::default();
        for bad in [
            TrainConfig {
                lr: 0.0,
                ..base.clone()
            },
            TrainConfig {
                beta1: 1.0,
                ..base.clone()
            },
            TrainConfig {
                lambda_l1: -1.0,
                ..base.clone()
            },
            TrainConfig {
                batch_size: 4,
                ..base.clone()
            },
            TrainConfig {
                jitter: JitterSpec::scaled(32),
                ..base.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
