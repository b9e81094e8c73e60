//! Flat `key = value` run configuration.
//!
//! Files hold one `key = value` per line; `#` starts a comment. Command-line
//! `--key value` flags override file values, and dashes in flag names are
//! read as underscores. Every key has a default, so a resolved config can be
//! written back out in full as a run manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imgio::PairOrder;
use crate::ndtensor::Padding;
use crate::pipeline::{ResizeMethod, SynthSpec, SynthTask};
use crate::trainer::{desk_encoder, TrainConfig};

/// Where a default value comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Stated in the published method description.
    Published,
    /// Adopted from common practice for this model family.
    Convention,
    /// Chosen for this implementation.
    Local,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Published => "published",
            Provenance::Convention => "convention",
            Provenance::Local => "local",
        })
    }
}

pub struct KeyInfo {
    pub name: &'static str,
    pub help: &'static str,
    pub provenance: Provenance,
}

const fn key(name: &'static str, provenance: Provenance, help: &'static str) -> KeyInfo {
    KeyInfo { name, help, provenance }
}

use Provenance::{Convention, Local, Published};

pub const KEYS: &[KeyInfo] = &[
    key(
        "preset",
        Local,
        "network and jitter scale: `full` (256 tiles) or `desk` (reduced depth for crop_to)",
    ),
    key("lr", Published, "Adam learning rate"),
    key("beta1", Published, "Adam first-moment decay"),
    key("beta2", Convention, "Adam second-moment decay"),
    key("epsilon", Convention, "Adam denominator offset"),
    key("lambda_l1", Convention, "weight of the L1 term in the generator loss"),
    key("steps", Local, "training steps"),
    key("sample_every", Local, "steps between sample triptychs (0 = never)"),
    key(
        "checkpoint_every",
        Local,
        "steps between checkpoints (0 = first and last only)",
    ),
    key(
        "log_every",
        Local,
        "steps between progress lines on stderr (0 = silent)",
    ),
    key("seed", Local, "seed for every random stream, and for synthetic tiles"),
    key("batch_size", Local, "pairs per step (only 1 is supported)"),
    key("shuffle", Local, "shuffle the training order each epoch"),
    key(
        "source",
        Local,
        "training data: `dir` (data_dir) or `synth` (task/count/size/seed, in memory)",
    ),
    key(
        "data_dir",
        Local,
        "dataset root holding <split>/*.png|jpg combined images",
    ),
    key("train_split", Local, "subdirectory of data_dir used for training"),
    key(
        "val_split",
        Local,
        "subdirectory of data_dir used for samples (empty = train split)",
    ),
    key(
        "pair_order",
        Local,
        "which half of a combined image is the map: map-left or map-right",
    ),
    key("task", Local, "synthetic task: invert, recolor or roads"),
    key("count", Local, "synthetic tile count"),
    key("size", Local, "synthetic tile side in pixels (at least 16)"),
    key("resize_to", Published, "jitter resize target"),
    key(
        "crop_to",
        Published,
        "jitter crop size, equal to the network input size",
    ),
    key("mirror_prob", Convention, "probability of a horizontal mirror"),
    key("resize_method", Convention, "jitter resampling: nearest or bilinear"),
    key("enc_filters", Published, "generator encoder widths, comma separated"),
    key("dec_filters", Published, "generator decoder widths, comma separated"),
    key("dropout_layers", Convention, "leading decoder layers with dropout"),
    key("dropout_rate", Convention, "decoder dropout rate"),
    key("leaky_slope", Published, "LeakyReLU negative slope"),
    key(
        "disc_down_filters",
        Published,
        "discriminator downsample widths, comma separated",
    ),
    key(
        "disc_extra_filters",
        Published,
        "filters of the 3×3 convolution after the downsamples",
    ),
    key(
        "disc_extra_padding",
        Local,
        "padding of that convolution: same (30×30 patches) or valid (28×28)",
    ),
    key(
        "disc_deep_filters",
        Published,
        "filters of the bias-free 4×4 convolution",
    ),
    key(
        "disc_batchnorm",
        Published,
        "batch normalization inside the discriminator",
    ),
];

pub fn key_names() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|k| k.name)
}

fn is_key(name: &str) -> bool {
    key_names().any(|k| k == name)
}

/// `Err(UnknownKey)` naming the closest valid key.
pub fn unknown_key(name: &str) -> Error {
    let suggestion = key_names()
        .map(|k| (strsim::jaro_winkler(name, k), k))
        .filter(|(score, _)| *score > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.to_string());
    Error::UnknownKey {
        key: name.to_string(),
        suggestion,
        valid: key_names().collect::<Vec<_>>().join(", "),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Dir,
    Synth,
}

/// A fully resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub preset: Preset,
    pub train: TrainConfig,
    pub log_every: u64,
    pub source: Source,
    pub data_dir: PathBuf,
    pub train_split: String,
    pub val_split: String,
    pub pair_order: PairOrder,
    pub task: SynthTask,
    pub count: usize,
    pub size: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings::for_preset(Preset::Full, None)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| Error::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn invalid(key: &str, value: &str, reason: &str) -> Error {
    Error::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

impl Settings {
    /// Defaults of a preset; `desk` sizes its networks for `crop` (default 32).
    pub fn for_preset(preset: Preset, crop: Option<usize>) -> Settings {
        let train = match preset {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(crop.unwrap_or(32)),
        };
        Settings {
            preset,
            train,
            log_every: 50,
            source: Source::Dir,
            data_dir: PathBuf::from("data"),
            train_split: "train".into(),
            val_split: "val".into(),
            pair_order: PairOrder::MapLeft,
            task: SynthTask::Invert,
            count: 100,
            size: 32,
        }
    }

    /// Resolves `pairs` (file entries first, then overrides) over preset defaults.
    pub fn resolve(pairs: &[(String, String)]) -> Result<Settings> {
        for (k, _) in pairs {
            if !is_key(k) {
                return Err(unknown_key(k));
            }
        }
        let last = |name: &str| pairs.iter().rev().find(|(k, _)| k == name).map(|(_, v)| v.as_str());
        let preset = match last("preset") {
            None | Some("full") => Preset::Full,
            Some("desk") => Preset::Desk,
            Some(other) => return Err(invalid("preset", other, "expected full or desk")),
        };
        let crop = last("crop_to").map(|v| parse("crop_to", v)).transpose()?;
        let mut s = Settings::for_preset(preset, crop);
        if preset == Preset::Desk && last("enc_filters").is_none() {
            // Keep the desk generator matched to an overridden crop size.
            let size = s.train.jitter.crop_to;
            s.train.generator = crate::netgen::GeneratorSpec::mirrored(desk_encoder(size));
        }
        for (k, v) in pairs {
            s.set(k, v)?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let v = value.trim();
        match key {
            "preset" => {}
            "lr" => t.lr = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "epsilon" => t.epsilon = parse(key, v)?,
            "lambda_l1" => t.lambda_l1 = parse(key, v)?,
            "steps" => t.steps = parse(key, v)?,
            "sample_every" => t.sample_every = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "shuffle" => t.shuffle = parse(key, v)?,
            "source" => {
                self.source = match v {
                    "dir" => Source::Dir,
                    "synth" => Source::Synth,
                    _ => return Err(invalid(key, v, "expected dir or synth")),
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_split" => self.train_split = v.to_string(),
            "val_split" => self.val_split = v.to_string(),
            "pair_order" => self.pair_order = parse(key, v)?,
            "task" => self.task = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "size" => self.size = parse(key, v)?,
            "resize_to" => t.jitter.resize_to = parse(key, v)?,
            "crop_to" => t.jitter.crop_to = parse(key, v)?,
            "mirror_prob" => t.jitter.mirror_prob = parse(key, v)?,
            "resize_method" => t.jitter.method = parse::<ResizeMethod>(key, v)?,
            "enc_filters" => t.generator.enc_filters = parse_list(key, v)?,
            "dec_filters" => t.generator.dec_filters = parse_list(key, v)?,
            "dropout_layers" => t.generator.dropout_layers = parse(key, v)?,
            "dropout_rate" => t.generator.dropout_rate = parse(key, v)?,
            "leaky_slope" => {
                let slope = parse(key, v)?;
                t.generator.leaky_slope = slope;
                t.discriminator.leaky_slope = slope;
            }
            "disc_down_filters" => t.discriminator.down_filters = parse_list(key, v)?,
            "disc_extra_filters" => t.discriminator.extra_conv_filters = parse(key, v)?,
            "disc_extra_padding" => {
                t.discriminator.extra_conv_padding = match v {
                    "same" => Padding::Same,
                    "valid" => Padding::Valid,
                    _ => return Err(invalid(key, v, "expected same or valid")),
                }
            }
            "disc_deep_filters" => t.discriminator.deep_conv_filters = parse(key, v)?,
            "disc_batchnorm" => t.discriminator.batchnorm = parse(key, v)?,
            other => return Err(unknown_key(other)),
        }
        Ok(())
    }

    /// Current value of `key`, in the form [`set`](Self::set) accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "preset" => match self.preset {
                Preset::Full => "full".into(),
                Preset::Desk => "desk".into(),
            },
            "lr" => t.lr.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "epsilon" => t.epsilon.to_string(),
            "lambda_l1" => t.lambda_l1.to_string(),
            "steps" => t.steps.to_string(),
            "sample_every" => t.sample_every.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "log_every" => self.log_every.to_string(),
            "seed" => t.seed.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "shuffle" => t.shuffle.to_string(),
            "source" => match self.source {
                Source::Dir => "dir".into(),
                Source::Synth => "synth".into(),
            },
            "data_dir" => self.data_dir.display().to_string(),
            "train_split" => self.train_split.clone(),
            "val_split" => self.val_split.clone(),
            "pair_order" => self.pair_order.to_string(),
            "task" => self.task.to_string(),
            "count" => self.count.to_string(),
            "size" => self.size.to_string(),
            "resize_to" => t.jitter.resize_to.to_string(),
            "crop_to" => t.jitter.crop_to.to_string(),
            "mirror_prob" => t.jitter.mirror_prob.to_string(),
            "resize_method" => t.jitter.method.to_string(),
            "enc_filters" => list(&t.generator.enc_filters),
            "dec_filters" => list(&t.generator.dec_filters),
            "dropout_layers" => t.generator.dropout_layers.to_string(),
            "dropout_rate" => t.generator.dropout_rate.to_string(),
            "leaky_slope" => t.generator.leaky_slope.to_string(),
            "disc_down_filters" => list(&t.discriminator.down_filters),
            "disc_extra_filters" => t.discriminator.extra_conv_filters.to_string(),
            "disc_extra_padding" => match t.discriminator.extra_conv_padding {
                Padding::Same => "same".into(),
                Padding::Valid => "valid".into(),
            },
            "disc_deep_filters" => t.discriminator.deep_conv_filters.to_string(),
            "disc_batchnorm" => t.discriminator.batchnorm.to_string(),
            _ => return None,
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            task: self.task,
            count: self.count,
            size: self.size,
            seed: self.train.seed,
        }
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn render(&self) -> String {
        key_names()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every key renders")))
            .collect()
    }
}

/// `key = value` lines of a config file; `#` comments and blank lines are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("config line {}: expected `key = value`, got `{line}`", n + 1))
        })?;
        pairs.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_render_and_resolve_back() {
        let s = Settings::default();
        assert_eq!(s.get("lr").unwrap(), "0.0002");
        assert_eq!(s.get("beta1").unwrap(), "0.5");
        assert_eq!(s.get("resize_to").unwrap(), "286");
        let again = Settings::resolve(&parse_config(&s.render()).unwrap()).unwrap();
        assert_eq!(again, s);
        assert_eq!(KEYS.len(), key_names().filter(|k| s.get(k).is_some()).count());
    }

    #[test]
    fn unknown_key_suggests_nearest() {
        let err = Settings::resolve(&pairs(&[("learning_rte", "1")])).unwrap_err();
        match &err {
            Error::UnknownKey { suggestion, valid, .. } => {
                assert!(valid.contains("lambda_l1"));
                assert!(suggestion.is_some());
            }
            other => panic!("{other:?}"),
        }
        let err = Settings::resolve(&pairs(&[("lamda_l1", "1")])).unwrap_err().to_string();
        assert!(err.contains("did you mean `lambda_l1`"), "{err}");
    }

    #[test]
    fn overrides_apply_in_order_and_desk_follows_crop() {
        let s = Settings::resolve(&pairs(&[
            ("steps", "5"),
            ("preset", "desk"),
            ("crop_to", "16"),
            ("steps", "7"),
        ]))
        .unwrap();
        assert_eq!(s.train.steps, 7);
        assert_eq!(s.train.generator.input_size(), 16);
        assert_eq!(s.train.jitter.resize_to, 18);
        s.train.validate().unwrap();
        assert!(Settings::resolve(&pairs(&[("steps", "many")])).is_err());
    }

    #[test]
    fn config_file_syntax() {
        let p = parse_config("# run\nlr = 0.001  # faster\n\nlambda-l1=50\n").unwrap();
        assert_eq!(p, pairs(&[("lr", "0.001"), ("lambda_l1", "50")]));
        assert!(parse_config("lr 0.1").is_err());
    }
}
