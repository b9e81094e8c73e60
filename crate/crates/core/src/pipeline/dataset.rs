//! Paired-image datasets and their deterministic epoch iteration.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::augment::{jitter_pair, normalize_pair, resize, JitterSpec};
use super::rng::{KeyedRng, Stream};
use super::synth::{synth_tile, SynthSpec};
use crate::error::{Error, Result};
use crate::imgio::{load_combined, ImagePair, PairOrder};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Where pairs come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Combined side-by-side images under `root/split/`.
    Directory {
        root: PathBuf,
        split: String,
        order: PairOrder,
    },
    Synth(SynthSpec),
    /// Pairs already in memory, pixel values in `[0, 255]`.
    Pairs(Vec<ImagePair>),
}

#[derive(Clone, Debug)]
enum Entries {
    Files { paths: Vec<PathBuf>, order: PairOrder },
    Synth(SynthSpec),
    Pairs(Vec<ImagePair>),
}

/// An indexable, non-empty collection of raw pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    entries: Entries,
}

/// Sorted image files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in read {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

impl Dataset {
    pub fn open(source: DataSource) -> Result<Dataset> {
        let entries = match source {
            DataSource::Directory { root, split, order } => {
                let dir = root.join(&split);
                let paths = list_images(&dir)?;
                if paths.is_empty() {
                    return Err(Error::EmptyDataset(dir.display().to_string()));
                }
                Entries::Files { paths, order }
            }
            DataSource::Synth(spec) => {
                if spec.count == 0 {
                    return Err(Error::EmptyDataset(format!("synthetic {} tiles", spec.task)));
                }
                Entries::Synth(spec)
            }
            DataSource::Pairs(pairs) => {
                if pairs.is_empty() {
                    return Err(Error::EmptyDataset("in-memory pairs".into()));
                }
                Entries::Pairs(pairs)
            }
        };
        Ok(Dataset { entries })
    }

    pub fn len(&self) -> usize {
        match &self.entries {
            Entries::Files { paths, .. } => paths.len(),
            Entries::Synth(spec) => spec.count,
            Entries::Pairs(p) => p.len(),
        }
    }

    /// Always false: opening rejects empty sources.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entry `index` as loaded, pixels in `[0, 255]`, no preprocessing.
    pub fn raw(&self, index: usize) -> Result<ImagePair> {
        if index >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "index {index} out of range for {} entries",
                self.len()
            )));
        }
        match &self.entries {
            Entries::Files { paths, order } => load_combined(&paths[index], *order),
            Entries::Synth(spec) => synth_tile(spec.task, spec.size, &KeyedRng::new(spec.seed), index as u64),
            Entries::Pairs(p) => Ok(p[index].clone()),
        }
    }

    /// SHA-256 over entry names and contents, as lowercase hex.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        match &self.entries {
            Entries::Files { paths, order } => {
                h.update(format!("files:{order}\n"));
                for p in paths {
                    let name = p
                        .file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                    h.update((name.len() as u64).to_le_bytes());
                    h.update(name.as_bytes());
                    h.update((bytes.len() as u64).to_le_bytes());
                    h.update(&bytes);
                }
            }
            Entries::Synth(s) => h.update(format!("synth:{}:{}:{}:{}\n", s.task, s.count, s.size, s.seed)),
            Entries::Pairs(pairs) => {
                h.update("pairs\n");
                for p in pairs {
                    h.update(p.source_id.as_bytes());
                    for t in [&p.input_map, &p.target_truth] {
                        for d in t.dims() {
                            h.update((d as u64).to_le_bytes());
                        }
                        for v in t.data() {
                            h.update(v.to_le_bytes());
                        }
                    }
                }
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Entry `index` preprocessed and normalized to `[-1, 1]`.
    ///
    /// With augmentation the crop and mirror draws are keyed by `position`, the
    /// sample's place in the overall stream, so any sample can be rebuilt alone.
    pub fn sample_at(&self, index: usize, pre: &Preprocess, rng: &KeyedRng, position: u64) -> Result<ImagePair> {
        let raw = self.raw(index)?;
        let prepared = if pre.augment {
            jitter_pair(
                &raw,
                &pre.jitter,
                &mut rng.stream(Stream::Crop, position),
                &mut rng.stream(Stream::Mirror, position),
            )?
        } else {
            let size = pre.jitter.crop_to;
            raw.map_both(|t| resize(t, size, size, pre.jitter.method))?
        };
        Ok(normalize_pair(&prepared))
    }
}

/// Preprocessing applied to each emitted pair. With `augment` off, pairs are
/// resized straight to `jitter.crop_to` with no random draws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Preprocess {
    pub jitter: JitterSpec,
    pub augment: bool,
}

impl Preprocess {
    pub fn train(jitter: JitterSpec) -> Self {
        Preprocess { jitter, augment: true }
    }

    pub fn eval(jitter: JitterSpec) -> Self {
        Preprocess { jitter, augment: false }
    }
}

/// Entry order for `epoch`: the identity, or a permutation keyed by the epoch.
pub fn epoch_order(len: usize, epoch: u64, rng: &KeyedRng, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut rng.stream(Stream::Shuffle, epoch));
    }
    order
}

/// Endless stream of preprocessed pairs, one full pass per epoch.
pub struct DatasetIter<'a> {
    dataset: &'a Dataset,
    pre: Preprocess,
    rng: KeyedRng,
    shuffle: bool,
    position: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

pub fn dataset_iter(dataset: &Dataset, pre: Preprocess, rng: KeyedRng, shuffle: bool) -> DatasetIter<'_> {
    DatasetIter {
        dataset,
        pre,
        rng,
        shuffle,
        position: 0,
        epoch: None,
    }
}

impl DatasetIter<'_> {
    /// Skips directly to stream position `position` without loading anything.
    pub fn starting_at(mut self, position: u64) -> Self {
        self.position = position;
        self
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Dataset index emitted at stream position `position`.
    pub fn index_at(&mut self, position: u64) -> usize {
        let len = self.dataset.len() as u64;
        let epoch = position / len;
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            self.epoch = Some((epoch, epoch_order(len as usize, epoch, &self.rng, self.shuffle)));
        }
        let (_, order) = self.epoch.as_ref().expect("epoch order just filled");
        order[(position % len) as usize]
    }

    /// `epochs` full passes from the current position.
    pub fn epochs(self, epochs: usize) -> std::iter::Take<Self> {
        let n = epochs * self.dataset.len();
        self.take(n)
    }
}

impl Iterator for DatasetIter<'_> {
    type Item = Result<ImagePair>;

    fn next(&mut self) -> Option<Self::Item> {
        let position = self.position;
        let index = self.index_at(position);
        self.position += 1;
        Some(self.dataset.sample_at(index, &self.pre, &self.rng, position))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::{Shape, Tensor4};

    fn numbered(n: usize, size: usize) -> Vec<ImagePair> {
        (0..n)
            .map(|i| {
                let t = Tensor4::filled(Shape::new(1, size, size, 3), (i * 10) as f64);
                ImagePair::new(t.clone(), t, format!("p{i}")).unwrap()
            })
            .collect()
    }

    #[test]
    fn epoch_accounting() {
        let ds = Dataset::open(DataSource::Pairs(numbered(10, 8))).unwrap();
        let pre = Preprocess::train(JitterSpec {
            resize_to: 10,
            crop_to: 8,
            ..JitterSpec::default()
        });
        let ids: Vec<String> = dataset_iter(&ds, pre, KeyedRng::new(3), true)
            .epochs(2)
            .map(|p| p.unwrap().source_id)
            .collect();
        assert_eq!(ids.len(), 20);
        for i in 0..10 {
            assert_eq!(ids.iter().filter(|s| **s == format!("p{i}")).count(), 2);
        }
        let mut first: Vec<_> = ids[..10].to_vec();
        first.sort();
        first.dedup();
        assert_eq!(first.len(), 10);
    }

    #[test]
    fn shuffle_is_seeded() {
        let k = KeyedRng::new(11);
        assert_eq!(epoch_order(50, 0, &k, true), epoch_order(50, 0, &k, true));
        assert_ne!(epoch_order(50, 0, &k, true), epoch_order(50, 1, &k, true));
        assert_eq!(epoch_order(5, 3, &k, false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let ds = Dataset::open(DataSource::Synth(SynthSpec {
            task: super::super::synth::SynthTask::Roads,
            count: 3,
            size: 40,
            seed: 2,
        }))
        .unwrap();
        let pre = Preprocess::eval(JitterSpec::scaled(32));
        let a: Vec<_> = dataset_iter(&ds, pre, KeyedRng::new(1), false)
            .epochs(1)
            .map(|p| p.unwrap())
            .collect();
        let b: Vec<_> = dataset_iter(&ds, pre, KeyedRng::new(99), false)
            .epochs(1)
            .map(|p| p.unwrap())
            .collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.shape() == Shape::new(1, 32, 32, 3)));
    }

    #[test]
    fn resumed_iterator_matches() {
        let ds = Dataset::open(DataSource::Pairs(numbered(4, 12))).unwrap();
        let pre = Preprocess::train(JitterSpec {
            resize_to: 14,
            crop_to: 12,
            ..JitterSpec::default()
        });
        let all: Vec<_> = dataset_iter(&ds, pre, KeyedRng::new(5), true)
            .take(9)
            .map(|p| p.unwrap())
            .collect();
        let tail: Vec<_> = dataset_iter(&ds, pre, KeyedRng::new(5), true)
            .starting_at(6)
            .take(3)
            .map(|p| p.unwrap())
            .collect();
        assert_eq!(&all[6..], &tail[..]);
    }

    #[test]
    fn empty_sources_are_rejected() {
        assert!(matches!(
            Dataset::open(DataSource::Pairs(vec![])),
            Err(Error::EmptyDataset(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("train")).unwrap();
        let src = DataSource::Directory {
            root: dir.path().into(),
            split: "train".into(),
            order: PairOrder::MapLeft,
        };
        assert!(matches!(Dataset::open(src), Err(Error::EmptyDataset(_))));
    }
}
