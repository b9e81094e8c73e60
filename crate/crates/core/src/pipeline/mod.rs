//! Preprocessing, dataset iteration, and synthetic map tiles.

pub mod augment;
pub mod dataset;
pub mod rng;
pub mod synth;

pub use augment::{
    denormalize, jitter_pair, mirror_pair, normalize, normalize_pair, random_crop_offsets, random_crop_pair,
    random_mirror_pair, resize, JitterSpec, ResizeMethod,
};
pub use dataset::{dataset_iter, epoch_order, list_images, DataSource, Dataset, DatasetIter, Preprocess};
pub use rng::{KeyedRng, Stream};
pub use synth::{synth_tile, synth_tiles, SynthSpec, SynthTask};
