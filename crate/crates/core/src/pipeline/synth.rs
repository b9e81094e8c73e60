//! Procedural map tiles for desk-scale experiments.
//!
//! A map is a flat land colour crossed by straight roads in a reserved colour;
//! for the `invert` and `recolor` tasks it also carries flat park and water
//! blocks. The three tasks derive the ground-truth half differently:
//!
//! * `invert`: `255 − map`, per channel.
//! * `recolor`: a fixed channel permutation of the map.
//! * `roads`: an "aerial" rendering where land is textured with value noise
//!   and roads are drawn in a fixed asphalt colour.
//!
//! Tile `index` under seed `s` depends on nothing but `(s, index)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rng::{KeyedRng, Stream};
use crate::error::{Error, Result};
use crate::imgio::ImagePair;
use crate::ndtensor::{Shape, Tensor4};

pub const MAP_LAND: [u8; 3] = [236, 232, 220];
pub const MAP_ROAD: [u8; 3] = [255, 255, 255];
pub const MAP_PARK: [u8; 3] = [196, 228, 176];
pub const MAP_WATER: [u8; 3] = [168, 208, 240];
pub const AERIAL_ROAD: [u8; 3] = [88, 88, 96];

/// Channel `c` of a `recolor` truth pixel is channel `RECOLOR_PERMUTATION[c]` of the map.
pub const RECOLOR_PERMUTATION: [usize; 3] = [2, 0, 1];

pub const MIN_TILE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    Invert,
    Recolor,
    Roads,
}

impl FromStr for SynthTask {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "invert" => Ok(SynthTask::Invert),
            "recolor" => Ok(SynthTask::Recolor),
            "roads" => Ok(SynthTask::Roads),
            other => Err(format!("expected invert, recolor, or roads, got `{other}`")),
        }
    }
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthTask::Invert => "invert",
            SynthTask::Recolor => "recolor",
            SynthTask::Roads => "roads",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Tiles `0..train` form the training split and `train..count` the
    /// held-out split, one tenth of the total rounded down.
    pub fn split(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let train = self.count - self.count / 10;
        (0..train, train..self.count)
    }

    /// Tiles of `range`, in index order.
    pub fn tiles(&self, range: std::ops::Range<usize>) -> Result<Vec<ImagePair>> {
        let rng = KeyedRng::new(self.seed);
        range
            .map(|i| synth_tile(self.task, self.size, &rng, i as u64))
            .collect()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Land,
    Park,
    Water,
    Road,
}

struct Road {
    // Unit normal and offset of the centre line, plus half width, in pixels.
    nx: f64,
    ny: f64,
    d: f64,
    half_width: f64,
}

fn layout(size: usize, blocks: bool, rng: &mut ChaCha8Rng) -> Vec<Class> {
    let s = size as f64;
    let mut classes = vec![Class::Land; size * size];
    if blocks {
        for _ in 0..rng.random_range(1..=3) {
            let class = if rng.random::<f64>() < 0.6 {
                Class::Park
            } else {
                Class::Water
            };
            let h = rng.random_range(size / 8..=size / 3);
            let w = rng.random_range(size / 8..=size / 3);
            let top = rng.random_range(0..=size - h);
            let left = rng.random_range(0..=size - w);
            for y in top..top + h {
                for x in left..left + w {
                    classes[y * size + x] = class;
                }
            }
        }
    }
    let max_half = (s / 24.0).max(1.0);
    let roads: Vec<Road> = (0..rng.random_range(1..=4))
        .map(|_| {
            let angle = if rng.random::<f64>() < 0.7 {
                // Mostly grid-aligned streets.
                if rng.random::<bool>() {
                    0.0
                } else {
                    std::f64::consts::FRAC_PI_2
                }
            } else {
                rng.random_range(0.0..std::f64::consts::PI)
            };
            let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let (nx, ny) = (angle.cos(), angle.sin());
            Road {
                nx,
                ny,
                d: nx * cx + ny * cy,
                half_width: rng.random_range(0.75..=max_half),
            }
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if roads
                .iter()
                .any(|r| (r.nx * px + r.ny * py - r.d).abs() <= r.half_width)
            {
                classes[y * size + x] = Class::Road;
            }
        }
    }
    classes
}

/// Two-octave smoothed lattice noise in `[0, 1]`.
fn value_noise(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for (octave, weight) in [(4usize, 0.65), (12usize, 0.35)] {
        let cells = octave.min(size);
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random()).collect();
        let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..size {
            let fy = y as f64 / size as f64 * cells as f64;
            let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..size {
                let fx = x as f64 / size as f64 * cells as f64;
                let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                out[y * size + x] += weight * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| (a[c] as f64 + (b[c] as f64 - a[c] as f64) * t).round())
}

fn map_color(class: Class) -> [u8; 3] {
    match class {
        Class::Land => MAP_LAND,
        Class::Park => MAP_PARK,
        Class::Water => MAP_WATER,
        Class::Road => MAP_ROAD,
    }
}

fn aerial_color(class: Class, noise: f64) -> [f64; 3] {
    match class {
        Class::Land => lerp([92, 104, 62], [150, 138, 104], noise),
        Class::Park => lerp([36, 78, 32], [84, 126, 58], noise),
        Class::Water => lerp([30, 58, 92], [52, 88, 120], noise),
        Class::Road => AERIAL_ROAD.map(f64::from),
    }
}

/// Renders tile `index` of a synthetic dataset. Both tensors hold `[0, 255]` pixels.
pub fn synth_tile(task: SynthTask, size: usize, rng: &KeyedRng, index: u64) -> Result<ImagePair> {
    if size < MIN_TILE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "synthetic tiles need size ≥ {MIN_TILE_SIZE}, got {size}"
        )));
    }
    let mut r = rng.stream(Stream::Synth, index);
    let classes = layout(size, task != SynthTask::Roads, &mut r);
    let shape = Shape::new(1, size, size, 3);
    let map = Tensor4::from_fn(shape, |_, y, x, c| map_color(classes[y * size + x])[c] as f64);
    let truth = match task {
        SynthTask::Invert => map.map(|v| 255.0 - v),
        SynthTask::Recolor => Tensor4::from_fn(shape, |_, y, x, c| map.at(0, y, x, RECOLOR_PERMUTATION[c]) as f64),
        SynthTask::Roads => {
            let noise = value_noise(size, &mut r);
            Tensor4::from_fn(shape, |_, y, x, c| {
                let i = y * size + x;
                aerial_color(classes[i], noise[i])[c]
            })
        }
    };
    ImagePair::new(map, truth, format!("{task}-{index:05}"))
}

/// The first `n` tiles of a synthetic dataset.
pub fn synth_tiles(n: usize, size: usize, task: SynthTask, rng: KeyedRng) -> impl Iterator<Item = Result<ImagePair>> {
    (0..n as u64).map(move |i| synth_tile(task, size, &rng, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_to_one_split() {
        let spec = SynthSpec {
            task: SynthTask::Invert,
            count: 10,
            size: 16,
            seed: 1,
        };
        assert_eq!(spec.split(), (0..9, 9..10));
        let (train, val) = SynthSpec { count: 500, ..spec }.split();
        assert_eq!((train.len(), val.len()), (450, 50));
        let held = spec.tiles(9..10).unwrap();
        assert_eq!(held[0], synth_tile(spec.task, 16, &KeyedRng::new(1), 9).unwrap());
    }

    #[test]
    fn invert_definition() {
        let pair = synth_tile(SynthTask::Invert, 32, &KeyedRng::new(7), 0).unwrap();
        for (m, t) in pair.input_map.data().iter().zip(pair.target_truth.data()) {
            assert_eq!(m + t, 255.0);
        }
        // A 200-valued map pixel maps to 55.
        assert_eq!(255.0 - 200.0, 55.0);
        assert!(pair.input_map.data().contains(&255.0));
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let k = KeyedRng::new(9);
        for task in [SynthTask::Invert, SynthTask::Recolor, SynthTask::Roads] {
            let a = synth_tile(task, 24, &k, 3).unwrap();
            let b = synth_tile(task, 24, &k, 3).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, synth_tile(task, 24, &k, 4).unwrap());
        }
    }

    #[test]
    fn recolor_is_a_permutation() {
        let pair = synth_tile(SynthTask::Recolor, 20, &KeyedRng::new(1), 2).unwrap();
        let mut inverse = [0usize; 3];
        for (c, &p) in RECOLOR_PERMUTATION.iter().enumerate() {
            inverse[p] = c;
        }
        let back = Tensor4::from_fn(pair.shape(), |_, y, x, c| {
            pair.target_truth.at(0, y, x, inverse[c]) as f64
        });
        assert!(back.bit_eq(&pair.input_map));
    }

    #[test]
    fn roads_render_reserved_colors() {
        let pair = synth_tile(SynthTask::Roads, 64, &KeyedRng::new(5), 1).unwrap();
        let mut road_pixels = 0;
        for y in 0..64 {
            for x in 0..64 {
                let m: Vec<f32> = (0..3).map(|c| pair.input_map.at(0, y, x, c)).collect();
                let t: Vec<f32> = (0..3).map(|c| pair.target_truth.at(0, y, x, c)).collect();
                if m == MAP_ROAD.map(f32::from) {
                    road_pixels += 1;
                    assert_eq!(t, AERIAL_ROAD.map(f32::from));
                } else {
                    assert_eq!(m, MAP_LAND.map(f32::from));
                    assert_ne!(t, AERIAL_ROAD.map(f32::from));
                }
            }
        }
        assert!(road_pixels > 0);
    }

    #[test]
    fn rejects_tiny_tiles() {
        assert!(synth_tile(SynthTask::Invert, 15, &KeyedRng::new(0), 0).is_err());
        assert_eq!(synth_tiles(5, 16, SynthTask::Invert, KeyedRng::new(0)).count(), 5);
    }
}
