//! Resize, random crop, random mirror, and `[-1, 1]` normalization.
//!
//! Every random transform draws its parameters once and applies them to both
//! halves of an [`ImagePair`], so map and ground truth stay aligned.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imgio::ImagePair;
use crate::ndtensor::{Shape, Tensor4};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResizeMethod {
    #[default]
    Nearest,
    Bilinear,
}

impl FromStr for ResizeMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(ResizeMethod::Nearest),
            "bilinear" => Ok(ResizeMethod::Bilinear),
            other => Err(format!("expected nearest or bilinear, got `{other}`")),
        }
    }
}

impl fmt::Display for ResizeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResizeMethod::Nearest => "nearest",
            ResizeMethod::Bilinear => "bilinear",
        })
    }
}

/// Random-jitter parameters: resize up to `resize_to`, crop back to `crop_to`,
/// mirror with probability `mirror_prob`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterSpec {
    pub resize_to: usize,
    pub crop_to: usize,
    pub mirror_prob: f64,
    pub method: ResizeMethod,
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec {
            resize_to: 286,
            crop_to: 256,
            mirror_prob: 0.5,
            method: ResizeMethod::Nearest,
        }
    }
}

impl JitterSpec {
    /// Desk-scale jitter keeping the default 286:256 ratio roughly intact.
    pub fn scaled(crop_to: usize) -> Self {
        JitterSpec {
            resize_to: crop_to + (crop_to * 30).div_ceil(256),
            crop_to,
            ..JitterSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_to == 0 {
            return Err(Error::InvalidArgument("crop_to must be positive".into()));
        }
        if self.resize_to < self.crop_to {
            return Err(Error::InvalidArgument(format!(
                "resize_to {} is smaller than crop_to {}",
                self.resize_to, self.crop_to
            )));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(Error::InvalidArgument(format!(
                "mirror_prob {} outside [0, 1]",
                self.mirror_prob
            )));
        }
        Ok(())
    }
}

/// Resamples every spatial plane to `h × w`.
///
/// Nearest maps output index `d` to source `floor(d · in / out)`. Bilinear
/// samples at pixel centres, `(d + 0.5) · in / out − 0.5`, clamped to the edge.
pub fn resize(t: &Tensor4, h: usize, w: usize, method: ResizeMethod) -> Result<Tensor4> {
    let s = t.shape();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {h}×{w}")));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::shape("resize", format!("empty source {s}")));
    }
    if (h, w) == (s.h, s.w) {
        return Ok(t.clone());
    }
    let out = Shape::new(s.n, h, w, s.c);
    Ok(match method {
        ResizeMethod::Nearest => {
            let ys: Vec<usize> = (0..h).map(|d| d * s.h / h).collect();
            let xs: Vec<usize> = (0..w).map(|d| d * s.w / w).collect();
            Tensor4::from_fn(out, |n, y, x, c| t.at(n, ys[y], xs[x], c) as f64)
        }
        ResizeMethod::Bilinear => {
            let taps = |d: usize, src: usize, dst: usize| {
                let pos = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                (lo, (lo + 1).min(src - 1), pos - lo as f64)
            };
            let ys: Vec<_> = (0..h).map(|d| taps(d, s.h, h)).collect();
            let xs: Vec<_> = (0..w).map(|d| taps(d, s.w, w)).collect();
            Tensor4::from_fn(out, |n, y, x, c| {
                let (y0, y1, fy) = ys[y];
                let (x0, x1, fx) = xs[x];
                let v = |yy, xx| t.at(n, yy, xx, c) as f64;
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                top * (1.0 - fy) + bottom * fy
            })
        }
    })
}

/// Uniform crop offsets `(top, left)` over every valid position.
pub fn random_crop_offsets<R: Rng + ?Sized>(h: usize, w: usize, crop_to: usize, rng: &mut R) -> Result<(usize, usize)> {
    if h < crop_to || w < crop_to {
        return Err(Error::shape(
            "random_crop",
            format!("input {h}×{w} is smaller than crop {crop_to}"),
        ));
    }
    Ok((rng.random_range(0..=h - crop_to), rng.random_range(0..=w - crop_to)))
}

pub fn crop_pair_at(pair: &ImagePair, top: usize, left: usize, size: usize) -> Result<ImagePair> {
    pair.map_both(|t| t.crop(top, left, size, size))
}

/// Crops both tensors of `pair` at one shared random offset.
pub fn random_crop_pair<R: Rng + ?Sized>(pair: &ImagePair, crop_to: usize, rng: &mut R) -> Result<ImagePair> {
    let s = pair.shape();
    let (top, left) = random_crop_offsets(s.h, s.w, crop_to, rng)?;
    crop_pair_at(pair, top, left, crop_to)
}

/// Flips both tensors left-right.
pub fn mirror_pair(pair: &ImagePair) -> ImagePair {
    ImagePair {
        input_map: pair.input_map.flip_horizontal(),
        target_truth: pair.target_truth.flip_horizontal(),
        source_id: pair.source_id.clone(),
    }
}

/// Flips both tensors together with probability `prob`.
pub fn random_mirror_pair<R: Rng + ?Sized>(pair: &ImagePair, rng: &mut R, prob: f64) -> ImagePair {
    if rng.random::<f64>() < prob {
        mirror_pair(pair)
    } else {
        pair.clone()
    }
}

/// Full jitter: resize to `resize_to`², random crop to `crop_to`², random mirror.
pub fn jitter_pair<R: Rng + ?Sized>(
    pair: &ImagePair,
    spec: &JitterSpec,
    crop_rng: &mut R,
    mirror_rng: &mut R,
) -> Result<ImagePair> {
    spec.validate()?;
    let resized = pair.map_both(|t| resize(t, spec.resize_to, spec.resize_to, spec.method))?;
    let cropped = random_crop_pair(&resized, spec.crop_to, crop_rng)?;
    Ok(random_mirror_pair(&cropped, mirror_rng, spec.mirror_prob))
}

/// `v ↦ (v − 127.5) / 127.5`: pixel intensities `[0, 255]` onto `[-1, 1]`.
///
/// Both directions run in `f32` arithmetic; in that form the pair round-trips
/// every integer level bit-exactly, which the `f64`-then-round form does not.
pub fn normalize(t: &Tensor4) -> Tensor4 {
    let data = t.data().iter().map(|&v| (v - 127.5) / 127.5).collect();
    Tensor4::from_vec(t.shape(), data).expect("same length")
}

/// Inverse of [`normalize`], clamping to `[0, 255]`.
pub fn denormalize(t: &Tensor4) -> Tensor4 {
    let data = t
        .data()
        .iter()
        .map(|&v| (v * 127.5 + 127.5).clamp(0.0, 255.0))
        .collect();
    Tensor4::from_vec(t.shape(), data).expect("same length")
}

pub fn normalize_pair(pair: &ImagePair) -> ImagePair {
    ImagePair {
        input_map: normalize(&pair.input_map),
        target_truth: normalize(&pair.target_truth),
        source_id: pair.source_id.clone(),
    }
}
