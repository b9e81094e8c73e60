//! Image decoding and encoding, combined map|aerial files, and triptych panels.
//!
//! Tensors produced here hold raw pixel intensities in `[0, 255]`; the
//! `[-1, 1]` mapping lives in [`crate::pipeline::normalize`]. PNG is the only
//! output format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::{ColorType, ImageFormat, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::ndtensor::{Shape, Tensor4};

/// Which half of a combined file holds the map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PairOrder {
    #[default]
    MapLeft,
    MapRight,
}

impl FromStr for PairOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "map-left" => Ok(PairOrder::MapLeft),
            "map-right" => Ok(PairOrder::MapRight),
            other => Err(format!("expected map-left or map-right, got `{other}`")),
        }
    }
}

impl fmt::Display for PairOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairOrder::MapLeft => "map-left",
            PairOrder::MapRight => "map-right",
        })
    }
}

/// An aligned (map, ground truth) pair, each `1×H×W×3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub input_map: Tensor4,
    pub target_truth: Tensor4,
    pub source_id: String,
}

impl ImagePair {
    pub fn new(input_map: Tensor4, target_truth: Tensor4, source_id: impl Into<String>) -> Result<Self> {
        if input_map.shape() != target_truth.shape() {
            return Err(Error::shape(
                "image pair",
                format!("map {} and truth {} differ", input_map.shape(), target_truth.shape()),
            ));
        }
        Ok(ImagePair {
            input_map,
            target_truth,
            source_id: source_id.into(),
        })
    }

    pub fn shape(&self) -> Shape {
        self.input_map.shape()
    }

    /// Applies `f` to both tensors.
    pub fn map_both(&self, mut f: impl FnMut(&Tensor4) -> Result<Tensor4>) -> Result<ImagePair> {
        ImagePair::new(f(&self.input_map)?, f(&self.target_truth)?, self.source_id.clone())
    }
}

fn color_name(c: ColorType) -> String {
    format!("{c:?}")
}

/// Decodes a JPEG or PNG file into a `1×H×W×3` tensor of pixel values.
/// Anything other than 8-bit RGB is rejected.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor4> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::NotRgb {
            path: path.to_path_buf(),
            color: color_name(img.color()),
        });
    }
    let rgb = img.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(f32::from).collect();
    Tensor4::from_vec(Shape::new(1, h as usize, w as usize, 3), data)
}

/// Splits a side-by-side combined image into its two halves.
pub fn split_combined(combined: &Tensor4, order: PairOrder, source_id: &str) -> Result<ImagePair> {
    let s = combined.shape();
    if s.w % 2 != 0 {
        return Err(Error::OddWidth {
            path: source_id.into(),
            width: s.w as u32,
        });
    }
    let half = s.w / 2;
    let left = combined.crop(0, 0, s.h, half)?;
    let right = combined.crop(0, half, s.h, half)?;
    let (map, truth) = match order {
        PairOrder::MapLeft => (left, right),
        PairOrder::MapRight => (right, left),
    };
    ImagePair::new(map, truth, source_id)
}

/// Loads a combined file and splits it into an [`ImagePair`] of pixel tensors.
pub fn load_combined(path: impl AsRef<Path>, order: PairOrder) -> Result<ImagePair> {
    let path = path.as_ref();
    let combined = load_rgb(path)?;
    if combined.shape().w % 2 != 0 {
        return Err(Error::OddWidth {
            path: path.to_path_buf(),
            width: combined.shape().w as u32,
        });
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    split_combined(&combined, order, &id)
}

/// Places tensors of equal batch, height, and channels side by side.
pub fn concat_width(parts: &[&Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?
        .shape();
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.c) != (first.n, first.h, first.c) {
            return Err(Error::shape(
                "concat_width",
                format!("{s} does not line up with {first}"),
            ));
        }
    }
    let total_w: usize = parts.iter().map(|p| p.shape().w).sum();
    let out = Shape::new(first.n, first.h, total_w, first.c);
    let mut data = Vec::with_capacity(out.len());
    for n in 0..first.n {
        for y in 0..first.h {
            for p in parts {
                let s = p.shape();
                let start = s.offset(n, y, 0, 0);
                data.extend_from_slice(&p.data()[start..start + s.w * s.c]);
            }
        }
    }
    Tensor4::from_vec(out, data)
}

/// Rebuilds a combined image from a pair of pixel tensors.
pub fn join_combined(pair: &ImagePair, order: PairOrder) -> Result<Tensor4> {
    match order {
        PairOrder::MapLeft => concat_width(&[&pair.input_map, &pair.target_truth]),
        PairOrder::MapRight => concat_width(&[&pair.target_truth, &pair.input_map]),
    }
}

/// Input | ground truth | generated, in that order.
pub fn make_triptych(input: &Tensor4, truth: &Tensor4, generated: &Tensor4) -> Result<Tensor4> {
    if input.shape() != truth.shape() || input.shape() != generated.shape() {
        return Err(Error::shape(
            "make_triptych",
            format!(
                "panels differ: {} / {} / {}",
                input.shape(),
                truth.shape(),
                generated.shape()
            ),
        ));
    }
    concat_width(&[input, truth, generated])
}

/// Maps `[-1, 1]` to 8-bit: `round_half_up((v + 1) · 127.5)`, clamped.
pub fn quantize_unit(v: f32) -> u8 {
    quantize_pixel((v as f64 + 1.0) * 127.5)
}

/// Rounds a `[0, 255]` intensity half-up and clamps it to a byte.
pub fn quantize_pixel(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn write_rgb(t: &Tensor4, path: &Path, quantize: impl Fn(f32) -> u8) -> Result<()> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("encode_png", format!("expected 1×H×W×3, got {s}")));
    }
    let bytes: Vec<u8> = t.data().iter().map(|&v| quantize(v)).collect();
    let img = RgbImage::from_raw(s.w as u32, s.h as u32, bytes).expect("buffer sized from shape");
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Encode {
                path: path.to_path_buf(),
                source,
            },
        })
}

/// Writes a `[-1, 1]` tensor as an 8-bit RGB PNG.
pub fn encode_png(t: &Tensor4, path: impl AsRef<Path>) -> Result<()> {
    write_rgb(t, path.as_ref(), quantize_unit)
}

/// Writes a `[0, 255]` pixel tensor as an 8-bit RGB PNG.
pub fn encode_png_pixels(t: &Tensor4, path: impl AsRef<Path>) -> Result<()> {
    write_rgb(t, path.as_ref(), |v| quantize_pixel(v as f64))
}
