//! Raw HU slices to grayscale images, normalisation statistics, manifests and
//! the image formats the pipeline reads and writes.

mod files;
mod manifest;

pub use files::{
    read_gray_png, read_hu_pgm, read_sidecar, sidecar_path, write_gray_png, write_hu_pgm, Sidecar,
};
pub use manifest::{load_manifest, write_manifest, Manifest, Record, Split};

use crate::error::{config_err, Error, Result};
use crate::tensor::{resize_planes, Tensor};
use std::path::Path;

pub const HU_MIN: i32 = -1024;
pub const HU_MAX: i32 = 3071;

/// A 2-D CT slice in Hounsfield units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuSlice {
    pub height: usize,
    pub width: usize,
    pub values: Vec<i32>,
    pub source_id: String,
    pub subject_id: String,
}

/// An 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(config_err!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Maps the full HU range `[-1024, 3071]` linearly onto `[0, 255]`.
pub fn hu_to_gray(hu: i32) -> u8 {
    let v = (hu.clamp(HU_MIN, HU_MAX) - HU_MIN) as f64;
    round_half_up(v * 255.0 / 4095.0).clamp(0.0, 255.0) as u8
}

pub fn hu_interval_map(slice: &HuSlice) -> Gray8 {
    Gray8 {
        height: slice.height,
        width: slice.width,
        pixels: slice.values.iter().map(|&v| hu_to_gray(v)).collect(),
    }
}

/// Clamps to `[level − width/2, level + width/2]` and maps that interval onto `[0, 255]`.
pub fn window_gray(hu: i32, level: f64, width: f64) -> u8 {
    let lo = level - width / 2.0;
    let v = (hu as f64).clamp(lo, level + width / 2.0);
    round_half_up((v - lo) * 255.0 / width).clamp(0.0, 255.0) as u8
}

pub fn apply_window(slice: &HuSlice, level: f64, width: f64) -> Result<Gray8> {
    if !(width > 0.0) || !level.is_finite() {
        return Err(config_err!(
            "window width must be positive (level {level}, width {width})"
        ));
    }
    Ok(Gray8 {
        height: slice.height,
        width: slice.width,
        pixels: slice
            .values
            .iter()
            .map(|&v| window_gray(v, level, width))
            .collect(),
    })
}

/// Bilinear resize with half-pixel centres, rounded half up.
pub fn resize_bilinear(img: &Gray8, height: usize, width: usize) -> Result<Gray8> {
    if img.height < 2 || img.width < 2 || height == 0 || width == 0 {
        return Err(config_err!(
            "cannot resize {}x{} to {height}x{width}",
            img.height,
            img.width
        ));
    }
    if (img.height, img.width) == (height, width) {
        return Ok(img.clone());
    }
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let out = resize_planes(&src, img.height, img.width, height, width);
    Gray8::new(
        height,
        width,
        out.into_iter()
            .map(|v| round_half_up(v).clamp(0.0, 255.0) as u8)
            .collect(),
    )
}

/// Mean and population standard deviation of `x/255` over a set of images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub mean: f64,
    pub std: f64,
}

impl DatasetStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
            return Err(Error::Validation(format!(
                "dataset statistics need a positive std, got mean {mean}, std {std}"
            )));
        }
        Ok(Self { mean, std })
    }

    /// Two lines: mean, then std.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{}\n{}\n", self.mean, self.std))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let vals: Vec<f64> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        match vals.as_slice() {
            [m, s] => Self::new(*m, *s),
            _ => Err(Error::Validation(format!(
                "{}: expected two lines (mean, std)",
                path.display()
            ))),
        }
    }
}

pub fn compute_stats<'a>(images: impl IntoIterator<Item = &'a Gray8>) -> Result<DatasetStats> {
    let images: Vec<&Gray8> = images.into_iter().collect();
    let count: usize = images.iter().map(|i| i.pixels.len()).sum();
    if count == 0 {
        return Err(Error::Validation(
            "cannot compute statistics of an empty split".into(),
        ));
    }
    let vals = || {
        images
            .iter()
            .flat_map(|i| i.pixels.iter().map(|&p| p as f64 / 255.0))
    };
    let mean = vals().sum::<f64>() / count as f64;
    let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    DatasetStats::new(mean, var.sqrt())
}

/// `(x/255 − mean)/std` as a `[1, H, W]` tensor.
pub fn normalize(img: &Gray8, stats: &DatasetStats) -> Tensor<f32> {
    let data = img
        .pixels
        .iter()
        .map(|&p| ((p as f64 / 255.0 - stats.mean) / stats.std) as f32)
        .collect();
    Tensor::new(&[1, img.height, img.width], data).expect("image shape")
}

/// Normalised images of one split with integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[N, 1, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy holding the images at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = if self.is_empty() {
            0
        } else {
            self.images.len() / self.len()
        };
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Dataset {
            images: Tensor::new(&[indices.len(), s[1], s[2], s[3]], data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
        }
    }
}

/// Reads, resizes to `size × size` and normalises every record of `split`.
/// Labels index into `manifest.classes()`.
pub fn load_split(
    manifest: &Manifest,
    split: Split,
    size: usize,
    stats: &DatasetStats,
) -> Result<Dataset> {
    let classes = manifest.classes();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in manifest.records.iter().filter(|r| r.split == split) {
        let img = read_gray_png(&manifest.resolve(&rec.image_path))?;
        let img = resize_bilinear(&img, size, size)?;
        data.extend_from_slice(normalize(&img, stats).data());
        labels.push(
            classes
                .iter()
                .position(|c| *c == rec.label)
                .expect("label listed"),
        );
    }
    Ok(Dataset {
        images: Tensor::new(&[labels.len(), 1, size, size], data)?,
        labels,
        classes,
    })
}
