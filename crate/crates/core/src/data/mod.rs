//! Image datasets: CIFAR binary ingestion, per-channel normalization,
//! pad-crop-flip augmentation and a procedurally rendered scale benchmark.

mod cifar;
mod synth;

pub use cifar::{
    decode_records, encode_records, expected_bytes, load_cifar, load_cifar_file, CifarSplits, CifarVariant,
};
pub use synth::{render_glyph, synth_scale_dataset, write_synth_dataset, Glyph, SynthScaleConfig, SynthScaleData};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::tensor::{Scalar, Tensor};

/// Zero padding applied on every side before random cropping.
pub const CROP_PADDING: usize = 4;

/// One decoded image with its label and stable identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major pixels.
    pub pixels: Vec<f32>,
    pub label: usize,
    pub id: u64,
}

/// A collection of equally sized images stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    /// CIFAR-100 coarse labels, kept so records re-encode byte-identically.
    pub coarse_labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn empty(channels: usize, height: usize, width: usize, class_count: usize) -> Self {
        Self {
            channels,
            height,
            width,
            class_count,
            pixels: Vec::new(),
            labels: Vec::new(),
            ids: Vec::new(),
            coarse_labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels_of(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn get(&self, i: usize) -> LabeledImage {
        LabeledImage {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels: self.pixels_of(i).to_vec(),
            label: self.labels[i],
            id: self.ids[i],
        }
    }

    pub fn push(&mut self, img: &LabeledImage) -> Result<()> {
        if (img.channels, img.height, img.width) != (self.channels, self.height, self.width) {
            return Err(invalid_arg!(
                "image is {}x{}x{} but the dataset holds {}x{}x{}",
                img.channels,
                img.height,
                img.width,
                self.channels,
                self.height,
                self.width
            ));
        }
        if img.label >= self.class_count {
            return Err(invalid_arg!("label {} is outside [0, {})", img.label, self.class_count));
        }
        self.pixels.extend_from_slice(&img.pixels);
        self.labels.push(img.label);
        self.ids.push(img.id);
        Ok(())
    }

    /// The first `n` records (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            pixels: self.pixels[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ids: self.ids[..n].to_vec(),
            coarse_labels: self.coarse_labels.as_ref().map(|c| c[..n].to_vec()),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset::empty(self.channels, self.height, self.width, self.class_count)
    }

    /// Stacks the selected images into an `N x C x H x W` tensor.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.pixels_of(i).iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("batch shape matches data")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Number of records per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Dataset-global per-channel standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    /// Fits mean and population standard deviation per channel. A channel with
    /// zero deviation gets std 1 and a warning.
    pub fn fit(train: &Dataset) -> Result<(Self, Vec<String>)> {
        if train.is_empty() {
            return Err(invalid_arg!("cannot fit normalization statistics on an empty dataset"));
        }
        let plane = train.height * train.width;
        let mut mean = Vec::with_capacity(train.channels);
        let mut std = Vec::with_capacity(train.channels);
        let mut warnings = Vec::new();
        for c in 0..train.channels {
            let values = || {
                (0..train.len()).flat_map(move |i| train.pixels_of(i)[c * plane..(c + 1) * plane].iter().map(|&v| v as f64))
            };
            let count = (train.len() * plane) as f64;
            let m = values().sum::<f64>() / count;
            let var = values().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
            let mut s = var.sqrt();
            if s == 0.0 {
                let msg = format!("channel {c} has zero variance; using std 1");
                log::warn!("{msg}");
                warnings.push(msg);
                s = 1.0;
            }
            mean.push(m as f32);
            std.push(s as f32);
        }
        Ok((Self { mean, std }, warnings))
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        if ds.channels != self.mean.len() {
            return Err(invalid_arg!(
                "normalizer has {} channels but dataset has {}",
                self.mean.len(),
                ds.channels
            ));
        }
        let plane = ds.height * ds.width;
        for img in ds.pixels.chunks_mut(ds.channels * plane) {
            for (c, ch) in img.chunks_mut(plane).enumerate() {
                let (m, s) = (self.mean[c], self.std[c]);
                ch.iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        Ok(())
    }
}

/// Statistics fitted on the training split and applied to every split.
pub struct NormalizationReport {
    pub normalizer: Normalizer,
    pub warnings: Vec<String>,
}

pub fn normalize_per_channel(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<NormalizationReport> {
    let (normalizer, warnings) = Normalizer::fit(train)?;
    normalizer.apply(train)?;
    for ds in others.iter_mut() {
        normalizer.apply(ds)?;
    }
    Ok(NormalizationReport { normalizer, warnings })
}

/// Zero-pads by [`CROP_PADDING`], crops the original extent at offset
/// `(dy, dx)` of the padded image and optionally mirrors horizontally.
pub fn crop_flip(img: &LabeledImage, dy: usize, dx: usize, flip: bool) -> LabeledImage {
    assert!(dy <= 2 * CROP_PADDING && dx <= 2 * CROP_PADDING, "crop offset out of range");
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0f32; img.pixels.len()];
    for c in 0..img.channels {
        for y in 0..h {
            let sy = (y + dy) as isize - CROP_PADDING as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (ox + dx) as isize - CROP_PADDING as isize;
                if sx >= 0 && sx < w as isize {
                    out[(c * h + y) * w + x] = img.pixels[(c * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    LabeledImage {
        pixels: out,
        ..img.clone()
    }
}

/// Random crop offset in `0..=8` on both axes and a fair coin for flipping.
pub fn augment(img: &LabeledImage, rng: &mut impl Rng) -> LabeledImage {
    let dy = rng.random_range(0..=2 * CROP_PADDING);
    let dx = rng.random_range(0..=2 * CROP_PADDING);
    let flip = rng.random_bool(0.5);
    crop_flip(img, dy, dx, flip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> LabeledImage {
        LabeledImage {
            channels: 3,
            height: h,
            width: w,
            pixels: (0..3 * h * w).map(|i| i as f32 + 1.0).collect(),
            label: 2,
            id: 9,
        }
    }

    #[test]
    fn center_crop_without_flip_is_identity() {
        let img = ramp(32, 32);
        assert_eq!(crop_flip(&img, 4, 4, false), img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ramp(32, 32);
        let once = crop_flip(&img, 4, 4, true);
        assert_ne!(once, img);
        assert_eq!(crop_flip(&once, 4, 4, true), img);
    }

    #[test]
    fn crop_shifts_content() {
        let img = ramp(32, 32);
        let shifted = crop_flip(&img, 5, 4, false);
        assert_eq!(shifted.pixels[0], img.pixels[32]);
        assert_eq!(shifted.pixels[31 * 32], 0.0);
    }

    #[test]
    fn constant_dataset_normalizes_to_zero_with_warning() {
        let mut ds = Dataset::empty(3, 2, 2, 2);
        for id in 0..4 {
            ds.push(&LabeledImage { channels: 3, height: 2, width: 2, pixels: vec![0.5; 12], label: 0, id }).unwrap();
        }
        let report = normalize_per_channel(&mut ds, &mut []).unwrap();
        assert_eq!(report.normalizer.mean, vec![0.5; 3]);
        assert_eq!(report.normalizer.std, vec![1.0; 3]);
        assert_eq!(report.warnings.len(), 3);
        assert!(ds.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_dataset_cannot_be_normalized() {
        let mut ds = Dataset::empty(3, 2, 2, 2);
        assert!(normalize_per_channel(&mut ds, &mut []).is_err());
    }
}
