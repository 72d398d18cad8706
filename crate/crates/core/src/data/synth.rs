use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage};
use crate::error::{invalid_arg, Error, Result};

/// Supersampling factor per axis for anti-aliased rendering.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Disc,
    Cross,
    Ring,
    BarPair,
    Triangle,
}

impl Glyph {
    pub const ALL: [Glyph; 5] = [Glyph::Disc, Glyph::Cross, Glyph::Ring, Glyph::BarPair, Glyph::Triangle];

    /// Membership test in glyph coordinates, `u, v` in `[-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        let r2 = u * u + v * v;
        match self {
            Glyph::Disc => r2 <= 1.0,
            Glyph::Ring => (0.3025..=1.0).contains(&r2),
            Glyph::Cross => u.abs() <= 0.25 || v.abs() <= 0.25,
            Glyph::BarPair => (0.3..=0.75).contains(&u.abs()),
            Glyph::Triangle => u.abs() <= (v + 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScaleConfig {
    pub class_count: usize,
    pub image_size: usize,
    pub train_scales: (f64, f64),
    pub test_scales: (f64, f64),
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthScaleConfig {
    fn default() -> Self {
        Self {
            class_count: 5,
            image_size: 32,
            train_scales: (0.6, 1.0),
            test_scales: (0.3, 0.5),
            train_per_class: 400,
            test_per_class: 100,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.class_count > Glyph::ALL.len() {
            return Err(invalid_arg!(
                "class_count must be in 1..={}, got {}",
                Glyph::ALL.len(),
                self.class_count
            ));
        }
        if self.image_size == 0 || self.image_size > 255 {
            return Err(invalid_arg!("image_size must be in 1..=255, got {}", self.image_size));
        }
        for (name, (lo, hi)) in [("train_scales", self.train_scales), ("test_scales", self.test_scales)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(invalid_arg!("{name} must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
            }
            if lo * self.image_size as f64 <= 2.0 {
                return Err(invalid_arg!(
                    "{name} lower bound {lo} renders a glyph of under 2 pixels at image size {}",
                    self.image_size
                ));
            }
        }
        let (a, b) = (self.train_scales, self.test_scales);
        if a.0 <= b.1 && b.0 <= a.1 {
            return Err(invalid_arg!(
                "train_scales [{}, {}] and test_scales [{}, {}] overlap",
                a.0,
                a.1,
                b.0,
                b.1
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid_arg!("noise must be finite and non-negative, got {}", self.noise));
        }
        Ok(())
    }
}

/// Anti-aliased coverage map (`size x size`, values in `[0, 1]`) of a glyph
/// whose bounding box spans `scale * size` pixels, centred at `center`.
pub fn render_glyph(glyph: Glyph, scale: f64, size: usize, center: (f64, f64)) -> Result<Vec<f64>> {
    let extent = scale * size as f64;
    if !(scale > 0.0 && scale <= 1.0) || extent < 2.0 {
        return Err(invalid_arg!(
            "glyph scale {scale} at image size {size} spans {extent:.2} pixels (minimum 2)"
        ));
    }
    let half = extent / 2.0;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    if glyph.contains((px - center.0) / half, (py - center.1) / half) {
                        hits += 1;
                    }
                }
            }
            out[y * size + x] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScaleData {
    pub train: Dataset,
    pub test_seen: Dataset,
    pub test_held_out: Dataset,
}

fn render_split(cfg: &SynthScaleConfig, scales: (f64, f64), per_class: usize, stream: u64) -> Result<Dataset> {
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut ds = Dataset::empty(3, size, size, cfg.class_count);
    let mut id = 0u64;
    for _ in 0..per_class {
        for (label, &glyph) in Glyph::ALL[..cfg.class_count].iter().enumerate() {
            let scale = if scales.0 == scales.1 { scales.0 } else { rng.random_range(scales.0..=scales.1) };
            let half = scale * size as f64 / 2.0;
            let place = |rng: &mut ChaCha8Rng| {
                let room = size as f64 - 2.0 * half;
                if room > 0.0 { half + rng.random_range(0.0..room) } else { size as f64 / 2.0 }
            };
            let center = (place(&mut rng), place(&mut rng));
            let coverage = render_glyph(glyph, scale, size, center)?;
            let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.3));
            let mut pixels = Vec::with_capacity(3 * size * size);
            for c in 0..3 {
                for &a in &coverage {
                    let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    let v = (bg[c] + (fg[c] - bg[c]) * a + n).clamp(0.0, 1.0);
                    // quantized so persisted records reload exactly
                    pixels.push(((v * 255.0).round() / 255.0) as f32);
                }
            }
            ds.push(&LabeledImage { channels: 3, height: size, width: size, pixels, label, id })?;
            id += 1;
        }
    }
    Ok(ds)
}

/// Renders the three splits. The layout is class-interleaved and every
/// class appears exactly `*_per_class` times in each split.
pub fn synth_scale_dataset(cfg: &SynthScaleConfig) -> Result<SynthScaleData> {
    cfg.validate()?;
    Ok(SynthScaleData {
        train: render_split(cfg, cfg.train_scales, cfg.train_per_class, 1)?,
        test_seen: render_split(cfg, cfg.train_scales, cfg.test_per_class, 2)?,
        test_held_out: render_split(cfg, cfg.test_scales, cfg.test_per_class, 3)?,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: SynthScaleConfig,
    splits: Vec<(String, usize)>,
}

const SPLITS: [&str; 3] = ["train", "test_seen", "test_held_out"];

fn encode(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.len() * (1 + ds.image_len()));
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(ds.pixels_of(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    out
}

fn decode(bytes: &[u8], size: usize, classes: usize) -> Result<Dataset> {
    let rec = 1 + 3 * size * size;
    if bytes.len() % rec != 0 {
        return Err(Error::Format(format!(
            "synthetic split length {} is not a multiple of the {rec}-byte record size",
            bytes.len()
        )));
    }
    let mut ds = Dataset::empty(3, size, size, classes);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        if r[0] as usize >= classes {
            return Err(Error::Format(format!("record {i}: label {} is outside [0, {classes})", r[0])));
        }
        ds.labels.push(r[0] as usize);
        ds.ids.push(i as u64);
        ds.pixels.extend(r[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(ds)
}

/// Writes `train.bin`, `test_seen.bin`, `test_held_out.bin` (label byte
/// followed by R, G, B planes, as in CIFAR-10) and `manifest.json`.
pub fn write_synth_dataset(dir: &Path, cfg: &SynthScaleConfig, data: &SynthScaleData) -> Result<()> {
    fs::create_dir_all(dir)?;
    let splits = [&data.train, &data.test_seen, &data.test_held_out];
    for (name, ds) in SPLITS.iter().zip(splits) {
        fs::write(dir.join(format!("{name}.bin")), encode(ds))?;
    }
    let manifest = Manifest {
        format: "label-u8 + rgb planes".into(),
        config: cfg.clone(),
        splits: SPLITS.iter().zip(splits).map(|(n, d)| (n.to_string(), d.len())).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

impl SynthScaleData {
    /// Reads a directory produced by [`write_synth_dataset`].
    pub fn load(dir: &Path) -> Result<(SynthScaleConfig, SynthScaleData)> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
        let cfg = manifest.config;
        let read = |name: &str| -> Result<Dataset> {
            let bytes = fs::read(dir.join(format!("{name}.bin")))?;
            decode(&bytes, cfg.image_size, cfg.class_count)
        };
        let data = SynthScaleData {
            train: read(SPLITS[0])?,
            test_seen: read(SPLITS[1])?,
            test_held_out: read(SPLITS[2])?,
        };
        Ok((cfg, data))
    }
}
