use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

const PLANE: usize = 32 * 32;
const PIXEL_BYTES: usize = 3 * PLANE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    /// Label bytes per record: one for CIFAR-10, coarse + fine for CIFAR-100.
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + PIXEL_BYTES
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "c10" | "cifar10" => Ok(CifarVariant::C10),
            "c100" | "cifar100" => Ok(CifarVariant::C100),
            other => Err(format!("unknown CIFAR variant `{other}`")),
        }
    }
}

/// Byte length of a file holding `records` records.
pub fn expected_bytes(variant: CifarVariant, records: usize) -> usize {
    records * variant.record_bytes()
}

/// Decodes concatenated CIFAR records; ids count up from `first_id`.
pub fn decode_records(bytes: &[u8], variant: CifarVariant, first_id: u64) -> Result<Dataset> {
    let rec = variant.record_bytes();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        let whole = bytes.len() / rec;
        return Err(Error::Format(format!(
            "CIFAR file length {} is not a whole number of {rec}-byte records (expected {} or {} bytes)",
            bytes.len(),
            expected_bytes(variant, whole.max(1)),
            expected_bytes(variant, whole + 1)
        )));
    }
    let n = bytes.len() / rec;
    let mut ds = Dataset::empty(3, 32, 32, variant.class_count());
    ds.pixels.reserve(n * PIXEL_BYTES);
    let mut coarse = Vec::new();
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let (label, pixels) = match variant {
            CifarVariant::C10 => (record[0], &record[1..]),
            CifarVariant::C100 => {
                if record[0] >= 20 {
                    return Err(Error::Format(format!("record {i}: coarse label {} is out of range", record[0])));
                }
                coarse.push(record[0]);
                (record[1], &record[2..])
            }
        };
        if label as usize >= variant.class_count() {
            return Err(Error::Format(format!(
                "record {i}: label {label} is outside [0, {})",
                variant.class_count()
            )));
        }
        ds.labels.push(label as usize);
        ds.ids.push(first_id + i as u64);
        ds.pixels.extend(pixels.iter().map(|&b| b as f32 / 255.0));
    }
    if variant == CifarVariant::C100 {
        ds.coarse_labels = Some(coarse);
    }
    Ok(ds)
}

/// Inverse of [`decode_records`] for 3x32x32 datasets with pixels in [0, 1].
pub fn encode_records(ds: &Dataset, variant: CifarVariant) -> Result<Vec<u8>> {
    if (ds.channels, ds.height, ds.width) != (3, 32, 32) {
        return Err(Error::Format(format!(
            "CIFAR records hold 3x32x32 images, dataset is {}x{}x{}",
            ds.channels, ds.height, ds.width
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_bytes());
    for i in 0..ds.len() {
        let label = u8::try_from(ds.labels[i])
            .ok()
            .filter(|&l| (l as usize) < variant.class_count())
            .ok_or_else(|| Error::Format(format!("label {} does not fit the record format", ds.labels[i])))?;
        if variant == CifarVariant::C100 {
            let coarse = ds.coarse_labels.as_ref().map(|c| c[i]).unwrap_or(0);
            out.push(coarse);
        }
        out.push(label);
        out.extend(ds.pixels_of(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn load_cifar_file(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    decode_records(&bytes, variant, 0).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone)]
pub struct CifarSplits {
    pub train: Dataset,
    pub test: Dataset,
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut iter = parts.into_iter();
    let mut first = iter.next().expect("at least one part");
    for p in iter {
        let offset = first.len() as u64;
        first.pixels.extend(p.pixels);
        first.labels.extend(p.labels);
        first.ids.extend(p.ids.into_iter().map(|id| id + offset));
        if let (Some(a), Some(b)) = (first.coarse_labels.as_mut(), p.coarse_labels) {
            a.extend(b);
        }
    }
    first
}

/// Loads the standard binary distribution from `dir` (or its
/// `cifar-10-batches-bin` / `cifar-100-binary` subdirectory).
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<CifarSplits> {
    let sub = match variant {
        CifarVariant::C10 => "cifar-10-batches-bin",
        CifarVariant::C100 => "cifar-100-binary",
    };
    let root: PathBuf = if dir.join(sub).is_dir() { dir.join(sub) } else { dir.to_path_buf() };
    let (train_files, test_file): (Vec<String>, &str) = match variant {
        CifarVariant::C10 => ((1..=5).map(|i| format!("data_batch_{i}.bin")).collect(), "test_batch.bin"),
        CifarVariant::C100 => (vec!["train.bin".into()], "test.bin"),
    };
    let train = train_files
        .iter()
        .map(|f| load_cifar_file(&root.join(f), variant))
        .collect::<Result<Vec<_>>>()?;
    let test = load_cifar_file(&root.join(test_file), variant)?;
    Ok(CifarSplits {
        train: concat(train),
        test,
    })
}
