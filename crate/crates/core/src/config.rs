//! TOML model and run configuration.
//!
//! ```toml
//! [model]
//! backbone = "resnet"      # or "densenet"
//! n = 18                   # residual units per compartment
//! class_count = 10
//!
//! [wsms]                   # omitted for a plain single-stage network
//! stages = 3
//! integration = "conv1x1"  # none | conv1x1 | conv3x3
//!
//! [train]                  # optional; fields override the backbone preset
//! epochs = 20
//!
//! [data]                   # optional
//! kind = "synth"           # cifar10 | cifar100 | synth
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{build_densenet_with, build_resnet_with, BackboneKind, RESNET_WIDTHS, STEM_CHANNELS};
use crate::data::SynthScaleConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use crate::wsms::{Integration, Sharing, WsmsSpec, INTEGRATION_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneKind,
    pub n: Option<usize>,
    pub widths: Option<Vec<usize>>,
    pub k: Option<usize>,
    pub layers: Option<usize>,
    pub dense_blocks: Option<usize>,
    pub stem_channels: Option<usize>,
    #[serde(default = "default_classes")]
    pub class_count: usize,
    #[serde(default = "default_input")]
    pub input_size: usize,
}

fn default_classes() -> usize {
    10
}

fn default_input() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsmsSection {
    pub stages: usize,
    #[serde(default = "default_integration")]
    pub integration: Integration,
    pub integration_channels: Option<usize>,
    #[serde(default = "default_sharing")]
    pub sharing: Sharing,
}

fn default_integration() -> Integration {
    Integration::None
}

fn default_sharing() -> Sharing {
    Sharing::Shared
}

/// Optional overrides applied on top of the backbone's training preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Option<BackboneKind>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_schedule: Option<Vec<(usize, f64)>>,
    pub seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub augment: Option<bool>,
    pub bn_decay: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Cifar10,
    Cifar100,
    Synth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Dataset directory; relative paths resolve against the data root.
    pub path: Option<PathBuf>,
    /// Use only the first `train_subset` training records.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Synthetic-data parameters (ignored for CIFAR).
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub train_scales: Option<(f64, f64)>,
    pub test_scales: Option<(f64, f64)>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

impl DataSection {
    pub fn synth_config(&self, class_count: usize, image_size: usize) -> SynthScaleConfig {
        let d = SynthScaleConfig::default();
        SynthScaleConfig {
            class_count,
            image_size,
            train_scales: self.train_scales.unwrap_or(d.train_scales),
            test_scales: self.test_scales.unwrap_or(d.test_scales),
            train_per_class: self.train_per_class.unwrap_or(d.train_per_class),
            test_per_class: self.test_per_class.unwrap_or(d.test_per_class),
            noise: self.noise.unwrap_or(d.noise),
            seed: self.seed.unwrap_or(d.seed),
        }
    }

    /// `path` resolved against `root`.
    pub fn resolve_path(&self, root: Option<&Path>) -> Option<PathBuf> {
        match (&self.path, root) {
            (Some(p), _) if p.is_absolute() => Some(p.clone()),
            (Some(p), Some(r)) => Some(r.join(p)),
            (Some(p), None) => Some(p.clone()),
            (None, r) => r.map(Path::to_path_buf),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: ModelSection,
    wsms: Option<WsmsSection>,
    train: Option<TrainSection>,
    data: Option<DataSection>,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: WsmsSpec,
    pub train: TrainConfig,
    pub data: Option<DataSection>,
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, for error reporting.
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut section_line = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                section_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    section_line
}

fn cfg_err(text: &str, section: &str, key: &str, message: impl std::fmt::Display) -> Error {
    Error::Config {
        line: key_line(text, section, key),
        message: message.to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map(|s| line_at(text, s.start)),
            message: e.message().to_string(),
        })?;
        let m = &raw.model;
        let require = |v: Option<usize>, key: &str| {
            v.ok_or_else(|| cfg_err(text, "model", key, format!("`{key}` is required for a {:?} backbone", m.backbone)))
        };
        let backbone = match m.backbone {
            BackboneKind::ResNet => {
                let n = require(m.n, "n")?;
                let widths = m.widths.clone().unwrap_or_else(|| RESNET_WIDTHS.to_vec());
                build_resnet_with(n, &widths, m.class_count, m.input_size)
                    .map_err(|e| cfg_err(text, "model", "n", e))?
            }
            BackboneKind::DenseNet => {
                let k = require(m.k, "k")?;
                build_densenet_with(
                    k,
                    m.layers.unwrap_or(crate::backbones::DENSE_LAYERS),
                    m.dense_blocks.unwrap_or(3),
                    m.stem_channels.unwrap_or(STEM_CHANNELS),
                    m.class_count,
                    m.input_size,
                )
                .map_err(|e| cfg_err(text, "model", "k", e))?
            }
        };
        let model = match &raw.wsms {
            None => WsmsSpec::single_stage(backbone),
            Some(w) => {
                let spec = WsmsSpec {
                    backbone,
                    stages: w.stages,
                    integration: w.integration,
                    integration_channels: w.integration_channels.unwrap_or(INTEGRATION_CHANNELS),
                    sharing: w.sharing,
                };
                spec.validate().map_err(|e| cfg_err(text, "wsms", "stages", e))?;
                spec
            }
        };

        let t = raw.train.clone().unwrap_or_default();
        let mut train = match t.preset.unwrap_or(m.backbone) {
            BackboneKind::ResNet => TrainConfig::resnet(),
            BackboneKind::DenseNet => TrainConfig::densenet(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = t.$f.clone() { train.$f = v; } )* };
        }
        set!(epochs, batch_size, momentum, weight_decay, lr_schedule, seed, eval_every, augment, bn_decay);
        train.validate().map_err(|e| cfg_err(text, "train", "lr_schedule", e))?;

        if let Some(d) = &raw.data {
            let expected = match d.kind {
                DataKind::Cifar10 => Some(10),
                DataKind::Cifar100 => Some(100),
                DataKind::Synth => None,
            };
            if let Some(c) = expected.filter(|&c| c != m.class_count) {
                return Err(cfg_err(
                    text,
                    "model",
                    "class_count",
                    format!("class_count {} does not match the dataset's {c} classes", m.class_count),
                ));
            }
            if d.kind == DataKind::Synth {
                d.synth_config(m.class_count, m.input_size)
                    .validate()
                    .map_err(|e| cfg_err(text, "data", "kind", e))?;
            }
        }
        Ok(Self { model, train, data: raw.data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&text)
    }
}
