//! ResNet and DenseNet backbones for 32x32 inputs, described as ordered
//! convolution blocks so the multi-stage wrapper can truncate them.
//!
//! A backbone is a stem convolution followed by blocks. Blocks that halve the
//! feature map (a downsampling residual compartment or a transition) open a
//! new *convolution block group*; the groups are the units a multi-stage
//! network truncates.

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::nn::{BatchNorm, Conv, Forward, Linear, ParamStore};
use crate::tensor::{Scalar, Var};

/// Channel widths of the three CIFAR ResNet compartments.
pub const RESNET_WIDTHS: [usize; 3] = [16, 32, 64];
/// Output channels of the stem convolution of both CIFAR backbones.
pub const STEM_CHANNELS: usize = 16;
/// Convolution layers per dense block of the 100-layer DenseNet.
pub const DENSE_LAYERS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    ResNet,
    DenseNet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    /// 3x3 convolution, batch norm, ReLU.
    StemConv {
        in_channels: usize,
        out_channels: usize,
    },
    /// `units` residual blocks; the first one uses stride 2 when `downsample`.
    ResidualCompartment {
        in_channels: usize,
        out_channels: usize,
        units: usize,
        downsample: bool,
    },
    /// `layers` pre-activation 3x3 layers, each adding `growth_rate` channels.
    DenseBlock {
        in_channels: usize,
        growth_rate: usize,
        layers: usize,
    },
    /// Channel-preserving pre-activation 1x1 convolution and 2x2 average pooling.
    Transition { channels: usize },
}

impl BlockSpec {
    pub fn in_channels(&self) -> usize {
        match *self {
            BlockSpec::StemConv { in_channels, .. }
            | BlockSpec::ResidualCompartment { in_channels, .. }
            | BlockSpec::DenseBlock { in_channels, .. } => in_channels,
            BlockSpec::Transition { channels } => channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            BlockSpec::StemConv { out_channels, .. }
            | BlockSpec::ResidualCompartment { out_channels, .. } => out_channels,
            BlockSpec::DenseBlock {
                in_channels,
                growth_rate,
                layers,
            } => in_channels + growth_rate * layers,
            BlockSpec::Transition { channels } => channels,
        }
    }

    /// Spatial reduction factor (1 or 2).
    pub fn downsample_factor(&self) -> usize {
        match self {
            BlockSpec::ResidualCompartment {
                downsample: true, ..
            }
            | BlockSpec::Transition { .. } => 2,
            _ => 1,
        }
    }

    /// Weighted (convolution) layers in the block.
    pub fn conv_layers(&self) -> usize {
        match *self {
            BlockSpec::StemConv { .. } | BlockSpec::Transition { .. } => 1,
            BlockSpec::ResidualCompartment { units, .. } => 2 * units,
            BlockSpec::DenseBlock { layers, .. } => layers,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            BlockSpec::StemConv {
                in_channels,
                out_channels,
            } if in_channels == 0 || out_channels == 0 => {
                Err(invalid_arg!("stem channels must be positive"))
            }
            BlockSpec::ResidualCompartment {
                in_channels,
                out_channels,
                units,
                downsample,
            } => {
                if units == 0 {
                    return Err(invalid_arg!("a residual compartment needs at least one block"));
                }
                if out_channels < in_channels || (!downsample && out_channels != in_channels) {
                    return Err(invalid_arg!(
                        "residual compartment {in_channels}->{out_channels} channels is not supported (downsample={downsample})"
                    ));
                }
                Ok(())
            }
            BlockSpec::DenseBlock {
                growth_rate,
                layers,
                ..
            } if growth_rate == 0 || layers == 0 => {
                Err(invalid_arg!("dense block growth rate and layer count must be positive"))
            }
            BlockSpec::Transition { channels: 0 } => {
                Err(invalid_arg!("transition channels must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// A full single-pathway backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub input_channels: usize,
    pub input_size: usize,
    pub stem: BlockSpec,
    pub blocks: Vec<BlockSpec>,
    /// Batch norm and ReLU after the last block (pre-activation backbones).
    pub final_bn_relu: bool,
    pub class_count: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(invalid_arg!("class_count must be positive"));
        }
        if !matches!(self.stem, BlockSpec::StemConv { .. }) {
            return Err(invalid_arg!("the stem must be a stem convolution"));
        }
        if self.stem.in_channels() != self.input_channels {
            return Err(invalid_arg!(
                "stem expects {} input channels but images have {}",
                self.stem.in_channels(),
                self.input_channels
            ));
        }
        if self.blocks.is_empty() {
            return Err(invalid_arg!("a backbone needs at least one block"));
        }
        self.stem.validate()?;
        let mut channels = self.stem.out_channels();
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if matches!(b, BlockSpec::StemConv { .. }) {
                return Err(invalid_arg!("block {i}: stem convolutions may only appear first"));
            }
            if b.in_channels() != channels {
                return Err(invalid_arg!(
                    "block {i} expects {} input channels but receives {channels}",
                    b.in_channels()
                ));
            }
            channels = b.out_channels();
        }
        if self.input_size == 0 || self.input_size % self.total_downsampling() != 0 {
            return Err(invalid_arg!(
                "input size {} is not divisible by the backbone's downsampling factor {}",
                self.input_size,
                self.total_downsampling()
            ));
        }
        Ok(())
    }

    /// Block index ranges of the pooling-delimited convolution blocks.
    pub fn conv_blocks(&self) -> Vec<Range<usize>> {
        let mut groups = Vec::new();
        let mut start = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            if i > start && b.downsample_factor() > 1 {
                groups.push(start..i);
                start = i;
            }
        }
        groups.push(start..self.blocks.len());
        groups
    }

    /// Number of convolution blocks, the upper bound on stage count.
    pub fn conv_block_count(&self) -> usize {
        self.conv_blocks().len()
    }

    pub fn total_downsampling(&self) -> usize {
        self.blocks.iter().map(BlockSpec::downsample_factor).product()
    }

    /// Channels after the first `groups` convolution blocks.
    pub fn channels_after(&self, groups: usize) -> usize {
        match groups {
            0 => self.stem.out_channels(),
            g => {
                let end = self.conv_blocks()[g - 1].end;
                self.blocks[end - 1].out_channels()
            }
        }
    }

    pub fn out_channels(&self) -> usize {
        self.channels_after(self.conv_block_count())
    }

    /// Weighted layers: convolutions plus the classifier.
    pub fn depth(&self) -> usize {
        self.stem.conv_layers() + self.blocks.iter().map(BlockSpec::conv_layers).sum::<usize>() + 1
    }
}

/// CIFAR ResNet with `n` residual blocks per compartment: depth `6n + 2`.
pub fn build_resnet(n: usize, class_count: usize) -> Result<BackboneSpec> {
    build_resnet_with(n, &RESNET_WIDTHS, class_count, 32)
}

/// ResNet with one compartment per entry of `widths`; compartments after the
/// first halve the feature map and the stem outputs `widths[0]` channels.
pub fn build_resnet_with(
    n: usize,
    widths: &[usize],
    class_count: usize,
    input_size: usize,
) -> Result<BackboneSpec> {
    if n == 0 {
        return Err(invalid_arg!("residual blocks per compartment must be at least 1"));
    }
    if widths.is_empty() {
        return Err(invalid_arg!("at least one compartment width is required"));
    }
    let mut blocks = Vec::new();
    let mut channels = widths[0];
    for (i, &w) in widths.iter().enumerate() {
        blocks.push(BlockSpec::ResidualCompartment {
            in_channels: channels,
            out_channels: w,
            units: n,
            downsample: i > 0,
        });
        channels = w;
    }
    let spec = BackboneSpec {
        kind: BackboneKind::ResNet,
        input_channels: 3,
        input_size,
        stem: BlockSpec::StemConv {
            in_channels: 3,
            out_channels: widths[0],
        },
        blocks,
        final_bn_relu: false,
        class_count,
    };
    spec.validate()?;
    Ok(spec)
}

/// The 100-layer CIFAR DenseNet (three dense blocks of 32 layers, no
/// bottleneck, no compression) with growth rate `k`.
pub fn build_densenet(k: usize, class_count: usize) -> Result<BackboneSpec> {
    build_densenet_with(k, DENSE_LAYERS, 3, STEM_CHANNELS, class_count, 32)
}

pub fn build_densenet_with(
    k: usize,
    layers: usize,
    dense_blocks: usize,
    stem_channels: usize,
    class_count: usize,
    input_size: usize,
) -> Result<BackboneSpec> {
    if k == 0 || layers == 0 || dense_blocks == 0 {
        return Err(invalid_arg!(
            "growth rate, layers per block and block count must be positive"
        ));
    }
    let mut blocks = Vec::new();
    let mut channels = stem_channels;
    for i in 0..dense_blocks {
        if i > 0 {
            blocks.push(BlockSpec::Transition { channels });
        }
        blocks.push(BlockSpec::DenseBlock {
            in_channels: channels,
            growth_rate: k,
            layers,
        });
        channels += k * layers;
    }
    let spec = BackboneSpec {
        kind: BackboneKind::DenseNet,
        input_channels: 3,
        input_size,
        stem: BlockSpec::StemConv {
            in_channels: 3,
            out_channels: stem_channels,
        },
        blocks,
        final_bn_relu: true,
        class_count,
    };
    spec.validate()?;
    Ok(spec)
}

/// Allocates layers while instantiating blocks. Convolutions registered under
/// the same path are reused when `shared`; batch norms are always private to
/// the current stage.
pub struct LayerFactory<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    shared: bool,
    stage: usize,
    convs: HashMap<String, Conv>,
}

impl<'a, T: Scalar, R: Rng> LayerFactory<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R, shared: bool) -> Self {
        Self {
            store,
            rng,
            shared,
            stage: 1,
            convs: HashMap::new(),
        }
    }

    pub fn set_stage(&mut self, stage: usize) {
        self.stage = stage;
    }

    /// Batch norm outside any stage (integration layer).
    pub fn unstaged_bn(&mut self, name: &str, channels: usize) -> BatchNorm {
        BatchNorm::register(self.store, name, channels)
    }

    pub fn linear(&mut self, name: &str, in_features: usize, out_features: usize) -> Linear {
        Linear::register(self.store, self.rng, name, in_features, out_features)
    }

    pub fn conv(&mut self, path: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv {
        let key = if self.shared {
            path.to_string()
        } else {
            format!("stage{}.{path}", self.stage)
        };
        if let Some(c) = self.convs.get(&key) {
            return c.clone();
        }
        let conv = Conv::register(self.store, self.rng, &key, cin, cout, kernel, stride);
        self.convs.insert(key, conv.clone());
        conv
    }

    pub fn bn(&mut self, path: &str, channels: usize) -> BatchNorm {
        BatchNorm::register(self.store, &format!("stage{}.{path}", self.stage), channels)
    }
}

/// conv3x3-BN-ReLU-conv3x3-BN plus a parameter-free shortcut, then ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualUnit {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// BN-ReLU-conv3x3 producing `growth_rate` new channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub bn: BatchNorm,
    pub conv: Conv,
}

/// An instantiated block: layer descriptors bound to parameter ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockNet {
    Stem { conv: Conv, bn: BatchNorm },
    Residual(Vec<ResidualUnit>),
    Dense(Vec<DenseLayer>),
    Transition { bn: BatchNorm, conv: Conv },
}

impl BlockNet {
    pub fn build<T: Scalar, R: Rng>(
        spec: &BlockSpec,
        path: &str,
        f: &mut LayerFactory<'_, T, R>,
    ) -> Self {
        match *spec {
            BlockSpec::StemConv {
                in_channels,
                out_channels,
            } => BlockNet::Stem {
                conv: f.conv(&format!("{path}.conv"), in_channels, out_channels, 3, 1),
                bn: f.bn(&format!("{path}.bn"), out_channels),
            },
            BlockSpec::ResidualCompartment {
                in_channels,
                out_channels,
                units,
                downsample,
            } => BlockNet::Residual(
                (0..units)
                    .map(|u| {
                        let (cin, stride) = if u == 0 {
                            (in_channels, if downsample { 2 } else { 1 })
                        } else {
                            (out_channels, 1)
                        };
                        let p = format!("{path}.unit{u}");
                        ResidualUnit {
                            conv1: f.conv(&format!("{p}.conv1"), cin, out_channels, 3, stride),
                            bn1: f.bn(&format!("{p}.bn1"), out_channels),
                            conv2: f.conv(&format!("{p}.conv2"), out_channels, out_channels, 3, 1),
                            bn2: f.bn(&format!("{p}.bn2"), out_channels),
                            in_channels: cin,
                            out_channels,
                            stride,
                        }
                    })
                    .collect(),
            ),
            BlockSpec::DenseBlock {
                in_channels,
                growth_rate,
                layers,
            } => BlockNet::Dense(
                (0..layers)
                    .map(|l| {
                        let cin = in_channels + l * growth_rate;
                        let p = format!("{path}.layer{l}");
                        DenseLayer {
                            bn: f.bn(&format!("{p}.bn"), cin),
                            conv: f.conv(&format!("{p}.conv"), cin, growth_rate, 3, 1),
                        }
                    })
                    .collect(),
            ),
            BlockSpec::Transition { channels } => BlockNet::Transition {
                bn: f.bn(&format!("{path}.bn"), channels),
                conv: f.conv(&format!("{path}.conv"), channels, channels, 1, 1),
            },
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            BlockNet::Stem { conv, bn } => {
                let y = conv.forward(ctx, x)?;
                let y = bn.forward(ctx, y)?;
                ctx.graph.relu(y)
            }
            BlockNet::Residual(units) => units
                .iter()
                .try_fold(x, |h, unit| residual_block(ctx, unit, h)),
            BlockNet::Dense(layers) => dense_block(ctx, layers, x),
            BlockNet::Transition { bn, conv } => transition(ctx, bn, conv, x),
        }
    }

    /// Batch-norm layers of the block, in forward order.
    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        match self {
            BlockNet::Stem { bn, .. } | BlockNet::Transition { bn, .. } => vec![bn],
            BlockNet::Residual(units) => units.iter().flat_map(|u| [&u.bn1, &u.bn2]).collect(),
            BlockNet::Dense(layers) => layers.iter().map(|l| &l.bn).collect(),
        }
    }

    /// Convolution layers of the block, in forward order.
    pub fn convs(&self) -> Vec<&Conv> {
        match self {
            BlockNet::Stem { conv, .. } | BlockNet::Transition { conv, .. } => vec![conv],
            BlockNet::Residual(units) => units.iter().flat_map(|u| [&u.conv1, &u.conv2]).collect(),
            BlockNet::Dense(layers) => layers.iter().map(|l| &l.conv).collect(),
        }
    }
}

/// `relu(F(x) + shortcut(x))` with `F = conv-BN-ReLU-conv-BN`.
pub fn residual_block<T: Scalar>(ctx: &mut Forward<'_, T>, unit: &ResidualUnit, x: Var) -> Result<Var> {
    let channels = ctx.graph.shape(x).get(1).copied();
    if channels != Some(unit.in_channels) {
        return Err(invalid_arg!(
            "residual block expects {} input channels, got shape {:?}",
            unit.in_channels,
            ctx.graph.shape(x)
        ));
    }
    let h = unit.conv1.forward(ctx, x)?;
    let h = unit.bn1.forward(ctx, h)?;
    let h = ctx.graph.relu(h)?;
    let h = unit.conv2.forward(ctx, h)?;
    let h = unit.bn2.forward(ctx, h)?;
    let shortcut = if unit.stride == 1 && unit.in_channels == unit.out_channels {
        x
    } else {
        ctx.graph.shortcut_downsample(x, unit.out_channels, unit.stride)?
    };
    let y = ctx.graph.add(h, shortcut)?;
    ctx.graph.relu(y)
}

/// Each layer sees the channel concatenation of the block input and every
/// earlier layer's output; the block returns the full concatenation.
pub fn dense_block<T: Scalar>(ctx: &mut Forward<'_, T>, layers: &[DenseLayer], x: Var) -> Result<Var> {
    let mut features = x;
    for layer in layers {
        let h = layer.bn.forward(ctx, features)?;
        let h = ctx.graph.relu(h)?;
        let h = layer.conv.forward(ctx, h)?;
        features = ctx.graph.concat_channels(&[features, h])?;
    }
    Ok(features)
}

/// BN-ReLU-conv1x1 followed by 2x2 average pooling.
pub fn transition<T: Scalar>(ctx: &mut Forward<'_, T>, bn: &BatchNorm, conv: &Conv, x: Var) -> Result<Var> {
    let h = bn.forward(ctx, x)?;
    let h = ctx.graph.relu(h)?;
    let h = conv.forward(ctx, h)?;
    ctx.graph.avg_pool_half(h)
}
