//! Weight-shared multi-stage (WSMS) networks.
//!
//! An `S`-stage network runs suffix-truncated copies of a backbone on an
//! average-pooled image pyramid: stage `s` sees the input downscaled by
//! `2^(s-1)` and keeps the first `k - s + 1` convolution blocks, so every stage
//! ends at the same spatial extent. Stage outputs are concatenated along the
//! channel axis (stage 1 first), passed through an integration layer, globally
//! average pooled and classified.
//!
//! With [`Sharing::Shared`] every convolution at a given block depth is one
//! parameter across stages, while batch-norm states stay private to each
//! stage. [`Sharing::Unshared`] gives the multi-stage (MS) baseline with
//! independent parameters per stage.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneSpec, BlockNet, LayerFactory};
use crate::error::{invalid_arg, Error, Result};
use crate::nn::{BatchNorm, Conv, Forward, Linear, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

/// Default output channels of a convolutional integration layer.
pub const INTEGRATION_CHANNELS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integration {
    None,
    Conv1x1,
    Conv3x3,
}

impl Integration {
    pub fn kernel(self) -> Option<usize> {
        match self {
            Integration::None => None,
            Integration::Conv1x1 => Some(1),
            Integration::Conv3x3 => Some(3),
        }
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Integration::None => "none",
            Integration::Conv1x1 => "conv1x1",
            Integration::Conv3x3 => "conv3x3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sharing {
    Shared,
    Unshared,
}

/// Declarative description of a (possibly single-stage) network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsmsSpec {
    pub backbone: BackboneSpec,
    pub stages: usize,
    pub integration: Integration,
    pub integration_channels: usize,
    pub sharing: Sharing,
}

/// Per-stage layout derived from a [`WsmsSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub stages: Vec<StageInfo>,
    pub concat_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageInfo {
    /// 1-based stage index.
    pub stage: usize,
    /// Input downscale divisor, `2^(stage-1)`.
    pub downscale: usize,
    pub input_size: usize,
    /// Number of convolution blocks the stage keeps.
    pub conv_blocks: usize,
    pub out_channels: usize,
}

impl WsmsSpec {
    /// The plain backbone as a degenerate one-stage network.
    pub fn single_stage(backbone: BackboneSpec) -> Self {
        Self {
            backbone,
            stages: 1,
            integration: Integration::None,
            integration_channels: INTEGRATION_CHANNELS,
            sharing: Sharing::Shared,
        }
    }

    pub fn new(backbone: BackboneSpec, stages: usize, integration: Integration, sharing: Sharing) -> Result<Self> {
        let spec = Self {
            backbone,
            stages,
            integration,
            integration_channels: INTEGRATION_CHANNELS,
            sharing,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let k = self.backbone.conv_block_count();
        if self.stages == 0 {
            return Err(invalid_arg!("stage count must be at least 1"));
        }
        if self.stages > k {
            return Err(invalid_arg!(
                "{} stages requested but the backbone has only k = {k} convolution blocks",
                self.stages
            ));
        }
        if self.integration != Integration::None && self.integration_channels == 0 {
            return Err(invalid_arg!("integration_channels must be positive"));
        }
        let pyramid = 1usize << (self.stages - 1);
        if self.backbone.input_size % pyramid != 0 {
            return Err(invalid_arg!(
                "input size {} is not divisible by 2^(S-1) = {pyramid}",
                self.backbone.input_size
            ));
        }
        // Every stage must reach the common final extent.
        let last = self.backbone.input_size / self.backbone.total_downsampling();
        for s in 1..=self.stages {
            let factor: usize = self.stage_groups(s)
                .flat_map(|g| self.backbone.blocks[g].iter())
                .map(|b| b.downsample_factor())
                .product();
            if (self.backbone.input_size / (1 << (s - 1))) / factor != last {
                return Err(invalid_arg!(
                    "stage {s} would not end at the common {last}x{last} feature map"
                ));
            }
        }
        Ok(())
    }

    fn stage_groups(&self, stage: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
        let groups = self.backbone.conv_blocks();
        let keep = groups.len() - stage + 1;
        groups.into_iter().take(keep)
    }

    pub fn plan(&self) -> StagePlan {
        let k = self.backbone.conv_block_count();
        let stages: Vec<StageInfo> = (1..=self.stages)
            .map(|s| StageInfo {
                stage: s,
                downscale: 1 << (s - 1),
                input_size: self.backbone.input_size >> (s - 1),
                conv_blocks: k - s + 1,
                out_channels: self.backbone.channels_after(k - s + 1),
            })
            .collect();
        let concat_channels = stages.iter().map(|s| s.out_channels).sum();
        StagePlan {
            stages,
            concat_channels,
        }
    }

    /// Input length of the classifier.
    pub fn feature_dim(&self) -> usize {
        match self.integration {
            Integration::None => self.plan().concat_channels,
            _ => self.integration_channels,
        }
    }

    /// Spatial extent shared by all stage outputs.
    pub fn final_size(&self) -> usize {
        self.backbone.input_size / self.backbone.total_downsampling()
    }

    /// Weighted layers of the stage-1 pathway plus integration conv and classifier.
    pub fn depth(&self) -> usize {
        self.backbone.depth() + usize::from(self.integration != Integration::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageNet {
    pub stage: usize,
    pub stem: BlockNet,
    /// Instantiated blocks, grouped by convolution block.
    pub groups: Vec<Vec<BlockNet>>,
    pub final_bn: Option<BatchNorm>,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrationLayer {
    pub conv: Conv,
    pub bn: BatchNorm,
}

/// A [`WsmsSpec`] bound to parameter ids in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsmsNet {
    pub spec: WsmsSpec,
    pub stages: Vec<StageNet>,
    pub integration: Option<IntegrationLayer>,
    pub fc: Linear,
}

/// Optional instrumentation of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Multiplies each stage's output before concatenation (masking).
    pub stage_scales: Option<Vec<f64>>,
    /// Stages whose parameters receive gradient; others bind parameters as
    /// constants.
    pub trainable_stages: Option<Vec<bool>>,
}

/// Intermediate values of a forward pass.
#[derive(Debug, Clone)]
pub struct WsmsTrace {
    pub pyramid: Vec<Var>,
    /// Per stage: stem output followed by each convolution block's output.
    pub block_outputs: Vec<Vec<Var>>,
    pub stage_outputs: Vec<Var>,
    pub concat: Var,
    pub integrated: Var,
    pub features: Var,
    pub logits: Var,
}

/// Instantiates `spec`, registering He-initialized parameters in a new store.
pub fn build_wsms<T: Scalar>(spec: &WsmsSpec, rng: &mut impl Rng) -> Result<(WsmsNet, ParamStore<T>)> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let plan = spec.plan();
    let groups = spec.backbone.conv_blocks();
    let mut factory = LayerFactory::new(&mut store, rng, spec.sharing == Sharing::Shared);
    let mut stages = Vec::with_capacity(spec.stages);
    for info in &plan.stages {
        factory.set_stage(info.stage);
        let stem = BlockNet::build(&spec.backbone.stem, "stem", &mut factory);
        let mut nets = Vec::new();
        for range in groups.iter().take(info.conv_blocks) {
            let group = range
                .clone()
                .map(|b| BlockNet::build(&spec.backbone.blocks[b], &format!("block{b}"), &mut factory))
                .collect();
            nets.push(group);
        }
        let final_bn = spec
            .backbone
            .final_bn_relu
            .then(|| factory.bn("final_bn", info.out_channels));
        stages.push(StageNet {
            stage: info.stage,
            stem,
            groups: nets,
            final_bn,
            out_channels: info.out_channels,
        });
    }
    let integration = spec.integration.kernel().map(|kernel| IntegrationLayer {
        conv: factory.conv("integration.conv", plan.concat_channels, spec.integration_channels, kernel, 1),
        bn: factory.unstaged_bn("integration.bn", spec.integration_channels),
    });
    let fc = factory.linear("fc", spec.feature_dim(), spec.backbone.class_count);
    Ok((
        WsmsNet {
            spec: spec.clone(),
            stages,
            integration,
            fc,
        },
        store,
    ))
}

/// Successive 2x2 average-pool halvings: `[x, x/2, ..., x/2^(S-1)]`.
pub fn image_pyramid<T: Scalar>(graph: &mut Graph<T>, x: Var, stages: usize) -> Result<Vec<Var>> {
    if stages == 0 {
        return Err(invalid_arg!("image pyramid needs at least one level"));
    }
    let shape = graph.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(invalid_arg!("image pyramid expects NCHW input, got {shape:?}"));
    }
    let divisor = 1usize << (stages - 1);
    if shape[2] % divisor != 0 || shape[3] % divisor != 0 {
        return Err(invalid_arg!(
            "input {}x{} is not divisible by 2^(S-1) = {divisor}",
            shape[2],
            shape[3]
        ));
    }
    let mut levels = vec![x];
    for _ in 1..stages {
        let prev = *levels.last().expect("non-empty");
        levels.push(graph.avg_pool_half(prev)?);
    }
    Ok(levels)
}

fn in_stage(stage: usize, err: Error) -> Error {
    match err {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("stage {stage}: {m}")),
        Error::InvalidState(m) => Error::InvalidState(format!("stage {stage}: {m}")),
        other => other,
    }
}

impl StageNet {
    /// Runs the stage on its pyramid level; returns the stem output, each
    /// convolution block's output and finally the stage output.
    pub fn forward<T: Scalar>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.groups.len() + 2);
        let mut h = self.stem.forward(ctx, x)?;
        outs.push(h);
        for group in &self.groups {
            for block in group {
                h = block.forward(ctx, h)?;
            }
            outs.push(h);
        }
        if let Some(bn) = &self.final_bn {
            let y = bn.forward(ctx, h)?;
            h = ctx.graph.relu(y)?;
        }
        outs.push(h);
        Ok(outs)
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut v = self.stem.batch_norms();
        v.extend(self.groups.iter().flatten().flat_map(BlockNet::batch_norms));
        v.extend(self.final_bn.iter());
        v
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut v = self.stem.convs();
        v.extend(self.groups.iter().flatten().flat_map(BlockNet::convs));
        v
    }
}

impl WsmsNet {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Logits for a batch of images.
    pub fn forward<T: Scalar>(&self, ctx: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, x, &ForwardOptions::default())?.logits)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        ctx: &mut Forward<'_, T>,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<WsmsTrace> {
        let pyramid = image_pyramid(ctx.graph, x, self.stages.len())?;
        let mut block_outputs = Vec::with_capacity(self.stages.len());
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        for (i, (stage, &input)) in self.stages.iter().zip(&pyramid).enumerate() {
            let trainable = opts.trainable_stages.as_ref().is_none_or(|t| t[i]);
            ctx.set_trainable(trainable);
            let mut outs = stage.forward(ctx, input).map_err(|e| in_stage(stage.stage, e))?;
            ctx.set_trainable(true);
            let mut out = outs.pop().expect("stage output");
            if let Some(scale) = opts.stage_scales.as_ref().map(|s| s[i]) {
                out = ctx.graph.scale(out, scale)?;
            }
            block_outputs.push(outs);
            stage_outputs.push(out);
        }
        let final_size = self.spec.final_size();
        for (s, &out) in stage_outputs.iter().enumerate() {
            let shape = ctx.graph.shape(out);
            if shape[2] != final_size || shape[3] != final_size {
                return Err(invalid_arg!(
                    "stage {}: output is {}x{} but the network expects {final_size}x{final_size}",
                    s + 1,
                    shape[2],
                    shape[3]
                ));
            }
        }
        let concat = ctx.graph.concat_channels(&stage_outputs)?;
        let integrated = integration_apply(ctx, self.integration.as_ref(), concat)?;
        let pooled = ctx.graph.global_avg_pool(integrated)?;
        let features = ctx.graph.flatten(pooled)?;
        let logits = self.fc.forward(ctx, features)?;
        Ok(WsmsTrace {
            pyramid,
            block_outputs,
            stage_outputs,
            concat,
            integrated,
            features,
            logits,
        })
    }

    /// Every batch-norm layer owned by stage `stage` (1-based).
    pub fn stage_batch_norms(&self, stage: usize) -> Vec<&BatchNorm> {
        self.stages[stage - 1].batch_norms()
    }

    /// Total parameter scalars, counting shared parameters once.
    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.scalar_count()
    }
}

/// Identity for [`Integration::None`]; otherwise conv (padding keeps the
/// extent), batch norm and ReLU.
pub fn integration_apply<T: Scalar>(
    ctx: &mut Forward<'_, T>,
    layer: Option<&IntegrationLayer>,
    x: Var,
) -> Result<Var> {
    match layer {
        None => Ok(x),
        Some(l) => {
            let h = l.conv.forward(ctx, x)?;
            let h = l.bn.forward(ctx, h)?;
            ctx.graph.relu(h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{build_densenet, build_resnet, build_resnet_with};

    #[test]
    fn resnet_plan_concat_channels() {
        let spec = WsmsSpec::new(build_resnet(18, 10).unwrap(), 3, Integration::None, Sharing::Shared).unwrap();
        let plan = spec.plan();
        assert_eq!(plan.concat_channels, 112);
        let sizes: Vec<usize> = plan.stages.iter().map(|s| s.input_size).collect();
        assert_eq!(sizes, vec![32, 16, 8]);
        assert_eq!(spec.feature_dim(), 112);
    }

    #[test]
    fn densenet_plan_concat_channels() {
        let spec = WsmsSpec::new(build_densenet(24, 10).unwrap(), 3, Integration::Conv1x1, Sharing::Shared).unwrap();
        let plan = spec.plan();
        let chans: Vec<usize> = plan.stages.iter().map(|s| s.out_channels).collect();
        assert_eq!(chans, vec![2320, 1552, 784]);
        assert_eq!(plan.concat_channels, 4656);
        assert_eq!(spec.feature_dim(), 128);
    }

    #[test]
    fn too_many_stages_names_k() {
        let err = WsmsSpec::new(build_resnet_with(1, &[4, 8], 5, 16).unwrap(), 3, Integration::None, Sharing::Shared)
            .unwrap_err();
        assert!(err.to_string().contains("k = 2"), "{err}");
    }

    #[test]
    fn depth_counts_integration_conv() {
        let b = build_resnet(18, 10).unwrap();
        assert_eq!(WsmsSpec::new(b.clone(), 3, Integration::None, Sharing::Shared).unwrap().depth(), 110);
        assert_eq!(WsmsSpec::new(b, 3, Integration::Conv1x1, Sharing::Shared).unwrap().depth(), 111);
    }
}
