//! Static parameter and multiplication counts.
//!
//! The analysis walks a [`WsmsSpec`] in the same order the network builder
//! registers parameters, emitting one row per layer. Multiplications are
//! counted for convolution layers only (per batch element); batch norm, the
//! parameter-free shortcuts, pooling and the classifier contribute zero.

use std::fmt::Write as _;

use serde::Serialize;

use crate::backbones::BlockSpec;
use crate::error::{invalid_arg, invalid_state, Result};
use crate::tensor::conv_out_extent;
use crate::wsms::{Sharing, WsmsSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Shortcut,
    AvgPool,
    GlobalPool,
    Fc,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::BatchNorm => "bn",
            LayerKind::Shortcut => "shortcut",
            LayerKind::AvgPool => "avgpool",
            LayerKind::GlobalPool => "gap",
            LayerKind::Fc => "fc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub path: String,
    pub kind: LayerKind,
    /// Stage the layer belongs to; `None` for the shared head.
    pub stage: Option<usize>,
    /// Parameters this row adds to the total (0 for a reused shared conv).
    pub params: u64,
    /// Parameters of the layer itself, whether or not they are shared.
    pub layer_params: u64,
    pub mults: u64,
    /// Output channels, height, width.
    pub out_shape: [usize; 3],
}

impl CostRow {
    pub fn is_shared_reuse(&self) -> bool {
        self.params == 0 && self.layer_params > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub input_hw: (usize, usize),
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    /// Total without batch-norm affine parameters.
    pub total_params_without_bn: u64,
    pub total_mults: u64,
}

impl CostReport {
    fn from_rows(input_hw: (usize, usize), rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_params_without_bn = rows
            .iter()
            .filter(|r| r.kind != LayerKind::BatchNorm)
            .map(|r| r.params)
            .sum();
        let total_mults = rows.iter().map(|r| r.mults).sum();
        Self {
            input_hw,
            rows,
            total_params,
            total_params_without_bn,
            total_mults,
        }
    }

    /// Parameters in millions, rounded to two decimals.
    pub fn params_m(&self) -> f64 {
        (self.total_params as f64 / 1e4).round() / 100.0
    }

    pub fn mults_m(&self) -> f64 {
        (self.total_mults as f64 / 1e6).round()
    }

    /// Multiplications attributed to `stage` (1-based).
    pub fn stage_mults(&self, stage: usize) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.stage == Some(stage))
            .map(|r| r.mults)
            .sum()
    }

    /// Parameters that sharing saves: the layer parameters of reused convs.
    pub fn shared_savings(&self) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.is_shared_reuse())
            .map(|r| r.layer_params)
            .sum()
    }

    /// `layer_path,kind,params,mults,out_shape` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_path,kind,params,mults,out_shape\n");
        for r in &self.rows {
            let [c, h, w] = r.out_shape;
            let _ = writeln!(out, "{},{},{},{},{c}x{h}x{w}", r.path, r.kind.name(), r.params, r.mults);
        }
        out
    }

    /// Human-readable table followed by a totals line.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.path.len()).max().unwrap_or(10).max(10);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:<8}  {:>12}  {:>14}  {}",
            "layer", "kind", "params", "mults", "out_shape"
        );
        for r in &self.rows {
            let [c, h, w] = r.out_shape;
            let _ = writeln!(
                out,
                "{:<width$}  {:<8}  {:>12}  {:>14}  {c}x{h}x{w}",
                r.path,
                r.kind.name(),
                r.params,
                r.mults
            );
        }
        let _ = writeln!(
            out,
            "total params {} ({} without bn), mults {} at {}x{}",
            self.total_params, self.total_params_without_bn, self.total_mults, self.input_hw.0, self.input_hw.1
        );
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }

    /// `params=1.73M mults=252M` with three significant figures for params.
    pub fn summary_line(&self) -> String {
        format!(
            "params={}M mults={}M",
            three_significant(self.total_params as f64 / 1e6),
            self.mults_m()
        )
    }
}

fn three_significant(v: f64) -> String {
    if v >= 100.0 {
        format!("{v:.0}")
    } else if v >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

struct Walker {
    rows: Vec<CostRow>,
    shared: bool,
    seen_convs: std::collections::HashSet<String>,
    stage: Option<usize>,
}

/// Running activation shape `(channels, height, width)`.
type Shape3 = (usize, usize, usize);

impl Walker {
    fn conv(&mut self, path: &str, x: Shape3, cout: usize, kernel: usize, stride: usize) -> Result<Shape3> {
        let (cin, h, w) = x;
        let pad = kernel / 2;
        let oh = conv_out_extent(h, kernel, stride, pad)
            .ok_or_else(|| invalid_state!("{path}: output height is not positive for input {h}"))?;
        let ow = conv_out_extent(w, kernel, stride, pad)
            .ok_or_else(|| invalid_state!("{path}: output width is not positive for input {w}"))?;
        let layer_params = (cout * cin * kernel * kernel) as u64;
        let key = match (self.shared, self.stage) {
            (true, _) => path.to_string(),
            (false, Some(s)) => format!("stage{s}.{path}"),
            (false, None) => path.to_string(),
        };
        let fresh = self.seen_convs.insert(key);
        self.push(
            path,
            LayerKind::Conv,
            if fresh { layer_params } else { 0 },
            layer_params,
            (oh * ow * cout * cin * kernel * kernel) as u64,
            (cout, oh, ow),
        );
        Ok((cout, oh, ow))
    }

    fn bn(&mut self, path: &str, x: Shape3) {
        let p = 2 * x.0 as u64;
        self.push(path, LayerKind::BatchNorm, p, p, 0, x);
    }

    fn pool(&mut self, path: &str, x: Shape3) -> Result<Shape3> {
        let (c, h, w) = x;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid_state!("{path}: cannot halve an odd {h}x{w} feature map"));
        }
        let y = (c, h / 2, w / 2);
        self.push(path, LayerKind::AvgPool, 0, 0, 0, y);
        Ok(y)
    }

    fn push(&mut self, path: &str, kind: LayerKind, params: u64, layer_params: u64, mults: u64, out: Shape3) {
        let full = match self.stage {
            Some(s) => format!("stage{s}.{path}"),
            None => path.to_string(),
        };
        self.rows.push(CostRow {
            path: full,
            kind,
            stage: self.stage,
            params,
            layer_params,
            mults,
            out_shape: [out.0, out.1, out.2],
        });
    }

    fn block(&mut self, spec: &BlockSpec, path: &str, x: Shape3) -> Result<Shape3> {
        match *spec {
            BlockSpec::StemConv { out_channels, .. } => {
                let y = self.conv(&format!("{path}.conv"), x, out_channels, 3, 1)?;
                self.bn(&format!("{path}.bn"), y);
                Ok(y)
            }
            BlockSpec::ResidualCompartment {
                out_channels,
                units,
                downsample,
                ..
            } => {
                let mut h = x;
                for u in 0..units {
                    let stride = if u == 0 && downsample { 2 } else { 1 };
                    let p = format!("{path}.unit{u}");
                    let a = self.conv(&format!("{p}.conv1"), h, out_channels, 3, stride)?;
                    self.bn(&format!("{p}.bn1"), a);
                    let b = self.conv(&format!("{p}.conv2"), a, out_channels, 3, 1)?;
                    self.bn(&format!("{p}.bn2"), b);
                    if stride != 1 || h.0 != out_channels {
                        self.push(&format!("{p}.shortcut"), LayerKind::Shortcut, 0, 0, 0, b);
                    }
                    h = b;
                }
                Ok(h)
            }
            BlockSpec::DenseBlock {
                growth_rate, layers, ..
            } => {
                let (mut c, hh, ww) = x;
                for l in 0..layers {
                    let p = format!("{path}.layer{l}");
                    self.bn(&format!("{p}.bn"), (c, hh, ww));
                    self.conv(&format!("{p}.conv"), (c, hh, ww), growth_rate, 3, 1)?;
                    c += growth_rate;
                }
                Ok((c, hh, ww))
            }
            BlockSpec::Transition { channels } => {
                self.bn(&format!("{path}.bn"), x);
                let y = self.conv(&format!("{path}.conv"), x, channels, 1, 1)?;
                self.pool(&format!("{path}.pool"), y)
            }
        }
    }
}

fn check_input(spec: &WsmsSpec, hw: (usize, usize)) -> Result<()> {
    let need = spec.backbone.total_downsampling().max(1 << (spec.stages - 1));
    if hw.0 == 0 || hw.1 == 0 || hw.0 % need != 0 || hw.1 % need != 0 {
        return Err(invalid_state!(
            "input {}x{} cannot be resolved: extents must be divisible by {need}",
            hw.0,
            hw.1
        ));
    }
    Ok(())
}

/// Full per-layer analysis at input extent `hw`.
pub fn analyze(spec: &WsmsSpec, hw: (usize, usize)) -> Result<CostReport> {
    spec.validate()?;
    let backbone = &spec.backbone;
    check_input(spec, hw)?;
    let plan = spec.plan();
    let groups = backbone.conv_blocks();
    let mut walker = Walker {
        rows: Vec::new(),
        shared: spec.sharing == Sharing::Shared,
        seen_convs: Default::default(),
        stage: None,
    };
    let mut final_shapes = Vec::new();
    let mut level = (backbone.input_channels, hw.0, hw.1);
    for info in &plan.stages {
        if info.stage > 1 {
            walker.stage = Some(info.stage);
            level = walker.pool("pyramid", level)?;
        }
        walker.stage = Some(info.stage);
        let mut x = walker.block(&backbone.stem, "stem", level)?;
        for range in groups.iter().take(info.conv_blocks) {
            for b in range.clone() {
                x = walker.block(&backbone.blocks[b], &format!("block{b}"), x)?;
            }
        }
        if backbone.final_bn_relu {
            walker.bn("final_bn", x);
        }
        final_shapes.push(x);
    }
    walker.stage = None;
    let (_, fh, fw) = final_shapes[0];
    if final_shapes.iter().any(|&(_, h, w)| (h, w) != (fh, fw)) {
        return Err(invalid_state!("stage outputs do not share one spatial extent: {final_shapes:?}"));
    }
    let concat = (plan.concat_channels, fh, fw);
    let integrated = match spec.integration.kernel() {
        Some(kernel) => {
            let y = walker.conv("integration.conv", concat, spec.integration_channels, kernel, 1)?;
            walker.bn("integration.bn", y);
            y
        }
        None => concat,
    };
    walker.push("gap", LayerKind::GlobalPool, 0, 0, 0, (integrated.0, 1, 1));
    let fc_params = (integrated.0 * backbone.class_count + backbone.class_count) as u64;
    walker.push("fc", LayerKind::Fc, fc_params, fc_params, 0, (backbone.class_count, 1, 1));
    Ok(CostReport::from_rows(hw, walker.rows))
}

/// Exact parameter count (rows resolved at the spec's native input size).
pub fn count_params(spec: &WsmsSpec) -> Result<CostReport> {
    let s = spec.backbone.input_size;
    analyze(spec, (s, s))
}

/// Convolution multiplications per batch element at input extent `hw`.
pub fn count_mults(spec: &WsmsSpec, hw: (usize, usize)) -> Result<CostReport> {
    analyze(spec, hw)
}

/// Multiplications of each stage `s >= 2` relative to stage 1.
pub fn stage_overhead(spec: &WsmsSpec) -> Result<Vec<f64>> {
    if spec.stages < 2 {
        return Err(invalid_arg!("stage overhead needs at least two stages, got {}", spec.stages));
    }
    let report = count_params(spec)?;
    let base = report.stage_mults(1) as f64;
    Ok((2..=spec.stages)
        .map(|s| report.stage_mults(s) as f64 / base)
        .collect())
}
