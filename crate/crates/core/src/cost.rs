//! Exact multiply-accumulate and parameter counts for dense and factorized
//! convolutions, and whole-model reports.
//!
//! MACs are multiply-accumulates of convolutions and fully-connected layers.
//! Batch norm and activations contribute parameters only.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::ttconv::{select_ranks, stage_specs, RankChoice, MATRIX_ENGINE_RANK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCost {
    pub macs: u64,
    pub params: u64,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerCost {
    fn add(self, other: LayerCost) -> LayerCost {
        LayerCost {
            macs: self.macs + other.macs,
            params: self.params + other.params,
            out_h: other.out_h,
            out_w: other.out_w,
        }
    }
}

pub fn cost_dense(spec: &ConvSpec, in_h: usize, in_w: usize) -> Result<LayerCost> {
    spec.validate()?;
    let (out_h, out_w) = spec.output_dims(in_h, in_w)?;
    Ok(LayerCost {
        macs: spec.macs(in_h, in_w)?,
        params: spec.param_count() as u64,
        out_h,
        out_w,
    })
}

/// Closed-form cost of the factorized layer. The first pointwise stage runs at
/// the input resolution, the later stages at the output resolution.
pub fn cost_ttconv(spec: &ConvSpec, ranks: RankChoice, in_h: usize, in_w: usize) -> Result<LayerCost> {
    spec.validate()?;
    let (out_h, out_w) = spec.output_dims(in_h, in_w)?;
    let (c, s, l) = (spec.in_channels as u64, spec.out_channels as u64, spec.kernel as u64);
    let (hw_in, hw_out) = ((in_h * in_w) as u64, (out_h * out_w) as u64);
    let bias = if spec.has_bias { s } else { 0 };
    let (macs, params) = match ranks {
        RankChoice::Spatial { r1, r2 } => {
            if l < 2 {
                return Err(Error::Ranks("spatial ranks need a kernel of at least 2x2".into()));
            }
            let (r1, r2) = (r1 as u64, r2 as u64);
            (
                hw_in * c * r1 * r2 + hw_out * r1 * r2 * l * l + hw_out * r2 * s,
                c * r1 * r2 + r1 * l * l + r2 * s + bias,
            )
        }
        RankChoice::Pointwise { r } => {
            if l != 1 {
                return Err(Error::Ranks(format!("pointwise rank given for a {l}x{l} kernel")));
            }
            let r = r as u64;
            (hw_out * (c * r + r * s), c * r + r * s + bias)
        }
    };
    Ok(LayerCost {
        macs,
        params,
        out_h,
        out_w,
    })
}

/// Cost of running the plan's stages as ordinary convolutions.
pub fn cost_stages(spec: &ConvSpec, ranks: RankChoice, in_h: usize, in_w: usize) -> Result<LayerCost> {
    let mut total = LayerCost {
        out_h: in_h,
        out_w: in_w,
        ..LayerCost::default()
    };
    for stage in stage_specs(spec, ranks) {
        total = total.add(cost_dense(&stage, total.out_h, total.out_w)?);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ArchNode {
    Conv { name: String, spec: ConvSpec },
    TtConv { name: String, spec: ConvSpec, ranks: RankChoice },
    BatchNorm { name: String, channels: usize },
    Relu { name: String },
    MaxPool { name: String, kernel: usize, stride: usize, padding: usize },
    GlobalAvgPool { name: String },
    Linear { name: String, in_features: usize, out_features: usize, bias: bool },
    /// `main(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual { name: String, main: Vec<ArchNode>, shortcut: Vec<ArchNode> },
}

impl ArchNode {
    pub fn name(&self) -> &str {
        match self {
            ArchNode::Conv { name, .. }
            | ArchNode::TtConv { name, .. }
            | ArchNode::BatchNorm { name, .. }
            | ArchNode::Relu { name }
            | ArchNode::MaxPool { name, .. }
            | ArchNode::GlobalAvgPool { name }
            | ArchNode::Linear { name, .. }
            | ArchNode::Residual { name, .. } => name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ArchNode::Conv { .. } => "conv",
            ArchNode::TtConv { .. } => "ttconv",
            ArchNode::BatchNorm { .. } => "bn",
            ArchNode::Relu { .. } => "relu",
            ArchNode::MaxPool { .. } => "maxpool",
            ArchNode::GlobalAvgPool { .. } => "gap",
            ArchNode::Linear { .. } => "linear",
            ArchNode::Residual { .. } => "residual",
        }
    }
}

/// A layer list with its input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub name: String,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub nodes: Vec<ArchNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub layer: String,
    pub kind: &'static str,
    pub cost: LayerCost,
    /// Channel counts (or ranks) that are not multiples of 16.
    pub not_div16: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub arch: String,
    pub rows: Vec<ReportRow>,
    pub total_macs: u64,
    pub total_params: u64,
    pub out_dims: (usize, usize, usize),
}

const fn div16(n: usize) -> bool {
    n.is_multiple_of(MATRIX_ENGINE_RANK)
}

struct Walker {
    rows: Vec<ReportRow>,
}

impl Walker {
    fn push(&mut self, node: &ArchNode, cost: LayerCost, not_div16: bool) {
        self.rows.push(ReportRow {
            layer: node.name().to_string(),
            kind: node.kind(),
            cost,
            not_div16,
        });
    }

    fn conv_input(name: &str, spec: &ConvSpec, c: usize) -> Result<()> {
        if spec.in_channels != c {
            return Err(Error::Arch(format!(
                "{name}: expects {} input channels, previous layer produces {c}",
                spec.in_channels
            )));
        }
        Ok(())
    }

    fn walk(&mut self, nodes: &[ArchNode], (mut c, mut h, mut w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let at = |name: &str, e: Error| Error::Arch(format!("{name}: {e}"));
        for node in nodes {
            match node {
                ArchNode::Conv { name, spec } => {
                    Self::conv_input(name, spec, c)?;
                    let cost = cost_dense(spec, h, w).map_err(|e| at(name, e))?;
                    let flag = !div16(spec.in_channels) || !div16(spec.out_channels);
                    self.push(node, cost, flag);
                    (c, h, w) = (spec.out_channels, cost.out_h, cost.out_w);
                }
                ArchNode::TtConv { name, spec, ranks } => {
                    Self::conv_input(name, spec, c)?;
                    let cost = cost_ttconv(spec, *ranks, h, w).map_err(|e| at(name, e))?;
                    let flag = match *ranks {
                        RankChoice::Spatial { r1, r2 } => !div16(r1 * r2) || !div16(r2),
                        RankChoice::Pointwise { r } => !div16(r),
                    };
                    self.push(node, cost, flag);
                    (c, h, w) = (spec.out_channels, cost.out_h, cost.out_w);
                }
                ArchNode::BatchNorm { name, channels } => {
                    if *channels != c {
                        return Err(Error::Arch(format!("{name}: {channels} channels, input has {c}")));
                    }
                    let cost = LayerCost {
                        macs: 0,
                        params: 2 * c as u64,
                        out_h: h,
                        out_w: w,
                    };
                    self.push(node, cost, false);
                }
                ArchNode::Relu { .. } => {
                    let cost = LayerCost {
                        out_h: h,
                        out_w: w,
                        ..LayerCost::default()
                    };
                    self.push(node, cost, false);
                }
                ArchNode::MaxPool {
                    name,
                    kernel,
                    stride,
                    padding,
                } => {
                    let spec = ConvSpec::new(c, c, *kernel).stride(*stride).padding(*padding);
                    let (oh, ow) = spec.output_dims(h, w).map_err(|e| at(name, e))?;
                    let cost = LayerCost {
                        out_h: oh,
                        out_w: ow,
                        ..LayerCost::default()
                    };
                    self.push(node, cost, false);
                    (h, w) = (oh, ow);
                }
                ArchNode::GlobalAvgPool { .. } => {
                    let cost = LayerCost {
                        out_h: 1,
                        out_w: 1,
                        ..LayerCost::default()
                    };
                    self.push(node, cost, false);
                    (h, w) = (1, 1);
                }
                ArchNode::Linear {
                    name,
                    in_features,
                    out_features,
                    bias,
                } => {
                    if *in_features != c * h * w {
                        return Err(Error::Arch(format!(
                            "{name}: expects {in_features} features, input has {}",
                            c * h * w
                        )));
                    }
                    let (i, o) = (*in_features as u64, *out_features as u64);
                    let cost = LayerCost {
                        macs: i * o,
                        params: i * o + if *bias { o } else { 0 },
                        out_h: 1,
                        out_w: 1,
                    };
                    self.push(node, cost, false);
                    (c, h, w) = (*out_features, 1, 1);
                }
                ArchNode::Residual { name, main, shortcut } => {
                    let a = self.walk(main, (c, h, w))?;
                    let b = self.walk(shortcut, (c, h, w))?;
                    if a != b {
                        return Err(Error::Arch(format!(
                            "{name}: branch outputs differ, main {a:?} vs shortcut {b:?}"
                        )));
                    }
                    let cost = LayerCost {
                        out_h: a.1,
                        out_w: a.2,
                        ..LayerCost::default()
                    };
                    self.rows.push(ReportRow {
                        layer: format!("{name}.add"),
                        kind: "add",
                        cost,
                        not_div16: false,
                    });
                    (c, h, w) = a;
                }
            }
        }
        Ok((c, h, w))
    }
}

pub fn model_report(arch: &Arch) -> Result<ModelReport> {
    let mut walker = Walker { rows: Vec::new() };
    let out_dims = walker.walk(&arch.nodes, (arch.in_channels, arch.in_h, arch.in_w))?;
    let total_macs = walker.rows.iter().map(|r| r.cost.macs).sum();
    let total_params = walker.rows.iter().map(|r| r.cost.params).sum();
    Ok(ModelReport {
        arch: arch.name.clone(),
        rows: walker.rows,
        total_macs,
        total_params,
        out_dims,
    })
}

impl ModelReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,macs,params,out_h,out_w\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.layer, r.kind, r.cost.macs, r.cost.params, r.cost.out_h, r.cost.out_w
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "model: {}", self.arch);
        let _ = writeln!(out, "MACs are multiply-accumulates of conv and linear layers");
        let _ = writeln!(
            out,
            "{:<width$}  {:<8} {:>15} {:>12} {:>9}  note",
            "layer", "kind", "macs", "params", "out"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<8} {:>15} {:>12} {:>9}  {}",
                r.layer,
                r.kind,
                r.cost.macs,
                r.cost.params,
                format!("{}x{}", r.cost.out_h, r.cost.out_w),
                if r.not_div16 { "channels not divisible by 16" } else { "" }
            );
        }
        let _ = writeln!(
            out,
            "total: {} MACs ({:.3} G), {} params ({:.3} M)",
            self.total_macs,
            self.total_macs as f64 / 1e9,
            self.total_params,
            self.total_params as f64 / 1e6
        );
        out
    }
}

/// Replaces every eligible convolution with its factorized form at the
/// heuristic ranks.
pub fn decompose_arch(arch: &Arch) -> Arch {
    fn map(nodes: &[ArchNode]) -> Vec<ArchNode> {
        nodes
            .iter()
            .map(|n| match n {
                ArchNode::Conv { name, spec } => match select_ranks(spec) {
                    Some(ranks) => ArchNode::TtConv {
                        name: name.clone(),
                        spec: *spec,
                        ranks,
                    },
                    None => n.clone(),
                },
                ArchNode::Residual { name, main, shortcut } => ArchNode::Residual {
                    name: name.clone(),
                    main: map(main),
                    shortcut: map(shortcut),
                },
                other => other.clone(),
            })
            .collect()
    }
    Arch {
        name: format!("{}-decomposed", arch.name),
        nodes: map(&arch.nodes),
        ..arch.clone()
    }
}

fn conv(name: impl Into<String>, c: usize, s: usize, l: usize, stride: usize, pad: usize) -> ArchNode {
    ArchNode::Conv {
        name: name.into(),
        spec: ConvSpec::new(c, s, l).stride(stride).padding(pad),
    }
}

fn bn(name: impl Into<String>, channels: usize) -> ArchNode {
    ArchNode::BatchNorm {
        name: name.into(),
        channels,
    }
}

fn relu(name: impl Into<String>) -> ArchNode {
    ArchNode::Relu { name: name.into() }
}

/// Torchvision-style ResNet-18/34 (basic blocks) and 50/101 (bottlenecks with
/// the stride on the 3×3 conv), 1000 classes.
pub fn resnet(depth: usize, res: usize) -> Result<Arch> {
    let (bottleneck, blocks): (bool, [usize; 4]) = match depth {
        18 => (false, [2, 2, 2, 2]),
        34 => (false, [3, 4, 6, 3]),
        50 => (true, [3, 4, 6, 3]),
        101 => (true, [3, 4, 23, 3]),
        _ => return Err(Error::Arch(format!("no ResNet preset of depth {depth}"))),
    };
    let expansion = if bottleneck { 4 } else { 1 };
    let mut nodes = vec![
        conv("conv1", 3, 64, 7, 2, 3),
        bn("bn1", 64),
        relu("relu"),
        ArchNode::MaxPool {
            name: "maxpool".into(),
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    ];
    let mut c = 64;
    for (stage, &count) in blocks.iter().enumerate() {
        let width = 64 << stage;
        for b in 0..count {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let p = format!("layer{}.{b}", stage + 1);
            let out = width * expansion;
            let main = if bottleneck {
                vec![
                    conv(format!("{p}.conv1"), c, width, 1, 1, 0),
                    bn(format!("{p}.bn1"), width),
                    relu(format!("{p}.relu1")),
                    conv(format!("{p}.conv2"), width, width, 3, stride, 1),
                    bn(format!("{p}.bn2"), width),
                    relu(format!("{p}.relu2")),
                    conv(format!("{p}.conv3"), width, out, 1, 1, 0),
                    bn(format!("{p}.bn3"), out),
                ]
            } else {
                vec![
                    conv(format!("{p}.conv1"), c, width, 3, stride, 1),
                    bn(format!("{p}.bn1"), width),
                    relu(format!("{p}.relu1")),
                    conv(format!("{p}.conv2"), width, width, 3, 1, 1),
                    bn(format!("{p}.bn2"), width),
                ]
            };
            let shortcut = if stride != 1 || c != out {
                vec![
                    conv(format!("{p}.downsample.0"), c, out, 1, stride, 0),
                    bn(format!("{p}.downsample.1"), out),
                ]
            } else {
                Vec::new()
            };
            nodes.push(ArchNode::Residual {
                name: p.clone(),
                main,
                shortcut,
            });
            nodes.push(relu(format!("{p}.relu")));
            c = out;
        }
    }
    nodes.push(ArchNode::GlobalAvgPool { name: "avgpool".into() });
    nodes.push(ArchNode::Linear {
        name: "fc".into(),
        in_features: c,
        out_features: 1000,
        bias: true,
    });
    Ok(Arch {
        name: format!("resnet{depth}"),
        in_channels: 3,
        in_h: res,
        in_w: res,
        nodes,
    })
}

/// Number of classes of the trainable toy network.
pub const TOY_CLASSES: usize = 4;
/// Width of the toy network's residual stage.
pub const TOY_WIDTH: usize = 128;
pub const TOY_BLOCKS: usize = 3;

/// The trainable toy ResNet: a stride-2 stem to 32 channels, a stride-2
/// transition to 128, three basic blocks at 128 channels, pooling and a
/// linear classifier. Six of its convolutions are eligible for factorization.
pub fn toy_arch(res: usize) -> Arch {
    toy_arch_with_classes(res, TOY_CLASSES)
}

pub fn toy_arch_with_classes(res: usize, classes: usize) -> Arch {
    let w = TOY_WIDTH;
    let mut nodes = vec![
        conv("stem", 3, 32, 3, 2, 1),
        bn("stem.bn", 32),
        relu("stem.relu"),
        conv("transition", 32, w, 3, 2, 1),
        bn("transition.bn", w),
        relu("transition.relu"),
    ];
    for b in 0..TOY_BLOCKS {
        let p = format!("block{b}");
        nodes.push(ArchNode::Residual {
            name: p.clone(),
            main: vec![
                conv(format!("{p}.conv1"), w, w, 3, 1, 1),
                bn(format!("{p}.bn1"), w),
                relu(format!("{p}.relu1")),
                conv(format!("{p}.conv2"), w, w, 3, 1, 1),
                bn(format!("{p}.bn2"), w),
            ],
            shortcut: Vec::new(),
        });
        nodes.push(relu(format!("{p}.relu")));
    }
    nodes.push(ArchNode::GlobalAvgPool { name: "pool".into() });
    nodes.push(ArchNode::Linear {
        name: "fc".into(),
        in_features: w,
        out_features: classes,
        bias: true,
    });
    Arch {
        name: "toy".into(),
        in_channels: 3,
        in_h: res,
        in_w: res,
        nodes,
    }
}

/// `resnet18`, `resnet34`, `resnet50`, `resnet101` or `toy`.
pub fn preset(name: &str, res: usize) -> Result<Arch> {
    match name {
        "toy" => Ok(toy_arch(res)),
        _ => match name.strip_prefix("resnet").and_then(|d| d.parse().ok()) {
            Some(depth) => resnet(depth, res),
            None => Err(Error::Arch(format!("unknown architecture `{name}`"))),
        },
    }
}

/// Line-based architecture description:
///
/// ```text
/// input <channels> <height> <width>
/// conv <name> <in> <out> <kernel> [stride=N] [pad=N] [bias]
/// ttconv <name> <in> <out> <kernel> [stride=N] [pad=N] [bias] [r1=N r2=N | r=N]
/// bn <name> <channels>
/// relu <name>
/// maxpool <name> <kernel> [stride=N] [pad=N]
/// gap <name>
/// linear <name> <in> <out> [bias]
/// residual <name>   ...main...   shortcut   ...shortcut...   end
/// ```
///
/// `#` starts a comment. A `ttconv` without ranks takes the heuristic ones.
pub fn parse_arch(name: &str, text: &str) -> Result<Arch> {
    struct Open {
        name: String,
        main: Vec<ArchNode>,
        shortcut: Option<Vec<ArchNode>>,
    }
    let mut input = None;
    let mut root: Vec<ArchNode> = Vec::new();
    let mut stack: Vec<Open> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Arch(format!("line {}: {msg}", lineno + 1));
        let mut positional = Vec::new();
        let mut options = std::collections::BTreeMap::new();
        let mut flags = Vec::new();
        let mut tokens = line.split_whitespace();
        let keyword = tokens.next().unwrap_or_default();
        for tok in tokens {
            if let Some((k, v)) = tok.split_once('=') {
                let v: usize = v.parse().map_err(|_| err(format!("`{tok}` is not key=integer")))?;
                options.insert(k.to_string(), v);
            } else if tok.chars().all(|ch| ch.is_ascii_digit()) {
                positional.push(tok.parse::<usize>().map_err(|e| err(e.to_string()))?);
            } else {
                flags.push(tok.to_string());
            }
        }
        // first non-numeric token is the layer name
        let layer_name = if flags.is_empty() { None } else { Some(flags.remove(0)) };
        let need = |n: usize| -> Result<()> {
            if positional.len() != n {
                return Err(err(format!("`{keyword}` takes {n} integer arguments, got {}", positional.len())));
            }
            Ok(())
        };
        let named = || layer_name.clone().ok_or_else(|| err(format!("`{keyword}` needs a name")));
        let has_bias = flags.iter().any(|f| f == "bias");
        if let Some(other) = flags.iter().find(|f| *f != "bias") {
            return Err(err(format!("unexpected token `{other}`")));
        }
        let opt = |k: &str, default: usize| options.get(k).copied().unwrap_or(default);

        let node = match keyword {
            "input" => {
                need(3)?;
                input = Some((positional[0], positional[1], positional[2]));
                continue;
            }
            "conv" | "ttconv" => {
                need(3)?;
                let spec = ConvSpec::new(positional[0], positional[1], positional[2])
                    .stride(opt("stride", 1))
                    .padding(opt("pad", 0))
                    .bias(has_bias);
                if keyword == "conv" {
                    ArchNode::Conv { name: named()?, spec }
                } else {
                    let ranks = match (options.get("r1"), options.get("r2"), options.get("r")) {
                        (Some(&r1), Some(&r2), None) => RankChoice::spatial(r1, r2)?,
                        (None, None, Some(&r)) => RankChoice::pointwise(r)?,
                        (None, None, None) => select_ranks(&spec)
                            .ok_or_else(|| err("layer is not eligible for the rank heuristic".into()))?,
                        _ => return Err(err("give either r1 and r2, or r".into())),
                    };
                    ArchNode::TtConv {
                        name: named()?,
                        spec,
                        ranks,
                    }
                }
            }
            "bn" => {
                need(1)?;
                bn(named()?, positional[0])
            }
            "relu" => {
                need(0)?;
                relu(named()?)
            }
            "maxpool" => {
                need(1)?;
                ArchNode::MaxPool {
                    name: named()?,
                    kernel: positional[0],
                    stride: opt("stride", positional[0]),
                    padding: opt("pad", 0),
                }
            }
            "gap" => {
                need(0)?;
                ArchNode::GlobalAvgPool { name: named()? }
            }
            "linear" => {
                need(2)?;
                ArchNode::Linear {
                    name: named()?,
                    in_features: positional[0],
                    out_features: positional[1],
                    bias: has_bias,
                }
            }
            "residual" => {
                need(0)?;
                stack.push(Open {
                    name: named()?,
                    main: Vec::new(),
                    shortcut: None,
                });
                continue;
            }
            "shortcut" => {
                let open = stack.last_mut().ok_or_else(|| err("`shortcut` outside a residual".into()))?;
                if open.shortcut.is_some() {
                    return Err(err("second `shortcut` in one residual".into()));
                }
                open.shortcut = Some(Vec::new());
                continue;
            }
            "end" => {
                let open = stack.pop().ok_or_else(|| err("`end` without a residual".into()))?;
                ArchNode::Residual {
                    name: open.name,
                    main: open.main,
                    shortcut: open.shortcut.unwrap_or_default(),
                }
            }
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        };
        match stack.last_mut() {
            Some(Open {
                shortcut: Some(list), ..
            }) => list.push(node),
            Some(open) => open.main.push(node),
            None => root.push(node),
        }
    }
    if let Some(open) = stack.last() {
        return Err(Error::Arch(format!("residual `{}` is not closed", open.name)));
    }
    let (in_channels, in_h, in_w) = input.ok_or_else(|| Error::Arch("missing `input` line".into()))?;
    Ok(Arch {
        name: name.to_string(),
        in_channels,
        in_h,
        in_w,
        nodes: root,
    })
}

impl Arch {
    /// Serializes to the format read by [`parse_arch`].
    pub fn to_text(&self) -> String {
        fn conv_line(out: &mut String, kw: &str, name: &str, spec: &ConvSpec) {
            let _ = write!(
                out,
                "{kw} {name} {} {} {} stride={} pad={}",
                spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding
            );
            if spec.has_bias {
                out.push_str(" bias");
            }
        }
        fn emit(out: &mut String, nodes: &[ArchNode], depth: usize) {
            for node in nodes {
                out.push_str(&"  ".repeat(depth));
                match node {
                    ArchNode::Conv { name, spec } => conv_line(out, "conv", name, spec),
                    ArchNode::TtConv { name, spec, ranks } => {
                        conv_line(out, "ttconv", name, spec);
                        let _ = match ranks {
                            RankChoice::Spatial { r1, r2 } => write!(out, " r1={r1} r2={r2}"),
                            RankChoice::Pointwise { r } => write!(out, " r={r}"),
                        };
                    }
                    ArchNode::BatchNorm { name, channels } => {
                        let _ = write!(out, "bn {name} {channels}");
                    }
                    ArchNode::Relu { name } => {
                        let _ = write!(out, "relu {name}");
                    }
                    ArchNode::MaxPool {
                        name,
                        kernel,
                        stride,
                        padding,
                    } => {
                        let _ = write!(out, "maxpool {name} {kernel} stride={stride} pad={padding}");
                    }
                    ArchNode::GlobalAvgPool { name } => {
                        let _ = write!(out, "gap {name}");
                    }
                    ArchNode::Linear {
                        name,
                        in_features,
                        out_features,
                        bias,
                    } => {
                        let _ = write!(out, "linear {name} {in_features} {out_features}");
                        if *bias {
                            out.push_str(" bias");
                        }
                    }
                    ArchNode::Residual { name, main, shortcut } => {
                        let _ = writeln!(out, "residual {name}");
                        emit(out, main, depth + 1);
                        if !shortcut.is_empty() {
                            out.push_str(&"  ".repeat(depth));
                            out.push_str("shortcut\n");
                            emit(out, shortcut, depth + 1);
                        }
                        out.push_str(&"  ".repeat(depth));
                        out.push_str("end");
                    }
                }
                out.push('\n');
            }
        }
        let mut out = format!("input {} {} {}\n", self.in_channels, self.in_h, self.in_w);
        emit(&mut out, &self.nodes, 0);
        out
    }

    /// Every plain convolution, in traversal order.
    pub fn convs(&self) -> Vec<(&str, &ConvSpec)> {
        fn walk<'a>(nodes: &'a [ArchNode], out: &mut Vec<(&'a str, &'a ConvSpec)>) {
            for n in nodes {
                match n {
                    ArchNode::Conv { name, spec } => out.push((name, spec)),
                    ArchNode::Residual { main, shortcut, .. } => {
                        walk(main, out);
                        walk(shortcut, out);
                    }
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.nodes, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_example() {
        let spec = ConvSpec::new(256, 256, 3).padding(1);
        let c = cost_dense(&spec, 14, 14).unwrap();
        assert_eq!(c.macs, 115_605_504);
        assert_eq!(c.params, 589_824);
        assert_eq!(cost_dense(&ConvSpec::new(16, 16, 1), 1, 1).unwrap().macs, 256);
        let s = cost_dense(&ConvSpec::new(4, 4, 3).stride(2).padding(1), 8, 8).unwrap();
        assert_eq!((s.out_h, s.out_w), (4, 4));
    }

    #[test]
    fn ttconv_examples() {
        let spec = ConvSpec::new(256, 256, 3).padding(1);
        let c = cost_ttconv(&spec, RankChoice::Spatial { r1: 4, r2: 16 }, 14, 14).unwrap();
        assert_eq!(c.macs, 3_211_264 + 112_896 + 802_816);
        assert_eq!(c.params, 16_384 + 36 + 4_096);
        let small = ConvSpec::new(128, 128, 3).padding(1);
        let c = cost_ttconv(&small, RankChoice::Spatial { r1: 2, r2: 16 }, 8, 8).unwrap();
        assert_eq!(c.params, 6_162);
        assert!(c.params < cost_dense(&small, 8, 8).unwrap().params);
    }

    #[test]
    fn closed_form_matches_stage_sum() {
        for (c, s, l, stride, pad) in [(128, 256, 3, 2, 1), (256, 128, 1, 2, 0), (512, 512, 3, 1, 1), (7, 5, 5, 3, 2)] {
            let spec = ConvSpec::new(c, s, l).stride(stride).padding(pad).bias(c == 7);
            let ranks = if l == 1 {
                RankChoice::Pointwise { r: 16 }
            } else {
                RankChoice::Spatial { r1: 3, r2: 5 }
            };
            assert_eq!(cost_ttconv(&spec, ranks, 13, 11).unwrap(), cost_stages(&spec, ranks, 13, 11).unwrap());
        }
    }

    #[test]
    fn heuristic_always_shrinks() {
        for c in [128, 256, 512] {
            for s in [128, 256, 512] {
                for l in [1, 3] {
                    let spec = ConvSpec::new(c, s, l).padding(l / 2);
                    let ranks = select_ranks(&spec).unwrap();
                    let dense = cost_dense(&spec, 14, 14).unwrap();
                    let tt = cost_ttconv(&spec, ranks, 14, 14).unwrap();
                    assert!(tt.params < dense.params && tt.macs < dense.macs, "{c} {s} {l}");
                }
            }
        }
    }

    #[test]
    fn single_conv_model() {
        let spec = ConvSpec::new(3, 8, 3).padding(1);
        let arch = Arch {
            name: "one".into(),
            in_channels: 3,
            in_h: 10,
            in_w: 10,
            nodes: vec![ArchNode::Conv {
                name: "c".into(),
                spec,
            }],
        };
        let r = model_report(&arch).unwrap();
        let d = cost_dense(&spec, 10, 10).unwrap();
        assert_eq!((r.total_macs, r.total_params), (d.macs, d.params));
    }

    #[test]
    fn resnet_counts() {
        let r18 = model_report(&resnet(18, 224).unwrap()).unwrap();
        assert_eq!(r18.total_params, 11_689_512);
        let r50 = model_report(&resnet(50, 224).unwrap()).unwrap();
        assert_eq!(r50.total_params, 25_557_032);
        assert_eq!(r50.out_dims, (1000, 1, 1));
    }

    #[test]
    fn text_round_trip() {
        for arch in [resnet(50, 224).unwrap(), decompose_arch(&toy_arch(16))] {
            let again = parse_arch(&arch.name, &arch.to_text()).unwrap();
            assert_eq!(again, arch);
        }
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_arch("x", "input 3 8 8\nsoftmax s\n"),
            Err(Error::UnknownLayerKind(k)) if k == "softmax"
        ));
        assert!(parse_arch("x", "conv c 3 3 3\n").is_err());
        assert!(parse_arch("x", "input 3 8 8\nresidual r\nrelu a\n").is_err());
        let bad = parse_arch("x", "input 3 8 8\nconv c 4 4 3\n").unwrap();
        assert!(model_report(&bad).is_err());
    }

    #[test]
    fn toy_has_six_eligible_layers() {
        let toy = toy_arch(16);
        let eligible = toy.convs().iter().filter(|(_, s)| select_ranks(s).is_some()).count();
        assert_eq!(eligible, 6);
        let report = model_report(&toy).unwrap();
        let summed: u64 = report.rows.iter().map(|r| r.cost.macs).sum();
        assert_eq!(summed, report.total_macs);
    }

    #[test]
    fn divisibility_flag() {
        let arch = parse_arch("x", "input 3 8 8\nconv a 3 16 3 pad=1\nconv b 16 32 1\n").unwrap();
        let r = model_report(&arch).unwrap();
        assert!(r.rows[0].not_div16);
        assert!(!r.rows[1].not_div16);
    }
}
