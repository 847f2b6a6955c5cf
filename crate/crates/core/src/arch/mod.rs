//! Layer-graph construction, validity, parameter count and MAC estimate.
//!
//! Scaling follows the Ultralytics `parse_model` conventions:
//!
//! | quantity | rule |
//! |----------|------|
//! | repeats  | `n > 1` ⇒ `max(round(n · depth), 1)` with round-half-even, else `n` |
//! | channels | `c2 != nc` ⇒ `ceil(min(c2, max_channels) · width / 8) · 8`, else `c2` |
//! | `from`   | negative = offset back from the current layer; `-1` at layer 0 is the image |
//!
//! `max_channels` is unbounded unless a `scales` row is selected.

mod modules;

pub use modules::{
    attention_dims, conv_out, expand, lookup, ChannelRule, ConvPrim, Expansion, ModuleKind,
    ModuleOp, ModuleSig, RepeatRule, MODULE_TABLE, REG_MAX,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genome::{parse_genome, ArgValue, GeMode, GenomeError, ModelGenome};

/// Input channels of the image fed to layer 0.
pub const INPUT_CHANNELS: u64 = 3;

/// Default reference resolution for cost estimates.
pub const DEFAULT_IMGSZ: u64 = 640;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ArchError {
    #[error("layer {layer}: input index {from} resolves outside 0..{layer}")]
    IndexOutOfRange { layer: usize, from: i64 },
    #[error("layer {layer}: unknown module `{module}`")]
    UnknownModule { layer: usize, module: String },
    #[error("layer {layer} ({module}): {reason}")]
    BadArgs {
        layer: usize,
        module: String,
        reason: String,
    },
    #[error("layer {layer}: channel mismatch: {reason}")]
    ChannelMismatch { layer: usize, reason: String },
    #[error("layer {layer}: inputs have different spatial strides")]
    SpatialMismatch { layer: usize },
    #[error("no Detect-family head as the final layer")]
    NoDetectHead,
    #[error("unknown scale `{0}`")]
    UnknownScale(String),
}

/// Machine-readable diagnostic codes used in run accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiagnosticCode {
    YamlSyntax,
    MissingSection,
    MalformedLayer,
    InvalidParams,
    IndexOutOfRange,
    UnknownModule,
    BadArgs,
    ChannelMismatch,
    SpatialMismatch,
    NoDetectHead,
    UnknownScale,
    OperatorFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: DiagnosticCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
}

impl Diagnostic {
    pub fn new(code: DiagnosticCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
            layer: None,
            line: None,
        }
    }
}

impl From<&GenomeError> for Diagnostic {
    fn from(e: &GenomeError) -> Self {
        let code = match e {
            GenomeError::YamlSyntax { .. } => DiagnosticCode::YamlSyntax,
            GenomeError::MissingSection { .. } => DiagnosticCode::MissingSection,
            GenomeError::MalformedLayer { .. } => DiagnosticCode::MalformedLayer,
            GenomeError::InvalidParams { .. } | GenomeError::BlockLayout { .. } => {
                DiagnosticCode::InvalidParams
            }
        };
        Self {
            code,
            message: e.to_string(),
            layer: None,
            line: e.line(),
        }
    }
}

impl From<&ArchError> for Diagnostic {
    fn from(e: &ArchError) -> Self {
        let (code, layer) = match e {
            ArchError::IndexOutOfRange { layer, .. } => (DiagnosticCode::IndexOutOfRange, Some(*layer)),
            ArchError::UnknownModule { layer, .. } => (DiagnosticCode::UnknownModule, Some(*layer)),
            ArchError::BadArgs { layer, .. } => (DiagnosticCode::BadArgs, Some(*layer)),
            ArchError::ChannelMismatch { layer, .. } => (DiagnosticCode::ChannelMismatch, Some(*layer)),
            ArchError::SpatialMismatch { layer } => (DiagnosticCode::SpatialMismatch, Some(*layer)),
            ArchError::NoDetectHead => (DiagnosticCode::NoDetectHead, None),
            ArchError::UnknownScale(_) => (DiagnosticCode::UnknownScale, None),
        };
        Self {
            code,
            message: e.to_string(),
            layer,
            line: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityVerdict {
    pub valid: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidityVerdict {
    fn ok() -> Self {
        Self {
            valid: true,
            diagnostics: Vec::new(),
        }
    }

    fn fail(d: Diagnostic) -> Self {
        Self {
            valid: false,
            diagnostics: vec![d],
        }
    }

    pub fn codes(&self) -> Vec<DiagnosticCode> {
        self.diagnostics.iter().map(|d| d.code).collect()
    }
}

/// Where a node reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeInput {
    Image,
    Layer(usize),
}

/// Downsampling factor relative to the input image, as a reduced fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Stride {
    pub down: u64,
    pub up: u64,
}

impl Stride {
    pub const UNIT: Stride = Stride { down: 1, up: 1 };

    fn reduced(down: u64, up: u64) -> Self {
        let g = num_integer::gcd(down, up).max(1);
        Self {
            down: down / g,
            up: up / g,
        }
    }

    fn downsample(self, s: u64) -> Self {
        Self::reduced(self.down * s, self.up)
    }

    fn upsample(self, f: u64) -> Self {
        Self::reduced(self.down, self.up * f)
    }

    pub fn as_f64(self) -> f64 {
        self.down as f64 / self.up as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphNode {
    pub index: usize,
    pub token: String,
    pub kind: ModuleKind,
    pub inputs: Vec<NodeInput>,
    pub repeats: u32,
    /// Repeat count after depth scaling.
    pub effective_repeats: u64,
    /// Number of stacked module instances (1 when repeats are internal).
    pub instances: u64,
    pub c_in: Vec<u64>,
    pub c_out: u64,
    pub stride: Stride,
    pub op: ModuleOp,
}

/// Resolved layer DAG with propagated channels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchGraph {
    pub nodes: Vec<GraphNode>,
    pub nc: u64,
    pub depth: f64,
    pub width: f64,
    pub max_channels: Option<u64>,
    pub scale: Option<String>,
}

impl ArchGraph {
    /// Index of the terminal detection node.
    pub fn detect_node(&self) -> &GraphNode {
        self.nodes.last().expect("graphs always end in a head")
    }

    /// Layers feeding the detection head.
    pub fn detect_inputs(&self) -> Vec<usize> {
        self.detect_node()
            .inputs
            .iter()
            .filter_map(|i| match i {
                NodeInput::Layer(l) => Some(*l),
                NodeInput::Image => None,
            })
            .collect()
    }

    /// Number of distinct strides among the detection head's inputs.
    pub fn head_coverage(&self) -> usize {
        let mut strides: Vec<Stride> = self
            .detect_inputs()
            .into_iter()
            .map(|i| self.nodes[i].stride)
            .collect();
        strides.sort_by(|a, b| a.as_f64().total_cmp(&b.as_f64()));
        strides.dedup();
        strides.len()
    }
}

fn make_divisible(x: f64, divisor: u64) -> u64 {
    ((x / divisor as f64).ceil() as u64) * divisor
}

/// Python's `ast.literal_eval`/`locals()` treatment of string arguments.
fn resolve_arg(arg: &ArgValue, nc: u64) -> ArgValue {
    match arg {
        ArgValue::Str(s) => match s.as_str() {
            "nc" => ArgValue::Int(nc as i64),
            "None" => ArgValue::Null,
            "True" => ArgValue::Bool(true),
            "False" => ArgValue::Bool(false),
            other => other
                .parse::<i64>()
                .map(ArgValue::Int)
                .or_else(|_| other.parse::<f64>().map(ArgValue::Float))
                .unwrap_or_else(|_| arg.clone()),
        },
        ArgValue::List(items) => ArgValue::List(items.iter().map(|a| resolve_arg(a, nc)).collect()),
        other => other.clone(),
    }
}

struct ArgReader<'a> {
    layer: usize,
    module: &'a str,
    args: Vec<ArgValue>,
}

impl ArgReader<'_> {
    fn bad(&self, reason: impl Into<String>) -> ArchError {
        ArchError::BadArgs {
            layer: self.layer,
            module: self.module.to_string(),
            reason: reason.into(),
        }
    }

    fn get(&self, i: usize) -> Option<&ArgValue> {
        self.args.get(i)
    }

    fn positive(&self, i: usize, default: u64, what: &str) -> Result<u64, ArchError> {
        match self.get(i) {
            None => Ok(default),
            Some(ArgValue::Int(v)) if *v >= 1 => Ok(*v as u64),
            Some(other) => Err(self.bad(format!("{what} must be a positive integer, got {other}"))),
        }
    }

    fn flag(&self, i: usize, default: bool, what: &str) -> Result<bool, ArchError> {
        match self.get(i) {
            None => Ok(default),
            Some(ArgValue::Bool(b)) => Ok(*b),
            Some(ArgValue::Int(v)) if *v == 0 || *v == 1 => Ok(*v == 1),
            Some(other) => Err(self.bad(format!("{what} must be a boolean, got {other}"))),
        }
    }

    fn fraction(&self, i: usize, default: f64, what: &str) -> Result<f64, ArchError> {
        let v = match self.get(i) {
            None => return Ok(default),
            Some(ArgValue::Float(f)) => *f,
            Some(ArgValue::Int(v)) => *v as f64,
            Some(other) => return Err(self.bad(format!("{what} must be a number, got {other}"))),
        };
        if v > 0.0 && v <= 1.0 {
            Ok(v)
        } else {
            Err(self.bad(format!("{what} must lie in (0, 1], got {v}")))
        }
    }

    fn int_list(&self, i: usize, default: &[u64], what: &str) -> Result<Vec<u64>, ArchError> {
        match self.get(i) {
            None => Ok(default.to_vec()),
            Some(ArgValue::List(items)) if !items.is_empty() => items
                .iter()
                .map(|a| match a {
                    ArgValue::Int(v) if *v >= 1 => Ok(*v as u64),
                    other => Err(self.bad(format!("{what} entries must be positive integers, got {other}"))),
                })
                .collect(),
            Some(other) => Err(self.bad(format!("{what} must be a list of integers, got {other}"))),
        }
    }
}

/// Resolves the scaling constants for a genome and optional scale letter.
fn scaling(g: &ModelGenome, scale: Option<&str>) -> Result<(f64, f64, Option<u64>, Option<String>), ArchError> {
    let p = g.params();
    if p.scales.is_empty() {
        if let Some(s) = scale {
            return Err(ArchError::UnknownScale(s.to_string()));
        }
        return Ok((
            p.depth_multiple.unwrap_or(1.0),
            p.width_multiple.unwrap_or(1.0),
            None,
            None,
        ));
    }
    let row = match scale {
        Some(s) => p.scale(s).ok_or_else(|| ArchError::UnknownScale(s.to_string()))?,
        None => &p.scales[0],
    };
    Ok((row.depth, row.width, Some(row.max_channels), Some(row.name.clone())))
}

/// Builds the layer DAG, resolving indices and propagating channels.
pub fn build_graph(g: &ModelGenome, scale: Option<&str>) -> Result<ArchGraph, ArchError> {
    let (depth, width, max_channels, scale_name) = scaling(g, scale)?;
    let nc = g.params().nc as u64;
    let layers: Vec<_> = g.layers().collect();
    let last = layers.len().checked_sub(1);
    let mut nodes: Vec<GraphNode> = Vec::with_capacity(layers.len());

    for (i, layer) in layers.iter().enumerate() {
        let sig = lookup(&layer.module).ok_or_else(|| ArchError::UnknownModule {
            layer: i,
            module: layer.module.clone(),
        })?;
        let reader = ArgReader {
            layer: i,
            module: &layer.module,
            args: layer.args.iter().map(|a| resolve_arg(a, nc)).collect(),
        };
        if reader.args.len() < sig.min_args || reader.args.len() > sig.max_args {
            return Err(reader.bad(format!(
                "expected {}..={} args, found {}",
                sig.min_args,
                sig.max_args,
                reader.args.len()
            )));
        }

        let mut inputs = Vec::new();
        for &f in layer.from.indices() {
            let target = if f < 0 { i as i64 + f } else { f };
            if i == 0 && f == -1 {
                inputs.push(NodeInput::Image);
            } else if target < 0 || target >= i as i64 {
                return Err(ArchError::IndexOutOfRange { layer: i, from: f });
            } else {
                inputs.push(NodeInput::Layer(target as usize));
            }
        }
        let multi_input = matches!(sig.kind, ModuleKind::Concat | ModuleKind::Detect | ModuleKind::V10Detect);
        let is_list = matches!(layer.from, crate::genome::LayerSource::Multi(_));
        if multi_input && !is_list {
            return Err(reader.bad("`from` must be a list for this module"));
        }
        if !multi_input && inputs.len() != 1 {
            return Err(reader.bad("module takes exactly one input"));
        }
        if let Some(NodeInput::Layer(src)) = inputs.iter().find(|inp| match inp {
            NodeInput::Layer(l) => nodes[*l].kind.is_detect(),
            NodeInput::Image => false,
        }) {
            return Err(reader.bad(format!("layer {src} is a detection head and has no feature map")));
        }
        let c_in: Vec<u64> = inputs
            .iter()
            .map(|inp| match inp {
                NodeInput::Image => INPUT_CHANNELS,
                NodeInput::Layer(l) => nodes[*l].c_out,
            })
            .collect();
        let strides: Vec<Stride> = inputs
            .iter()
            .map(|inp| match inp {
                NodeInput::Image => Stride::UNIT,
                NodeInput::Layer(l) => nodes[*l].stride,
            })
            .collect();
        let c1 = c_in[0];
        let stride_in = strides[0];

        let raw = layer.repeats as u64;
        let effective = if raw > 1 {
            ((raw as f64 * depth).round_ties_even() as u64).max(1)
        } else {
            raw
        };
        let instances = match sig.repeat_rule {
            RepeatRule::Sequential => effective,
            RepeatRule::Internal => 1,
            RepeatRule::Single => {
                if effective != 1 {
                    return Err(reader.bad("module cannot be repeated"));
                }
                1
            }
        };

        let c_out = match sig.channel_rule {
            ChannelRule::FromFirstArg => {
                let c2 = match reader.get(0) {
                    Some(ArgValue::Int(v)) if *v >= 1 => *v as u64,
                    Some(other) => return Err(reader.bad(format!("output channels must be a positive integer, got {other}"))),
                    None => return Err(reader.bad("missing output channels")),
                };
                if c2 != nc {
                    let capped = max_channels.map_or(c2, |m| c2.min(m));
                    make_divisible(capped as f64 * width, 8)
                } else {
                    c2
                }
            }
            ChannelRule::SumInputs => c_in.iter().sum(),
            ChannelRule::PassThrough => c1,
            ChannelRule::Head => 0,
        };

        let mut stride = stride_in;
        let op = match sig.kind {
            ModuleKind::Conv => {
                let k = reader.positive(1, 1, "kernel")?;
                let s = reader.positive(2, 1, "stride")?;
                let p = match reader.get(3) {
                    None | Some(ArgValue::Null) => None,
                    Some(ArgValue::Int(v)) if *v >= 0 => Some(*v as u64),
                    Some(other) => return Err(reader.bad(format!("padding must be None or an integer, got {other}"))),
                };
                let gr = reader.positive(4, 1, "groups")?;
                let d = reader.positive(5, 1, "dilation")?;
                if !c1.is_multiple_of(gr) || c_out % gr != 0 {
                    return Err(reader.bad(format!("groups {gr} must divide {c1} and {c_out}")));
                }
                stride = (0..instances).fold(stride, |acc, _| acc.downsample(s));
                ModuleOp::Conv { k, s, p, g: gr, d }
            }
            ModuleKind::Bottleneck => {
                let shortcut = reader.flag(1, true, "shortcut")?;
                let gr = reader.positive(2, 1, "groups")?;
                let ks = reader.int_list(3, &[3, 3], "kernels")?;
                if ks.len() != 2 {
                    return Err(reader.bad("kernels must be a pair"));
                }
                let e = reader.fraction(4, 0.5, "expansion")?;
                let hidden = (c_out as f64 * e) as u64;
                if hidden == 0 || !hidden.is_multiple_of(gr) || c_out % gr != 0 {
                    return Err(reader.bad(format!("hidden width {hidden} incompatible with groups {gr}")));
                }
                ModuleOp::Bottleneck {
                    shortcut,
                    g: gr,
                    k: (ks[0], ks[1]),
                    e,
                }
            }
            ModuleKind::Spp => {
                let kernels = reader.int_list(1, &[5, 9, 13], "pool kernels")?;
                if c1 / 2 == 0 {
                    return Err(reader.bad("input too narrow"));
                }
                ModuleOp::Spp { kernels }
            }
            ModuleKind::Sppf => {
                let k = reader.positive(1, 5, "pool kernel")?;
                if c1 / 2 == 0 {
                    return Err(reader.bad("input too narrow"));
                }
                ModuleOp::Sppf { k }
            }
            ModuleKind::C2f => {
                let shortcut = reader.flag(1, false, "shortcut")?;
                let gr = reader.positive(2, 1, "groups")?;
                let e = reader.fraction(3, 0.5, "expansion")?;
                let c = (c_out as f64 * e) as u64;
                if c == 0 || !c.is_multiple_of(gr) {
                    return Err(reader.bad(format!("hidden width {c} incompatible with groups {gr}")));
                }
                ModuleOp::C2f {
                    n: effective,
                    shortcut,
                    g: gr,
                    e,
                }
            }
            ModuleKind::ScDown => {
                let k = reader.positive(1, 1, "kernel")?;
                let s = reader.positive(2, 1, "stride")?;
                stride = (0..instances).fold(stride, |acc, _| acc.downsample(s));
                ModuleOp::ScDown { k, s }
            }
            ModuleKind::Psa => {
                let e = reader.fraction(1, 0.5, "expansion")?;
                if c1 != c_out {
                    return Err(ArchError::ChannelMismatch {
                        layer: i,
                        reason: format!("PSA needs equal in/out channels, got {c1} -> {c_out}"),
                    });
                }
                let c = (c1 as f64 * e) as u64;
                let heads = c / 64;
                if heads == 0 || !c.is_multiple_of(heads) {
                    return Err(reader.bad(format!("attention width {c} cannot be split into heads of 64")));
                }
                ModuleOp::Psa { e }
            }
            ModuleKind::Concat => {
                match reader.get(0) {
                    None | Some(ArgValue::Int(1)) => {}
                    Some(other) => return Err(reader.bad(format!("only channel concatenation (dim 1) is supported, got {other}"))),
                }
                if strides.iter().any(|s| *s != stride_in) {
                    return Err(ArchError::SpatialMismatch { layer: i });
                }
                ModuleOp::Concat
            }
            ModuleKind::Upsample => {
                if !matches!(reader.get(0), Some(ArgValue::Null)) {
                    return Err(reader.bad("explicit output size is not supported; use None"));
                }
                let factor = match reader.get(1) {
                    Some(ArgValue::Int(v)) if *v >= 1 => *v as u64,
                    Some(ArgValue::Float(f)) if *f >= 1.0 && f.fract() == 0.0 => *f as u64,
                    other => return Err(reader.bad(format!("scale factor must be a positive integer, got {other:?}"))),
                };
                stride = (0..instances).fold(stride, |acc, _| acc.upsample(factor));
                ModuleOp::Upsample { factor }
            }
            ModuleKind::Detect | ModuleKind::V10Detect => {
                if Some(i) != last {
                    return Err(reader.bad("detection head must be the final layer"));
                }
                let classes = reader.positive(0, nc, "class count")?;
                if sig.kind == ModuleKind::Detect {
                    ModuleOp::Detect { nc: classes }
                } else {
                    ModuleOp::V10Detect { nc: classes }
                }
            }
        };
        if instances > 1 && c1 != c_out {
            return Err(ArchError::ChannelMismatch {
                layer: i,
                reason: format!("{instances} stacked copies need equal in/out channels, got {c1} -> {c_out}"),
            });
        }
        if sig.channel_rule != ChannelRule::Head && c_out == 0 {
            return Err(reader.bad("zero output channels"));
        }

        nodes.push(GraphNode {
            index: i,
            token: layer.module.clone(),
            kind: sig.kind,
            inputs,
            repeats: layer.repeats,
            effective_repeats: effective,
            instances,
            c_in,
            c_out,
            stride,
            op,
        });
    }

    match nodes.last() {
        Some(n) if n.kind.is_detect() => {}
        _ => return Err(ArchError::NoDetectHead),
    }
    Ok(ArchGraph {
        nodes,
        nc,
        depth,
        width,
        max_channels,
        scale: scale_name,
    })
}

/// Validity predicate over a parsed genome: valid iff the graph builds.
pub fn validate_genome(g: &ModelGenome) -> ValidityVerdict {
    match build_graph(g, None) {
        Ok(_) => ValidityVerdict::ok(),
        Err(e) => ValidityVerdict::fail(Diagnostic::from(&e)),
    }
}

/// Validity over a parse outcome; parse failures are reported as verdicts.
pub fn validate_parsed(parsed: &Result<ModelGenome, GenomeError>) -> ValidityVerdict {
    match parsed {
        Ok(g) => validate_genome(g),
        Err(e) => ValidityVerdict::fail(Diagnostic::from(e)),
    }
}

pub fn validate_source(text: &str, mode: GeMode) -> ValidityVerdict {
    validate_parsed(&parse_genome(text, mode))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub module: String,
    pub params: u64,
    pub cost_units: f64,
}

/// Parameter and multiply-accumulate accounting for a graph.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub total_params: u64,
    /// Multiply-accumulates per image at the reference resolution.
    pub cost_units: f64,
    pub input_hw: (u64, u64),
    pub per_layer: Vec<LayerCost>,
}

fn with_classes(op: &ModuleOp, nc: u64) -> ModuleOp {
    match op {
        ModuleOp::Detect { .. } => ModuleOp::Detect { nc },
        ModuleOp::V10Detect { .. } => ModuleOp::V10Detect { nc },
        other => other.clone(),
    }
}

fn node_params(node: &GraphNode, nc: u64) -> u64 {
    let hw = vec![(1, 1); node.c_in.len()];
    let op = with_classes(&node.op, nc);
    node.instances * expand(&op, &node.c_in, node.c_out, &hw).params()
}

/// Total trainable-parameter count with `nc` classes in the detection head.
pub fn count_parameters(graph: &ArchGraph, nc: u64) -> u64 {
    graph.nodes.iter().map(|n| node_params(n, nc)).sum()
}

/// Spatial size of every node's output at the given input resolution.
fn spatial_sizes(graph: &ArchGraph, input_hw: (u64, u64)) -> Vec<Vec<(u64, u64)>> {
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(graph.nodes.len());
    let mut node_inputs = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let in_hw: Vec<(u64, u64)> = node
            .inputs
            .iter()
            .map(|i| match i {
                NodeInput::Image => input_hw,
                NodeInput::Layer(l) => out[*l],
            })
            .collect();
        let mut hw = in_hw[0];
        for _ in 0..node.instances {
            hw = match &node.op {
                ModuleOp::Conv { k, s, p, d, .. } => (conv_out(hw.0, *k, *s, *p, *d), conv_out(hw.1, *k, *s, *p, *d)),
                ModuleOp::ScDown { k, s } => (conv_out(hw.0, *k, *s, None, 1), conv_out(hw.1, *k, *s, None, 1)),
                ModuleOp::Upsample { factor } => (hw.0 * factor, hw.1 * factor),
                _ => hw,
            };
        }
        out.push(hw);
        node_inputs.push(in_hw);
    }
    node_inputs
}

/// Multiply-accumulates per image at `input_hw`, summed over all layers.
pub fn estimate_inference_cost(graph: &ArchGraph, input_hw: (u64, u64)) -> f64 {
    analyze(graph, input_hw).cost_units
}

fn node_macs(node: &GraphNode, in_hw: &[(u64, u64)], nc: u64) -> u64 {
    let op = with_classes(&node.op, nc);
    if node.instances <= 1 {
        return expand(&op, &node.c_in, node.c_out, in_hw).macs();
    }
    // Stacked copies see the previous copy's output resolution.
    let mut hw = in_hw[0];
    let mut total = 0;
    for _ in 0..node.instances {
        let x = expand(&op, &node.c_in, node.c_out, &[hw]);
        total += x.macs();
        hw = match &node.op {
            ModuleOp::Conv { k, s, p, d, .. } => (conv_out(hw.0, *k, *s, *p, *d), conv_out(hw.1, *k, *s, *p, *d)),
            ModuleOp::ScDown { k, s } => (conv_out(hw.0, *k, *s, None, 1), conv_out(hw.1, *k, *s, None, 1)),
            ModuleOp::Upsample { factor } => (hw.0 * factor, hw.1 * factor),
            _ => hw,
        };
    }
    total
}

/// Full per-layer cost report at `input_hw`.
pub fn analyze(graph: &ArchGraph, input_hw: (u64, u64)) -> CostReport {
    let sizes = spatial_sizes(graph, input_hw);
    let per_layer: Vec<LayerCost> = graph
        .nodes
        .iter()
        .zip(&sizes)
        .map(|(node, in_hw)| LayerCost {
            index: node.index,
            module: node.token.clone(),
            params: node_params(node, graph.nc),
            cost_units: node_macs(node, in_hw, graph.nc) as f64,
        })
        .collect();
    CostReport {
        total_params: per_layer.iter().map(|l| l.params).sum(),
        cost_units: per_layer.iter().map(|l| l.cost_units).sum(),
        input_hw,
        per_layer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genome::{parse_genome, GeMode};

    const YOLOV3: &str = include_str!("../../../../listings/yolov3.yaml");

    fn single_conv(args: &str) -> ModelGenome {
        let text = format!(
            "nc: 80\ndepth_multiple: 1.0\nwidth_multiple: 1.0\nbackbone:\n  - [-1, 1, Conv, {args}]\nhead:\n  - [[0], 1, Detect, [nc]]\n"
        );
        parse_genome(&text, GeMode::Ge1).unwrap()
    }

    #[test]
    fn yolov3_graph_shape() {
        let g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        let graph = build_graph(&g, None).unwrap();
        assert_eq!(graph.nodes.len(), 29);
        assert_eq!(graph.detect_inputs(), vec![27, 22, 15]);
        let n6 = &graph.nodes[6];
        assert_eq!((n6.effective_repeats, n6.c_in[0], n6.c_out), (8, 256, 256));
        // [[-1, 8], 1, Concat, [1]] after a 256-channel upsample and the 512-channel layer 8
        let cat = &graph.nodes[18];
        assert_eq!(cat.inputs, vec![NodeInput::Layer(17), NodeInput::Layer(8)]);
        assert_eq!(cat.c_in, vec![256, 512]);
        assert_eq!(cat.c_out, 768);
        assert_eq!(graph.nodes[15].stride, Stride { down: 32, up: 1 });
        assert_eq!(graph.head_coverage(), 3);
    }

    #[test]
    fn out_of_range_source() {
        let text = YOLOV3.replace("[[-1, 8], 1, Concat, [1]]", "[[-1, 99], 1, Concat, [1]]");
        let g = parse_genome(&text, GeMode::Ge1).unwrap();
        assert_eq!(
            build_graph(&g, None).unwrap_err(),
            ArchError::IndexOutOfRange { layer: 18, from: 99 }
        );
        let text = YOLOV3.replace("[-1, 1, Conv, [64, 3, 2]] # 1-P1/2", "[-3, 1, Conv, [64, 3, 2]]");
        let g = parse_genome(&text, GeMode::Ge1).unwrap();
        assert!(matches!(build_graph(&g, None), Err(ArchError::IndexOutOfRange { layer: 1, from: -3 })));
    }

    #[test]
    fn unknown_module_and_missing_head() {
        let g = parse_genome(&YOLOV3.replace("Bottleneck, [64]", "FooBar, [64]"), GeMode::Ge1).unwrap();
        assert_eq!(validate_genome(&g).codes(), vec![DiagnosticCode::UnknownModule]);
        let text: String = YOLOV3
            .lines()
            .filter(|l| !l.contains("Detect"))
            .map(|l| format!("{l}\n"))
            .collect();
        let g = parse_genome(&text, GeMode::Ge1).unwrap();
        assert_eq!(validate_genome(&g).codes(), vec![DiagnosticCode::NoDetectHead]);
    }

    #[test]
    fn parse_errors_become_verdicts() {
        let v = validate_source("", GeMode::Ge1);
        assert!(!v.valid);
        assert_eq!(v.codes(), vec![DiagnosticCode::YamlSyntax]);
        let v = validate_source("nc: 80\nbackbone: []\n", GeMode::Ge1);
        assert_eq!(v.codes(), vec![DiagnosticCode::MissingSection]);
    }

    #[test]
    fn single_conv_params_and_cost() {
        let g = single_conv("[32, 3, 1]");
        let graph = build_graph(&g, None).unwrap();
        let conv = &graph.nodes[0];
        assert_eq!(node_params(conv, 80), 928);
        let report = analyze(&graph, (64, 64));
        assert_eq!(report.per_layer[0].params, 928);
        assert_eq!(report.per_layer[0].cost_units, (3 * 32 * 9 * 64 * 64) as f64);

        let strided = build_graph(&single_conv("[32, 3, 2]"), None).unwrap();
        let r2 = analyze(&strided, (64, 64));
        assert_eq!(r2.per_layer[0].cost_units * 4.0, report.per_layer[0].cost_units);
    }

    #[test]
    fn upsample_costs_nothing() {
        let g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        let report = analyze(&build_graph(&g, None).unwrap(), (640, 640));
        let up = &report.per_layer[17];
        assert_eq!(up.module, "nn.Upsample");
        assert_eq!((up.params, up.cost_units), (0, 0.0));
        assert_eq!(report.total_params, report.per_layer.iter().map(|l| l.params).sum::<u64>());
    }

    #[test]
    fn identity_scaling_keeps_raw_values() {
        let g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        let graph = build_graph(&g, None).unwrap();
        for (node, layer) in graph.nodes.iter().zip(g.layers()) {
            assert_eq!(node.effective_repeats, layer.repeats as u64);
            if node.kind.sig().channel_rule == ChannelRule::FromFirstArg {
                assert_eq!(node.c_out as i64, layer.args[0].as_int().unwrap());
            }
        }
    }

    #[test]
    fn depth_rounding_is_half_even() {
        let text = YOLOV3
            .replace("depth_multiple: 1.0", "depth_multiple: 0.5")
            .replace("[-1, 8, Bottleneck, [256]]", "[-1, 5, Bottleneck, [256]]");
        let graph = build_graph(&parse_genome(&text, GeMode::Ge1).unwrap(), None).unwrap();
        // 5 * 0.5 = 2.5 rounds to 2; 4 * 0.5 = 2; 1 stays 1
        assert_eq!(graph.nodes[6].effective_repeats, 2);
        assert_eq!(graph.nodes[10].effective_repeats, 2);
        assert_eq!(graph.nodes[2].effective_repeats, 1);
    }

    #[test]
    fn width_scaling_rounds_up_to_eight_and_skips_nc() {
        let text = YOLOV3.replace("width_multiple: 1.0", "width_multiple: 0.3");
        let graph = build_graph(&parse_genome(&text, GeMode::Ge1).unwrap(), None).unwrap();
        assert_eq!(graph.nodes[0].c_out, 16); // ceil(9.6 / 8) * 8
        let ge2_example1 = include_str!("../../../../listings/ge2_example1.yaml");
        let graph = build_graph(&parse_genome(ge2_example1, GeMode::Ge2).unwrap(), None).unwrap();
        assert_eq!(graph.nodes[0].c_out, 64); // 40 * 1.5 = 60 -> 64
        assert_eq!(graph.nodes[1].c_out, 80); // equals nc, left unscaled
    }

    #[test]
    fn scales_select_rows_and_cap_channels() {
        let text = include_str!("../../../../listings/yolov8.yaml");
        let g = parse_genome(text, GeMode::Ge2).unwrap();
        let n = build_graph(&g, None).unwrap();
        assert_eq!(n.scale.as_deref(), Some("n"));
        assert_eq!(n.nodes[7].c_out, 256); // 1024 * 0.25
        let l = build_graph(&g, Some("l")).unwrap();
        assert_eq!(l.nodes[7].c_out, 512); // capped at 512 before scaling
        assert!(matches!(build_graph(&g, Some("q")), Err(ArchError::UnknownScale(_))));
    }

    #[test]
    fn concat_needs_matching_strides() {
        let text = YOLOV3.replace("[[-1, 8], 1, Concat, [1]]", "[[-1, 6], 1, Concat, [1]]");
        let g = parse_genome(&text, GeMode::Ge1).unwrap();
        assert_eq!(build_graph(&g, None).unwrap_err(), ArchError::SpatialMismatch { layer: 18 });
    }

    #[test]
    fn stacked_copies_need_equal_channels() {
        let text = YOLOV3.replace("[-1, 1, Conv, [64, 3, 2]] # 1-P1/2", "[-1, 2, Conv, [64, 3, 2]]");
        let g = parse_genome(&text, GeMode::Ge1).unwrap();
        assert!(matches!(build_graph(&g, None), Err(ArchError::ChannelMismatch { layer: 1, .. })));
    }

    #[test]
    fn detect_must_be_last() {
        let text = format!("{YOLOV3}  - [-1, 1, Conv, [32, 3, 1]]\n");
        let g = parse_genome(&text, GeMode::Ge1).unwrap();
        assert!(matches!(build_graph(&g, None), Err(ArchError::BadArgs { layer: 28, .. })));
    }

    #[test]
    fn bad_args_reported() {
        let g = single_conv("[32, 3, 1, None, 5]");
        assert!(matches!(build_graph(&g, None), Err(ArchError::BadArgs { layer: 0, .. })));
        let g = single_conv("[]");
        assert!(matches!(build_graph(&g, None), Err(ArchError::BadArgs { .. })));
        let g = single_conv("[thirty-two, 3, 1]");
        assert!(matches!(build_graph(&g, None), Err(ArchError::BadArgs { .. })));
    }

    #[test]
    fn width_monotonicity() {
        let g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        let base = count_parameters(&build_graph(&g, None).unwrap(), 80);
        let wide = parse_genome(&YOLOV3.replace("width_multiple: 1.0", "width_multiple: 2.0"), GeMode::Ge1).unwrap();
        assert!(count_parameters(&build_graph(&wide, None).unwrap(), 80) > base);
    }
}
