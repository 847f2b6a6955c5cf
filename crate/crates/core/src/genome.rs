//! YAML architecture genomes in the Ultralytics model-config dialect.
//!
//! A genome is a parameters table plus two ordered layer lists (`backbone`
//! and `head`). Each layer is a `[from, number, module, args]` tuple. The
//! genome is segmented into blocks, which are the units handed to variation
//! operators: three blocks (parameters, backbone, head) in [`GeMode::Ge1`],
//! or a single whole-file block in [`GeMode::Ge2`].

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Marker line written in front of every block in three-block mode.
pub const BLOCK_MARKER: &str = "# --Block--";

const LAYER_HEADER: &str = "  # [from, number, module, args]";

/// How the genome is segmented for the variation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeMode {
    /// Parameters, backbone and head are separate genetic units.
    Ge1,
    /// The whole file is one genetic unit.
    Ge2,
}

impl fmt::Display for GeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeMode::Ge1 => f.write_str("ge1"),
            GeMode::Ge2 => f.write_str("ge2"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenomeError {
    #[error("yaml syntax error{}: {message}", fmt_line(*.line))]
    YamlSyntax { line: Option<usize>, message: String },
    #[error("missing section `{section}`")]
    MissingSection { section: String },
    #[error("malformed layer {position} in `{section}`{}: {reason}", fmt_line(*.line))]
    MalformedLayer {
        section: String,
        position: usize,
        line: Option<usize>,
        reason: String,
    },
    #[error("invalid parameters: {reason}")]
    InvalidParams { reason: String },
    #[error("block layout does not form a genome: {reason}")]
    BlockLayout { reason: String },
}

fn fmt_line(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

impl GenomeError {
    pub fn line(&self) -> Option<usize> {
        match self {
            GenomeError::YamlSyntax { line, .. } | GenomeError::MalformedLayer { line, .. } => *line,
            _ => None,
        }
    }
}

/// One heterogeneous entry of a layer's `args` list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<ArgValue>),
}

impl ArgValue {
    fn from_yaml(value: &Value) -> Result<Self, String> {
        Ok(match value {
            Value::Null => ArgValue::Null,
            Value::Bool(b) => ArgValue::Bool(*b),
            Value::Number(n) => match n.as_i64() {
                Some(i) => ArgValue::Int(i),
                None => ArgValue::Float(n.as_f64().ok_or("unrepresentable number")?),
            },
            Value::String(s) => ArgValue::Str(s.clone()),
            Value::Sequence(items) => ArgValue::List(
                items
                    .iter()
                    .map(ArgValue::from_yaml)
                    .collect::<Result<_, _>>()?,
            ),
            Value::Mapping(_) => return Err("mapping is not allowed inside args".into()),
            Value::Tagged(t) => ArgValue::from_yaml(&t.value)?,
        })
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            ArgValue::Int(i) => Some(*i),
            _ => None,
        }
    }
}

impl fmt::Display for ArgValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgValue::Null => f.write_str("null"),
            ArgValue::Bool(true) => f.write_str("True"),
            ArgValue::Bool(false) => f.write_str("False"),
            ArgValue::Int(i) => write!(f, "{i}"),
            ArgValue::Float(x) => f.write_str(&fmt_float(*x)),
            ArgValue::Str(s) => f.write_str(&fmt_str(s)),
            ArgValue::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
        }
    }
}

fn fmt_float(x: f64) -> String {
    // Debug keeps a trailing `.0` so integral floats stay floats on re-parse.
    format!("{x:?}")
}

fn fmt_str(s: &str) -> String {
    let plain = s
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        && !matches!(
            s,
            "true" | "True" | "TRUE" | "false" | "False" | "FALSE" | "null" | "Null" | "NULL"
        );
    if plain {
        s.to_string()
    } else {
        serde_json::to_string(s).expect("string serialization")
    }
}

/// The `from` field of a layer tuple. Negative values are relative offsets
/// and are kept symbolic until graph construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSource {
    Single(i64),
    Multi(Vec<i64>),
}

impl LayerSource {
    pub fn indices(&self) -> &[i64] {
        match self {
            LayerSource::Single(i) => std::slice::from_ref(i),
            LayerSource::Multi(v) => v,
        }
    }

    pub fn indices_mut(&mut self) -> &mut [i64] {
        match self {
            LayerSource::Single(i) => std::slice::from_mut(i),
            LayerSource::Multi(v) => v,
        }
    }
}

impl fmt::Display for LayerSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSource::Single(i) => write!(f, "{i}"),
            LayerSource::Multi(v) => {
                let parts: Vec<String> = v.iter().map(i64::to_string).collect();
                write!(f, "[{}]", parts.join(", "))
            }
        }
    }
}

/// One `[from, number, module, args]` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub from: LayerSource,
    pub repeats: u32,
    pub module: String,
    pub args: Vec<ArgValue>,
}

impl LayerSpec {
    pub fn new(from: LayerSource, repeats: u32, module: impl Into<String>, args: Vec<ArgValue>) -> Self {
        Self {
            from,
            repeats,
            module: module.into(),
            args,
        }
    }

    fn from_yaml(value: &Value) -> Result<Self, String> {
        let Value::Sequence(items) = value else {
            return Err("layer entry is not a list".into());
        };
        if items.len() != 4 {
            return Err(format!("expected 4 elements, found {}", items.len()));
        }
        let from = match &items[0] {
            Value::Number(n) => LayerSource::Single(n.as_i64().ok_or("`from` must be an integer")?),
            Value::Sequence(v) if !v.is_empty() => LayerSource::Multi(
                v.iter()
                    .map(|x| x.as_i64().ok_or("`from` entries must be integers"))
                    .collect::<Result<_, _>>()?,
            ),
            _ => return Err("`from` must be an integer or a non-empty list of integers".into()),
        };
        let repeats = items[1]
            .as_i64()
            .filter(|n| *n >= 1 && *n <= u32::MAX as i64)
            .ok_or("`number` must be a positive integer")? as u32;
        let module = match &items[2] {
            Value::String(s) if !s.trim().is_empty() => s.clone(),
            _ => return Err("`module` must be a name".into()),
        };
        let args = match &items[3] {
            Value::Sequence(v) => v
                .iter()
                .map(ArgValue::from_yaml)
                .collect::<Result<_, _>>()?,
            Value::Null => Vec::new(),
            _ => return Err("`args` must be a list".into()),
        };
        Ok(Self {
            from,
            repeats,
            module,
            args,
        })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.from,
            self.repeats,
            fmt_str(&self.module),
            ArgValue::List(self.args.clone())
        )
    }
}

/// One row of a `scales` table: `letter: [depth, width, max_channels]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub name: String,
    pub depth: f64,
    pub width: f64,
    pub max_channels: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamsTable {
    pub nc: u32,
    pub depth_multiple: Option<f64>,
    pub width_multiple: Option<f64>,
    pub scales: Vec<ScaleRow>,
    /// Unknown top-level keys (training hyperparameters and the like), in
    /// document order.
    pub extra: Mapping,
}

impl ParamsTable {
    pub fn with_multiples(nc: u32, depth: f64, width: f64) -> Self {
        Self {
            nc,
            depth_multiple: Some(depth),
            width_multiple: Some(width),
            ..Self::default()
        }
    }

    pub fn scale(&self, name: &str) -> Option<&ScaleRow> {
        self.scales.iter().find(|s| s.name == name)
    }

    fn validate(&self) -> Result<(), GenomeError> {
        let bad = |reason: String| Err(GenomeError::InvalidParams { reason });
        if self.nc == 0 {
            return bad("nc must be positive".into());
        }
        let has_multiples = self.depth_multiple.is_some() && self.width_multiple.is_some();
        if !has_multiples && self.scales.is_empty() {
            return bad("need depth_multiple and width_multiple, or a scales table".into());
        }
        for (key, v) in [
            ("depth_multiple", self.depth_multiple),
            ("width_multiple", self.width_multiple),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return bad(format!("{key} must be a positive number"));
                }
            }
        }
        for row in &self.scales {
            if !(row.depth.is_finite() && row.depth > 0.0 && row.width.is_finite() && row.width > 0.0)
            {
                return bad(format!("scale `{}` multiples must be positive", row.name));
            }
            if row.max_channels == 0 {
                return bad(format!("scale `{}` max_channels must be positive", row.name));
            }
        }
        Ok(())
    }

    fn write_yaml(&self, out: &mut String) {
        let _ = writeln!(out, "nc: {}", self.nc);
        if let Some(d) = self.depth_multiple {
            let _ = writeln!(out, "depth_multiple: {}", fmt_float(d));
        }
        if let Some(w) = self.width_multiple {
            let _ = writeln!(out, "width_multiple: {}", fmt_float(w));
        }
        if !self.scales.is_empty() {
            out.push_str("scales:\n  # [depth, width, max_channels]\n");
            for row in &self.scales {
                let _ = writeln!(
                    out,
                    "  {}: [{}, {}, {}]",
                    fmt_str(&row.name),
                    fmt_float(row.depth),
                    fmt_float(row.width),
                    row.max_channels
                );
            }
        }
        for (k, v) in &self.extra {
            let mut single = Mapping::new();
            single.insert(k.clone(), v.clone());
            if let Ok(text) = serde_yaml::to_string(&single) {
                out.push_str(&text);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Parameters,
    Backbone,
    Head,
    Whole,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockBody {
    Parameters(ParamsTable),
    Backbone(Vec<LayerSpec>),
    Head(Vec<LayerSpec>),
    Whole {
        params: ParamsTable,
        backbone: Vec<LayerSpec>,
        head: Vec<LayerSpec>,
    },
}

/// A genetic unit of the genome. Comment lines are carried along for
/// re-emission only; they never affect structure or equality.
#[derive(Debug, Clone)]
pub struct Block {
    pub body: BlockBody,
    pub raw_comments: Vec<String>,
}

impl PartialEq for Block {
    fn eq(&self, other: &Self) -> bool {
        self.body == other.body
    }
}

impl Block {
    pub fn new(body: BlockBody) -> Self {
        Self {
            body,
            raw_comments: Vec::new(),
        }
    }

    pub fn kind(&self) -> BlockKind {
        match self.body {
            BlockBody::Parameters(_) => BlockKind::Parameters,
            BlockBody::Backbone(_) => BlockKind::Backbone,
            BlockBody::Head(_) => BlockKind::Head,
            BlockBody::Whole { .. } => BlockKind::Whole,
        }
    }

    pub fn layers(&self) -> Vec<&LayerSpec> {
        match &self.body {
            BlockBody::Parameters(_) => Vec::new(),
            BlockBody::Backbone(l) | BlockBody::Head(l) => l.iter().collect(),
            BlockBody::Whole { backbone, head, .. } => backbone.iter().chain(head).collect(),
        }
    }

    /// Renders this block alone in the YAML dialect (no marker line).
    pub fn to_yaml(&self) -> String {
        let mut out = String::new();
        match &self.body {
            BlockBody::Parameters(p) => p.write_yaml(&mut out),
            BlockBody::Backbone(l) => write_layers(&mut out, "backbone", l),
            BlockBody::Head(l) => write_layers(&mut out, "head", l),
            BlockBody::Whole {
                params,
                backbone,
                head,
            } => {
                params.write_yaml(&mut out);
                out.push('\n');
                write_layers(&mut out, "backbone", backbone);
                out.push('\n');
                write_layers(&mut out, "head", head);
            }
        }
        out
    }
}

fn write_layers(out: &mut String, key: &str, layers: &[LayerSpec]) {
    if layers.is_empty() {
        let _ = writeln!(out, "{key}: []");
        return;
    }
    let _ = writeln!(out, "{key}:");
    out.push_str(LAYER_HEADER);
    out.push('\n');
    for layer in layers {
        let _ = writeln!(out, "  - {layer}");
    }
}

/// A parsed architecture genome.
///
/// Equality is semantic: mode, parameters and layer tuples. Comments and the
/// original source text are ignored.
#[derive(Debug, Clone)]
pub struct ModelGenome {
    mode: GeMode,
    blocks: Vec<Block>,
    source_text: String,
}

impl PartialEq for ModelGenome {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.blocks == other.blocks
    }
}

impl ModelGenome {
    pub fn from_parts(
        mode: GeMode,
        params: ParamsTable,
        backbone: Vec<LayerSpec>,
        head: Vec<LayerSpec>,
    ) -> Self {
        let blocks = match mode {
            GeMode::Ge1 => vec![
                Block::new(BlockBody::Parameters(params)),
                Block::new(BlockBody::Backbone(backbone)),
                Block::new(BlockBody::Head(head)),
            ],
            GeMode::Ge2 => vec![Block::new(BlockBody::Whole {
                params,
                backbone,
                head,
            })],
        };
        let mut g = Self {
            mode,
            blocks,
            source_text: String::new(),
        };
        g.source_text = serialize_genome(&g);
        g
    }

    pub fn mode(&self) -> GeMode {
        self.mode
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    pub fn params(&self) -> &ParamsTable {
        for b in &self.blocks {
            match &b.body {
                BlockBody::Parameters(p) | BlockBody::Whole { params: p, .. } => return p,
                _ => {}
            }
        }
        unreachable!("genome invariant: a parameters table is always present")
    }

    pub fn backbone(&self) -> &[LayerSpec] {
        for b in &self.blocks {
            match &b.body {
                BlockBody::Backbone(l) | BlockBody::Whole { backbone: l, .. } => return l,
                _ => {}
            }
        }
        unreachable!("genome invariant: a backbone is always present")
    }

    pub fn head(&self) -> &[LayerSpec] {
        for b in &self.blocks {
            match &b.body {
                BlockBody::Head(l) | BlockBody::Whole { head: l, .. } => return l,
                _ => {}
            }
        }
        unreachable!("genome invariant: a head is always present")
    }

    pub fn params_mut(&mut self) -> &mut ParamsTable {
        for b in &mut self.blocks {
            match &mut b.body {
                BlockBody::Parameters(p) | BlockBody::Whole { params: p, .. } => return p,
                _ => {}
            }
        }
        unreachable!("genome invariant: a parameters table is always present")
    }

    pub fn backbone_mut(&mut self) -> &mut Vec<LayerSpec> {
        for b in &mut self.blocks {
            match &mut b.body {
                BlockBody::Backbone(l) | BlockBody::Whole { backbone: l, .. } => return l,
                _ => {}
            }
        }
        unreachable!("genome invariant: a backbone is always present")
    }

    pub fn head_mut(&mut self) -> &mut Vec<LayerSpec> {
        for b in &mut self.blocks {
            match &mut b.body {
                BlockBody::Head(l) | BlockBody::Whole { head: l, .. } => return l,
                _ => {}
            }
        }
        unreachable!("genome invariant: a head is always present")
    }

    /// Layers in global index order: backbone first, then head.
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.backbone().iter().chain(self.head())
    }

    pub fn layer_count(&self) -> usize {
        self.backbone().len() + self.head().len()
    }

    /// Re-renders `source_text` after in-place edits.
    pub fn refresh_source(&mut self) {
        self.source_text = serialize_genome(self);
    }

    /// The same content re-segmented for the other mode.
    pub fn with_mode(&self, mode: GeMode) -> Self {
        if mode == self.mode {
            return self.clone();
        }
        let comments: Vec<String> = self
            .blocks
            .iter()
            .flat_map(|b| b.raw_comments.iter().cloned())
            .collect();
        let mut g = Self::from_parts(
            mode,
            self.params().clone(),
            self.backbone().to_vec(),
            self.head().to_vec(),
        );
        if let Some(first) = g.blocks.first_mut() {
            first.raw_comments = comments;
        }
        g.refresh_source();
        g
    }
}

/// Guesses the segmentation of a document: block markers mean three blocks.
pub fn detect_mode(text: &str) -> GeMode {
    if text.lines().any(|l| l.trim() == BLOCK_MARKER) {
        GeMode::Ge1
    } else {
        GeMode::Ge2
    }
}

/// Parses a genome document.
pub fn parse_genome(text: &str, mode: GeMode) -> Result<ModelGenome, GenomeError> {
    if text.trim().is_empty() {
        return Err(GenomeError::YamlSyntax {
            line: None,
            message: "empty document".into(),
        });
    }
    let doc: Value = serde_yaml::from_str(text).map_err(|e| GenomeError::YamlSyntax {
        line: e.location().map(|l| l.line()),
        message: e.to_string(),
    })?;
    let Value::Mapping(map) = doc else {
        return Err(GenomeError::YamlSyntax {
            line: Some(1),
            message: "top level is not a mapping".into(),
        });
    };

    let mut params = ParamsTable::default();
    let mut nc = None;
    let mut backbone = None;
    let mut head = None;
    for (key, value) in &map {
        let Some(name) = key.as_str() else {
            params.extra.insert(key.clone(), value.clone());
            continue;
        };
        match name {
            "nc" => nc = Some(value),
            "depth_multiple" => params.depth_multiple = Some(param_number(name, value)?),
            "width_multiple" => params.width_multiple = Some(param_number(name, value)?),
            "scales" => params.scales = parse_scales(value)?,
            "backbone" => backbone = Some(parse_layers(text, "backbone", value)?),
            "head" => head = Some(parse_layers(text, "head", value)?),
            _ => {
                params.extra.insert(key.clone(), value.clone());
            }
        }
    }
    let backbone = backbone.ok_or_else(|| GenomeError::MissingSection {
        section: "backbone".into(),
    })?;
    let head = head.ok_or_else(|| GenomeError::MissingSection {
        section: "head".into(),
    })?;
    params.nc = match nc {
        Some(v) => v
            .as_u64()
            .filter(|n| *n >= 1 && *n <= u32::MAX as u64)
            .ok_or_else(|| GenomeError::InvalidParams {
                reason: "nc must be a positive integer".into(),
            })? as u32,
        None => {
            return Err(GenomeError::InvalidParams {
                reason: "missing nc".into(),
            })
        }
    };
    params.validate()?;

    let mut genome = ModelGenome::from_parts(mode, params, backbone, head);
    attach_comments(&mut genome, text);
    genome.source_text = text.to_string();
    Ok(genome)
}

fn param_number(key: &str, value: &Value) -> Result<f64, GenomeError> {
    value.as_f64().ok_or_else(|| GenomeError::InvalidParams {
        reason: format!("{key} must be a number"),
    })
}

fn parse_scales(value: &Value) -> Result<Vec<ScaleRow>, GenomeError> {
    let bad = |reason: String| GenomeError::InvalidParams { reason };
    let Value::Mapping(rows) = value else {
        return Err(bad("scales must be a mapping".into()));
    };
    rows.iter()
        .map(|(k, v)| {
            let name = match k {
                Value::String(s) => s.clone(),
                other => serde_yaml::to_string(other)
                    .unwrap_or_default()
                    .trim()
                    .to_string(),
            };
            let triple = v
                .as_sequence()
                .filter(|s| s.len() == 3)
                .ok_or_else(|| bad(format!("scale `{name}` must be [depth, width, max_channels]")))?;
            let depth = triple[0]
                .as_f64()
                .ok_or_else(|| bad(format!("scale `{name}` depth must be a number")))?;
            let width = triple[1]
                .as_f64()
                .ok_or_else(|| bad(format!("scale `{name}` width must be a number")))?;
            let max = triple[2]
                .as_f64()
                .filter(|m| m.fract() == 0.0 && *m >= 1.0)
                .ok_or_else(|| bad(format!("scale `{name}` max_channels must be a positive integer")))?;
            Ok(ScaleRow {
                name,
                depth,
                width,
                max_channels: max as u64,
            })
        })
        .collect()
}

fn parse_layers(text: &str, section: &str, value: &Value) -> Result<Vec<LayerSpec>, GenomeError> {
    let items = match value {
        Value::Sequence(items) => items.as_slice(),
        Value::Null => &[],
        _ => {
            return Err(GenomeError::MalformedLayer {
                section: section.into(),
                position: 0,
                line: section_line(text, section),
                reason: "section is not a list".into(),
            })
        }
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            LayerSpec::from_yaml(item).map_err(|reason| GenomeError::MalformedLayer {
                section: section.into(),
                position: i,
                line: item_line(text, section, i),
                reason,
            })
        })
        .collect()
}

fn is_top_level_key(line: &str) -> bool {
    line.chars()
        .next()
        .is_some_and(|c| !c.is_whitespace() && c != '#' && c != '-')
        && line.contains(':')
}

fn section_line(text: &str, section: &str) -> Option<usize> {
    let prefix = format!("{section}:");
    text.lines()
        .position(|l| l.starts_with(&prefix))
        .map(|i| i + 1)
}

/// 1-based line of the `position`-th list item under a top-level section.
fn item_line(text: &str, section: &str, position: usize) -> Option<usize> {
    let start = section_line(text, section)?;
    let mut item_indent = None;
    let mut seen = 0;
    for (i, line) in text.lines().enumerate().skip(start) {
        if is_top_level_key(line) {
            break;
        }
        let trimmed = line.trim_start();
        if !trimmed.starts_with('-') {
            continue;
        }
        let indent = line.len() - trimmed.len();
        let expected = *item_indent.get_or_insert(indent);
        if indent != expected {
            continue;
        }
        if seen == position {
            return Some(i + 1);
        }
        seen += 1;
    }
    None
}

/// Collects column-0 comment lines and assigns each to the block owning the
/// next top-level key.
fn attach_comments(genome: &mut ModelGenome, text: &str) {
    let mut pending = Vec::new();
    let mut owned: [Vec<String>; 3] = Default::default();
    let mut last = 0usize;
    for line in text.lines() {
        let line = line.trim_end();
        if line.starts_with('#') {
            pending.push(line.to_string());
        } else if is_top_level_key(line) {
            last = if line.starts_with("backbone:") {
                1
            } else if line.starts_with("head:") {
                2
            } else {
                0
            };
            owned[last].append(&mut pending);
        }
    }
    owned[last].append(&mut pending);
    match genome.mode {
        GeMode::Ge1 => {
            for (block, comments) in genome.blocks.iter_mut().zip(owned) {
                block.raw_comments = comments;
            }
        }
        GeMode::Ge2 => {
            genome.blocks[0].raw_comments = owned.into_iter().flatten().collect();
        }
    }
}

/// Emits the genome in the model-config dialect. In three-block mode every
/// block is preceded by a marker line; layers are always in flow style.
pub fn serialize_genome(g: &ModelGenome) -> String {
    let mut out = String::new();
    for (i, block) in g.blocks.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if g.mode == GeMode::Ge1 {
            out.push_str(BLOCK_MARKER);
            out.push('\n');
        }
        for c in block.raw_comments.iter().filter(|c| c.trim() != BLOCK_MARKER) {
            out.push_str(c);
            out.push('\n');
        }
        out.push_str(&block.to_yaml());
    }
    out
}

pub fn split_blocks(g: &ModelGenome) -> Vec<Block> {
    g.blocks.clone()
}

/// Reassembles a genome from its blocks; the mode follows from the block
/// layout.
pub fn merge_blocks(blocks: Vec<Block>) -> Result<ModelGenome, GenomeError> {
    let kinds: Vec<BlockKind> = blocks.iter().map(Block::kind).collect();
    let mode = match kinds.as_slice() {
        [BlockKind::Parameters, BlockKind::Backbone, BlockKind::Head] => GeMode::Ge1,
        [BlockKind::Whole] => GeMode::Ge2,
        _ => {
            return Err(GenomeError::BlockLayout {
                reason: format!("unexpected block sequence {kinds:?}"),
            })
        }
    };
    let mut g = ModelGenome {
        mode,
        blocks,
        source_text: String::new(),
    };
    g.params().validate()?;
    g.refresh_source();
    Ok(g)
}

/// Content digest over parameters and layer tuples. Comments, formatting and
/// block segmentation do not contribute.
pub fn genome_fingerprint(g: &ModelGenome) -> String {
    let mut canonical = String::new();
    g.params().write_yaml(&mut canonical);
    canonical.push('\u{1e}');
    write_layers(&mut canonical, "backbone", g.backbone());
    canonical.push('\u{1e}');
    write_layers(&mut canonical, "head", g.head());
    let digest = Sha256::digest(canonical.as_bytes());
    hex::encode(&digest[..8])
}

/// Digest of arbitrary text, used to name children that never parsed.
pub fn text_fingerprint(text: &str) -> String {
    let digest = Sha256::digest(text.trim().as_bytes());
    format!("raw-{}", hex::encode(&digest[..6]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const YOLOV3: &str = include_str!("../../../listings/yolov3.yaml");
    const GE2_EXAMPLE1: &str = include_str!("../../../listings/ge2_example1.yaml");
    const GE2_EXAMPLE2: &str = include_str!("../../../listings/ge2_example2.yaml");

    #[test]
    fn yolov3_layer_indices() {
        let g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        assert_eq!(g.blocks().len(), 3);
        assert_eq!(g.backbone().len(), 11);
        assert_eq!(g.head().len(), 18);
        let last = g.layers().last().unwrap();
        assert_eq!(last.module, "Detect");
        assert_eq!(last.from, LayerSource::Multi(vec![27, 22, 15]));
        assert_eq!(last.args, vec![ArgValue::Str("nc".into())]);
        let upsample = &g.head()[6];
        assert_eq!(
            upsample.args,
            vec![
                ArgValue::Str("None".into()),
                ArgValue::Int(2),
                ArgValue::Str("nearest".into())
            ]
        );
        assert_eq!(g.head()[0].args[1], ArgValue::Bool(false));
    }

    #[test]
    fn markers_kept_as_comments() {
        let g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        assert_eq!(g.blocks()[0].raw_comments, vec![BLOCK_MARKER, "# Parameters"]);
        assert_eq!(g.blocks()[1].raw_comments, vec![BLOCK_MARKER, "# backbone"]);
        let g2 = parse_genome(GE2_EXAMPLE1, GeMode::Ge2).unwrap();
        let comments = &g2.blocks()[0].raw_comments;
        assert_eq!(comments[0], "# --PROMPT LOG--");
        assert!(comments.iter().any(|c| c == "# --OPTION--"));
    }

    #[test]
    fn scales_row_parsed() {
        let g = parse_genome(GE2_EXAMPLE2, GeMode::Ge2).unwrap();
        assert_eq!(g.blocks().len(), 1);
        assert_eq!(g.blocks()[0].kind(), BlockKind::Whole);
        let s = g.params().scale("s").unwrap();
        assert_eq!((s.depth, s.width, s.max_channels), (0.6, 0.85, 1280));
        assert_eq!(g.params().depth_multiple, None);
    }

    #[test]
    fn empty_text_is_syntax_error() {
        assert!(matches!(
            parse_genome("", GeMode::Ge1),
            Err(GenomeError::YamlSyntax { .. })
        ));
    }

    #[test]
    fn bad_yaml_reports_line() {
        let err = parse_genome("nc: 80\nbackbone: [\n  - [-1, 1\n", GeMode::Ge1).unwrap_err();
        assert!(matches!(err, GenomeError::YamlSyntax { line: Some(_), .. }), "{err:?}");
    }

    #[test]
    fn missing_sections() {
        let err = parse_genome("nc: 80\ndepth_multiple: 1.0\nwidth_multiple: 1.0\nhead: []\n", GeMode::Ge1)
            .unwrap_err();
        assert_eq!(
            err,
            GenomeError::MissingSection {
                section: "backbone".into()
            }
        );
        let err = parse_genome("nc: 80\ndepth_multiple: 1.0\nwidth_multiple: 1.0\nbackbone: []\n", GeMode::Ge1)
            .unwrap_err();
        assert!(matches!(err, GenomeError::MissingSection { section } if section == "head"));
    }

    #[test]
    fn malformed_layer_carries_line() {
        let text = YOLOV3.replace("[-1, 1, Conv, [128, 3, 2]] # 3-P2/4", "[-1, 1, Conv]");
        match parse_genome(&text, GeMode::Ge1).unwrap_err() {
            GenomeError::MalformedLayer {
                section,
                position,
                line,
                ..
            } => {
                assert_eq!(section, "backbone");
                assert_eq!(position, 3);
                let expected = text.lines().position(|l| l.contains("[-1, 1, Conv]")).unwrap() + 1;
                assert_eq!(line, Some(expected));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_repeats_rejected() {
        let text = YOLOV3.replace("[-1, 2, Bottleneck, [128]]", "[-1, 0, Bottleneck, [128]]");
        assert!(matches!(
            parse_genome(&text, GeMode::Ge1),
            Err(GenomeError::MalformedLayer { position: 4, .. })
        ));
    }

    #[test]
    fn params_need_multiples_or_scales() {
        let err = parse_genome("nc: 80\nbackbone: []\nhead: []\n", GeMode::Ge1).unwrap_err();
        assert!(matches!(err, GenomeError::InvalidParams { .. }));
    }

    #[test]
    fn block_style_tuples_accepted() {
        let text = "nc: 3\ndepth_multiple: 1.0\nwidth_multiple: 1.0\nbackbone:\n  -\n    - -1\n    - 1\n    - Conv\n    - [16, 3, 2]\nhead: []\n";
        let g = parse_genome(text, GeMode::Ge1).unwrap();
        assert_eq!(g.backbone()[0].to_string(), "[-1, 1, Conv, [16, 3, 2]]");
    }

    #[test]
    fn serialization_round_trips() {
        for (text, mode) in [(YOLOV3, GeMode::Ge1), (GE2_EXAMPLE1, GeMode::Ge2), (GE2_EXAMPLE2, GeMode::Ge2)] {
            let g = parse_genome(text, mode).unwrap();
            let out = serialize_genome(&g);
            let again = parse_genome(&out, mode).unwrap();
            assert_eq!(g, again);
            assert_eq!(serialize_genome(&again), out);
        }
    }

    #[test]
    fn ge1_emits_markers_and_ge2_does_not() {
        let g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        let out = serialize_genome(&g);
        assert_eq!(out.matches(BLOCK_MARKER).count(), 3);
        assert!(out.contains("  - [[27, 22, 15], 1, Detect, [nc]]\n"));
        assert!(out.contains("  - [-1, 1, nn.Upsample, [None, 2, nearest]]\n"));
        let out2 = serialize_genome(&g.with_mode(GeMode::Ge2));
        assert!(!out2.contains(BLOCK_MARKER));
        assert_eq!(genome_fingerprint(&g), genome_fingerprint(&parse_genome(&out2, GeMode::Ge2).unwrap()));
    }

    #[test]
    fn empty_head_always_emitted() {
        let mut g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        g.head_mut().clear();
        g.refresh_source();
        let out = serialize_genome(&g);
        assert!(out.contains("head: []"));
        let again = parse_genome(&out, GeMode::Ge1).unwrap();
        assert!(again.head().is_empty());
    }

    #[test]
    fn split_merge_identity() {
        for (text, mode, n) in [(YOLOV3, GeMode::Ge1, 3), (GE2_EXAMPLE2, GeMode::Ge2, 1)] {
            let g = parse_genome(text, mode).unwrap();
            let blocks = split_blocks(&g);
            assert_eq!(blocks.len(), n);
            assert_eq!(merge_blocks(blocks).unwrap(), g);
        }
    }

    #[test]
    fn merge_rejects_bad_layout() {
        let g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        let mut blocks = split_blocks(&g);
        blocks.swap(0, 1);
        assert!(matches!(merge_blocks(blocks), Err(GenomeError::BlockLayout { .. })));
    }

    #[test]
    fn fingerprint_semantics() {
        let g = parse_genome(YOLOV3, GeMode::Ge1).unwrap();
        let fp = genome_fingerprint(&g);
        let reserialized = parse_genome(&serialize_genome(&g), GeMode::Ge1).unwrap();
        assert_eq!(fp, genome_fingerprint(&reserialized));

        let edited = YOLOV3.replace("[-1, 1, Conv, [32, 3, 1]] # 0", "[-1, 1, Conv, [40, 3, 1]] # 0");
        assert_ne!(fp, genome_fingerprint(&parse_genome(&edited, GeMode::Ge1).unwrap()));

        let recommented = YOLOV3
            .replace("# number of classes", "# classes")
            .replace("# --Block--\n# head", "# the head");
        assert_eq!(fp, genome_fingerprint(&parse_genome(&recommented, GeMode::Ge1).unwrap()));
    }

    #[test]
    fn extra_keys_preserved() {
        let text = format!("{YOLOV3}\nlr0: 0.01\nweight_decay: 0.0005\n");
        let g = parse_genome(&text, GeMode::Ge2).unwrap();
        assert_eq!(g.params().extra.len(), 2);
        let again = parse_genome(&serialize_genome(&g), GeMode::Ge2).unwrap();
        assert_eq!(g, again);
        assert_ne!(genome_fingerprint(&g), genome_fingerprint(&parse_genome(YOLOV3, GeMode::Ge2).unwrap()));
    }

    #[test]
    fn quoted_strings_survive() {
        assert_eq!(fmt_str("nearest"), "nearest");
        assert_eq!(fmt_str("a b"), "\"a b\"");
        assert_eq!(fmt_str("True"), "\"True\"");
        assert_eq!(fmt_str("12"), "\"12\"");
    }
}
