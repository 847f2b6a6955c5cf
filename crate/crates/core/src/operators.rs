//! Variation operators: prompt construction, payload extraction and block
//! splicing for LLM-driven mutation and crossover, plus seeded mock
//! operators for runs without a model.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{lookup, ModuleKind, RepeatRule};
use crate::genome::{
    genome_fingerprint, merge_blocks, serialize_genome, ArgValue, Block, BlockKind, GeMode, LayerSource,
    LayerSpec, ModelGenome, BLOCK_MARKER,
};
use crate::llm::{ChatBackend, ChatMessage, CompletionRequest, LlmConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error("response contained no content")]
    EmptyResponse,
    #[error("parents use different segmentation modes ({0} vs {1})")]
    ModeMismatch(GeMode, GeMode),
    #[error("cannot read template {path}: {reason}")]
    Template { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Mutate,
    Crossover,
}

/// The part of the genome an operator is asked to change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Parameters,
    Backbone,
    Head,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Parameters, Target::Backbone, Target::Head];

    pub fn part_name(self) -> &'static str {
        match self {
            Target::Parameters => "parameters",
            Target::Backbone => "backbone",
            Target::Head => "head",
        }
    }

    fn block_kind(self) -> BlockKind {
        match self {
            Target::Parameters => BlockKind::Parameters,
            Target::Backbone => BlockKind::Backbone,
            Target::Head => BlockKind::Head,
        }
    }

    fn block_index(self) -> usize {
        match self {
            Target::Parameters => 0,
            Target::Backbone => 1,
            Target::Head => 2,
        }
    }
}

/// Role-play framing placed in the system message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    pub system: String,
}

impl Default for Persona {
    fn default() -> Self {
        Self {
            name: "detector-architect".into(),
            system: "You are a senior computer-vision engineer who designs compact, accurate \
                     YOLO object detectors. You edit Ultralytics model configuration files and \
                     reason about channel widths, depth and feature-pyramid wiring before \
                     answering."
                .into(),
        }
    }
}

impl Persona {
    pub fn load(path: &Path) -> Result<Self, OperatorError> {
        let system = read_template(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "persona".into());
        Ok(Self { name, system })
    }
}

/// Outcome of the operation that produced an individual, fed back into the
/// next prompt that uses it as a parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EotFeedback {
    pub operator: OperatorKind,
    pub valid: bool,
    pub delta_params: f64,
    pub delta_cost: f64,
    pub delta_precision: f64,
    pub delta_recall: f64,
}

/// Prompt templates with `{block}`, `{whole_file}`, `{target_part}`,
/// `{feedback}` and `{format_rules}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub mutate_block: String,
    pub mutate_whole: String,
    pub crossover_block: String,
    pub crossover_whole: String,
    /// Uses `{operator}`, `{validity}`, `{delta_params}`, `{delta_cost}`,
    /// `{delta_precision}` and `{delta_recall}`.
    pub feedback: String,
    pub format_rules: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            mutate_block: "Improve the {target_part} section below. Aim for fewer parameters and \
                           lower compute while keeping or raising precision and recall.\n\n\
                           {block}\n{feedback}\n{format_rules}\nReturn only the {target_part} section."
                .into(),
            mutate_whole: "Here is a complete model configuration. Change its {target_part} and \
                           leave the other parts as they are. Aim for fewer parameters and lower \
                           compute while keeping or raising precision and recall.\n\n\
                           {whole_file}\n{feedback}\n{format_rules}\nReturn the complete file."
                .into(),
            crossover_block: "Combine the two {target_part} sections below into one that keeps the \
                              strengths of both.\n\n{block}\n{feedback}\n{format_rules}\n\
                              Return only the {target_part} section."
                .into(),
            crossover_whole: "Combine the two model configurations below, drawing the {target_part} \
                              from both parents.\n\n{whole_file}\n{feedback}\n{format_rules}\n\
                              Return the complete file."
                .into(),
            feedback: "The previous {operator} on this parent produced a {validity} model. Change \
                       versus its parent: params {delta_params}, cost {delta_cost}, precision \
                       {delta_precision}, recall {delta_recall}.\n"
                .into(),
            format_rules: "Each layer is a flow-style list [from, number, module, args]: from is \
                           the input layer index (-1 for the previous layer, a list for several \
                           inputs), number is the repeat count, module is one of Conv, Bottleneck, \
                           SPP, SPPF, C2f, SCDown, PSA, Concat, nn.Upsample, Detect, v10Detect, and \
                           args are the module arguments. Indices count from 0 through the \
                           backbone and continue into the head. Answer with a single ```yaml fenced \
                           block.\n"
                .into(),
        }
    }
}

fn read_template(path: &Path) -> Result<String, OperatorError> {
    std::fs::read_to_string(path).map_err(|e| OperatorError::Template {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

impl PromptTemplates {
    /// Defaults overridden by `<name>.txt` files found in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, OperatorError> {
        let mut t = Self::default();
        for (name, slot) in [
            ("mutate_block", &mut t.mutate_block),
            ("mutate_whole", &mut t.mutate_whole),
            ("crossover_block", &mut t.crossover_block),
            ("crossover_whole", &mut t.crossover_whole),
            ("feedback", &mut t.feedback),
            ("format_rules", &mut t.format_rules),
        ] {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                *slot = read_template(&path)?;
            }
        }
        Ok(t)
    }
}

fn signed(x: f64) -> String {
    if x >= 0.0 {
        format!("+{x}")
    } else {
        format!("{x}")
    }
}

pub fn render_feedback(fb: &EotFeedback, template: &str) -> String {
    let op = match fb.operator {
        OperatorKind::Mutate => "mutation",
        OperatorKind::Crossover => "crossover",
    };
    template
        .replace("{operator}", op)
        .replace("{validity}", if fb.valid { "valid" } else { "invalid" })
        .replace("{delta_params}", &signed(fb.delta_params))
        .replace("{delta_cost}", &signed(fb.delta_cost))
        .replace("{delta_precision}", &signed(fb.delta_precision))
        .replace("{delta_recall}", &signed(fb.delta_recall))
}

fn fenced(text: &str) -> String {
    format!("```yaml\n{}\n```\n", text.trim_end())
}

fn comment_lines(block: &Block) -> String {
    block
        .raw_comments
        .iter()
        .filter(|c| c.trim() != BLOCK_MARKER)
        .fold(String::new(), |mut s, c| {
            s.push_str(c);
            s.push('\n');
            s
        })
}

/// A block as it appears in a three-block file, minus the marker line.
fn block_text(block: &Block) -> String {
    format!("{}{}", comment_lines(block), block.to_yaml())
}

fn target_block(g: &ModelGenome, target: Target) -> &Block {
    let kind = target.block_kind();
    g.blocks()
        .iter()
        .find(|b| b.kind() == kind)
        .expect("three-block genomes carry every block kind")
}

/// Builds the chat request for one operator call. GE1 prompts embed only the
/// target block of each parent; GE2 prompts embed the whole file(s) and name
/// the part to change.
pub fn build_prompt(
    parents: &[&ModelGenome],
    target: Target,
    persona: &Persona,
    feedback: Option<&EotFeedback>,
    templates: &PromptTemplates,
    llm: &LlmConfig,
) -> CompletionRequest {
    let mode = parents.first().map_or(GeMode::Ge2, |p| p.mode());
    let labelled = |texts: Vec<String>| -> String {
        if texts.len() == 1 {
            return fenced(&texts[0]);
        }
        texts
            .iter()
            .zip(["A", "B", "C", "D"])
            .map(|(t, l)| format!("Parent {l}:\n{}", fenced(t)))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let (template, block, whole) = match mode {
        GeMode::Ge1 => {
            let texts = parents.iter().map(|p| target_block(p, target).to_yaml()).collect();
            let t = if parents.len() > 1 {
                &templates.crossover_block
            } else {
                &templates.mutate_block
            };
            (t, labelled(texts), String::new())
        }
        GeMode::Ge2 => {
            let texts = parents.iter().map(|p| p.source_text().to_string()).collect();
            let t = if parents.len() > 1 {
                &templates.crossover_whole
            } else {
                &templates.mutate_whole
            };
            (t, String::new(), labelled(texts))
        }
    };
    let feedback = feedback
        .map(|f| render_feedback(f, &templates.feedback))
        .unwrap_or_default();
    let user = template
        .replace("{format_rules}", &templates.format_rules)
        .replace("{feedback}", &feedback)
        .replace("{target_part}", target.part_name())
        .replace("{block}", &block)
        .replace("{whole_file}", &whole);
    CompletionRequest {
        model: llm.model.clone(),
        messages: vec![ChatMessage::system(persona.system.clone()), ChatMessage::user(user)],
        temperature: llm.temperature,
        max_tokens: llm.max_tokens,
    }
}

/// First fenced code block of a response (language tag optional), else the
/// whole response. An unterminated fence runs to the end of the text.
pub fn extract_yaml_payload(response: &str) -> Result<String, OperatorError> {
    let mut lines = response.lines();
    let mut body = None;
    while let Some(line) = lines.next() {
        if line.trim_start().starts_with("```") {
            let inner: Vec<&str> = lines.by_ref().take_while(|l| !l.trim_start().starts_with("```")).collect();
            body = Some(inner.join("\n"));
            break;
        }
    }
    let payload = body.unwrap_or_else(|| response.to_string());
    let trimmed = payload.trim_matches(|c| c == '\n' || c == '\r').trim_end();
    if trimmed.trim().is_empty() {
        return Err(OperatorError::EmptyResponse);
    }
    Ok(trimmed.to_string())
}

/// Renders the exchange for the run log.
pub fn render_transcript(req: &CompletionRequest, response: &str) -> String {
    let mut out = String::new();
    for m in &req.messages {
        let role = match m.role {
            crate::llm::Role::System => "SYSTEM",
            crate::llm::Role::User => "USER",
            crate::llm::Role::Assistant => "ASSISTANT",
        };
        let _ = write!(out, "=== {role} ===\n{}\n", m.content);
    }
    let _ = write!(out, "=== RESPONSE ===\n{response}\n");
    out
}

/// The request portion of a transcript, for replay comparisons.
pub fn transcript_prompt(transcript: &str) -> &str {
    transcript
        .find("=== RESPONSE ===\n")
        .map_or(transcript, |i| &transcript[..i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorResult {
    pub kind: OperatorKind,
    pub parents: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Target>,
    pub child_text: String,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// Set when no child could be produced (client or extraction error).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

fn wrap_section(payload: &str, key: &str) -> String {
    let has_key = matches!(
        serde_yaml::from_str::<serde_yaml::Value>(payload),
        Ok(serde_yaml::Value::Mapping(m)) if m.contains_key(key)
    );
    if has_key {
        return format!("{}\n", payload.trim_end());
    }
    let mut out = format!("{key}:\n");
    for line in payload.lines() {
        if line.trim().is_empty() {
            out.push('\n');
        } else {
            let _ = writeln!(out, "  {line}");
        }
    }
    out
}

/// Three-block child text: `base` with its `target` block replaced by
/// `payload`. Untouched blocks are emitted exactly as `serialize_genome`
/// would.
pub fn splice_payload(base: &ModelGenome, target: Target, payload: &str) -> String {
    let mut out = String::new();
    for (i, t) in Target::ALL.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(BLOCK_MARKER);
        out.push('\n');
        if *t == target {
            match t {
                Target::Parameters => {
                    out.push_str(payload.trim_end());
                    out.push('\n');
                }
                _ => out.push_str(&wrap_section(payload, t.part_name())),
            }
        } else {
            out.push_str(&block_text(target_block(base, *t)));
        }
    }
    out
}

fn assemble_child(base: &ModelGenome, target: Target, payload: &str) -> String {
    match base.mode() {
        GeMode::Ge1 => splice_payload(base, target, payload),
        GeMode::Ge2 => format!("{}\n", payload.trim_end()),
    }
}

fn llm_operate(
    kind: OperatorKind,
    parents: &[&ModelGenome],
    target: Target,
    persona: &Persona,
    feedback: Option<&EotFeedback>,
    templates: &PromptTemplates,
    llm: &LlmConfig,
    backend: &dyn ChatBackend,
) -> OperatorResult {
    let req = build_prompt(parents, target, persona, feedback, templates, llm);
    let mut result = OperatorResult {
        kind,
        parents: parents.iter().map(|p| genome_fingerprint(p)).collect(),
        target: Some(target),
        child_text: String::new(),
        transcript: String::new(),
        notes: Vec::new(),
        failure: None,
    };
    let completion = match backend.complete(&req) {
        Ok(c) => c,
        Err(e) => {
            result.transcript = render_transcript(&req, &format!("<error: {e}>"));
            result.failure = Some(e.to_string());
            return result;
        }
    };
    result.transcript = render_transcript(&req, &completion.text);
    if completion.attempts > 1 {
        result.notes.push(format!("succeeded after {} attempts", completion.attempts));
    }
    match extract_yaml_payload(&completion.text) {
        Ok(payload) => result.child_text = assemble_child(parents[0], target, &payload),
        Err(e) => result.failure = Some(e.to_string()),
    }
    result
}

/// Asks the model to rewrite one part of `parent`. Client failures are
/// reported in `failure`, never raised.
pub fn llm_mutate(
    parent: &ModelGenome,
    target: Target,
    persona: &Persona,
    feedback: Option<&EotFeedback>,
    templates: &PromptTemplates,
    llm: &LlmConfig,
    backend: &dyn ChatBackend,
) -> OperatorResult {
    llm_operate(OperatorKind::Mutate, &[parent], target, persona, feedback, templates, llm, backend)
}

/// Asks the model to merge one part of two parents. In three-block mode the
/// answer replaces that block of `a`.
pub fn llm_crossover(
    a: &ModelGenome,
    b: &ModelGenome,
    target: Target,
    persona: &Persona,
    feedback: Option<&EotFeedback>,
    templates: &PromptTemplates,
    llm: &LlmConfig,
    backend: &dyn ChatBackend,
) -> OperatorResult {
    llm_operate(OperatorKind::Crossover, &[a, b], target, persona, feedback, templates, llm, backend)
}

fn tidy(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq)]
enum Edit {
    Width(f64),
    Depth(f64),
    Repeats { layer: usize, delta: i64 },
    Channels { layer: usize, to: i64 },
    Duplicate { layer: usize },
}

impl Edit {
    fn describe(&self) -> String {
        match self {
            Edit::Width(f) => format!("width x{f}"),
            Edit::Depth(f) => format!("depth x{f}"),
            Edit::Repeats { layer, delta } => format!("layer {layer} repeats {delta:+}"),
            Edit::Channels { layer, to } => format!("layer {layer} channels -> {to}"),
            Edit::Duplicate { layer } => format!("duplicate layer {layer}"),
        }
    }

    fn touches(&self) -> Target {
        match self {
            Edit::Width(_) | Edit::Depth(_) => Target::Parameters,
            Edit::Repeats { .. } | Edit::Channels { .. } | Edit::Duplicate { .. } => Target::Backbone,
        }
    }
}

fn layer_mut(g: &mut ModelGenome, idx: usize) -> &mut LayerSpec {
    let nb = g.backbone().len();
    if idx < nb {
        &mut g.backbone_mut()[idx]
    } else {
        &mut g.head_mut()[idx - nb]
    }
}

/// Inserts a copy of layer `pos` right after it and rewires every later
/// reference so the copy takes the original's place downstream.
fn duplicate_layer(g: &mut ModelGenome, pos: usize) {
    let nb = g.backbone().len();
    let mut copy = g.layers().nth(pos).expect("index checked by caller").clone();
    copy.from = LayerSource::Single(-1);
    let total = g.layer_count();
    for j in (pos + 1)..total {
        let layer = layer_mut(g, j);
        for f in layer.from.indices_mut() {
            if *f >= 0 {
                if *f as usize >= pos {
                    *f += 1;
                }
            } else if (j as i64 + *f) < pos as i64 {
                *f -= 1;
            }
        }
    }
    if pos < nb {
        g.backbone_mut().insert(pos + 1, copy);
    } else {
        g.head_mut().insert(pos + 1 - nb, copy);
    }
}

fn section_of(g: &ModelGenome, idx: usize) -> Target {
    if idx < g.backbone().len() {
        Target::Backbone
    } else {
        Target::Head
    }
}

fn pick_edit(g: &ModelGenome, rng: &mut ChaCha8Rng) -> Option<Edit> {
    let layers: Vec<&LayerSpec> = g.layers().collect();
    let nc = g.params().nc as i64;
    let factor = *[0.75, 1.25].choose(rng).expect("non-empty");
    match rng.gen_range(0..5) {
        0 => Some(Edit::Width(factor)),
        1 => Some(Edit::Depth(factor)),
        2 => {
            let idx: Vec<usize> = (0..layers.len())
                .filter(|&i| {
                    lookup(&layers[i].module)
                        .is_some_and(|s| matches!(s.repeat_rule, RepeatRule::Sequential | RepeatRule::Internal))
                })
                .collect();
            let &layer = idx.choose(rng)?;
            let delta = if layers[layer].repeats > 1 && rng.gen_bool(0.5) { -1 } else { 1 };
            Some(Edit::Repeats { layer, delta })
        }
        3 => {
            let idx: Vec<usize> = (0..layers.len())
                .filter(|&i| {
                    lookup(&layers[i].module).is_some_and(|s| s.kind == ModuleKind::Conv)
                        && matches!(layers[i].args.first(), Some(ArgValue::Int(c)) if *c != nc)
                })
                .collect();
            let &layer = idx.choose(rng)?;
            let c = layers[layer].args[0].as_int().unwrap_or(8);
            let k = *[-2i64, -1, 1, 2].choose(rng).expect("non-empty");
            let nearest = ((c as f64 / 8.0).round() as i64) * 8;
            Some(Edit::Channels {
                layer,
                to: (nearest + 8 * k).max(8),
            })
        }
        _ => {
            let idx: Vec<usize> = (0..layers.len())
                .filter(|&i| lookup(&layers[i].module).is_some_and(|s| s.kind == ModuleKind::Bottleneck))
                .collect();
            idx.choose(rng).map(|&layer| Edit::Duplicate { layer })
        }
    }
}

fn apply_edit(g: &mut ModelGenome, edit: &Edit) {
    match edit {
        Edit::Width(f) | Edit::Depth(f) => {
            let width = matches!(edit, Edit::Width(_));
            let p = g.params_mut();
            if let Some(row) = p.scales.first_mut() {
                let v = if width { &mut row.width } else { &mut row.depth };
                *v = tidy(*v * f);
            }
            let slot = if width { &mut p.width_multiple } else { &mut p.depth_multiple };
            if let Some(v) = slot {
                *v = tidy(*v * f);
            }
        }
        Edit::Repeats { layer, delta } => {
            let l = layer_mut(g, *layer);
            l.repeats = (l.repeats as i64 + delta).max(1) as u32;
        }
        Edit::Channels { layer, to } => layer_mut(g, *layer).args[0] = ArgValue::Int(*to),
        Edit::Duplicate { layer } => duplicate_layer(g, *layer),
    }
}

/// Blocks other than `keep` are unchanged. Always true in single-block mode.
fn local_to(before: &ModelGenome, after: &ModelGenome, keep: Target) -> bool {
    before.mode() == GeMode::Ge2
        || Target::ALL
            .iter()
            .filter(|t| **t != keep)
            .all(|t| target_block(before, *t) == target_block(after, *t))
}

/// One seeded structural edit. In three-block mode edits that would spill
/// into a second block are skipped in favour of another draw.
pub fn mock_mutate(parent: &ModelGenome, rng_seed: u64) -> OperatorResult {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut chosen = None;
    for _ in 0..32 {
        let Some(edit) = pick_edit(parent, &mut rng) else {
            continue;
        };
        let mut child = parent.clone();
        apply_edit(&mut child, &edit);
        let keep = match &edit {
            Edit::Duplicate { layer } | Edit::Repeats { layer, .. } | Edit::Channels { layer, .. } => {
                section_of(parent, *layer)
            }
            other => other.touches(),
        };
        if child != *parent && local_to(parent, &child, keep) {
            chosen = Some((edit, child));
            break;
        }
    }
    let (edit, mut child) = chosen.unwrap_or_else(|| {
        let edit = Edit::Width(1.25);
        let mut child = parent.clone();
        apply_edit(&mut child, &edit);
        (edit, child)
    });
    child.refresh_source();
    OperatorResult {
        kind: OperatorKind::Mutate,
        parents: vec![genome_fingerprint(parent)],
        target: None,
        child_text: child.source_text().to_string(),
        transcript: format!("=== MOCK MUTATE ===\nseed: {rng_seed}\nedit: {}\n", edit.describe()),
        notes: vec![edit.describe()],
        failure: None,
    }
}

/// Three-block child taking block `i` from `b` where `from_b[i]` is set.
pub fn splice_blocks(a: &ModelGenome, b: &ModelGenome, from_b: [bool; 3]) -> ModelGenome {
    let blocks: Vec<Block> = Target::ALL
        .iter()
        .map(|t| {
            let src = if from_b[t.block_index()] { b } else { a };
            target_block(src, *t).clone()
        })
        .collect();
    merge_blocks(blocks).expect("blocks of valid parents recombine")
}

/// Single-point recombination of the concatenated layer lists.
fn one_point(a: &ModelGenome, b: &ModelGenome, cut: usize) -> ModelGenome {
    let la: Vec<LayerSpec> = a.layers().cloned().collect();
    let lb: Vec<LayerSpec> = b.layers().cloned().collect();
    let mut all: Vec<LayerSpec> = la[..cut.min(la.len())].to_vec();
    all.extend(lb.iter().skip(cut).cloned());
    let (ab, bb) = (a.backbone().len(), b.backbone().len());
    let split = if cut <= bb { bb.max(cut.min(all.len())) } else { ab.min(cut) };
    let split = split.min(all.len());
    let head = all.split_off(split);
    let mut child = ModelGenome::from_parts(a.mode(), a.params().clone(), all, head);
    child.refresh_source();
    child
}

/// Seeded recombination: per-block coin flips in three-block mode, a
/// single cut point over the layer list otherwise.
pub fn mock_crossover(a: &ModelGenome, b: &ModelGenome, rng_seed: u64) -> Result<OperatorResult, OperatorError> {
    if a.mode() != b.mode() {
        return Err(OperatorError::ModeMismatch(a.mode(), b.mode()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (child, note) = match a.mode() {
        GeMode::Ge1 => {
            let pattern = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
            let tag: String = pattern.iter().map(|x| if *x { 'b' } else { 'a' }).collect();
            (splice_blocks(a, b, pattern), format!("blocks {tag}"))
        }
        GeMode::Ge2 => {
            let shortest = a.layer_count().min(b.layer_count());
            let cut = if shortest > 1 { rng.gen_range(1..shortest) } else { 1 };
            (one_point(a, b, cut), format!("cut at layer {cut}"))
        }
    };
    Ok(OperatorResult {
        kind: OperatorKind::Crossover,
        parents: vec![genome_fingerprint(a), genome_fingerprint(b)],
        target: None,
        child_text: serialize_genome(&child),
        transcript: format!("=== MOCK CROSSOVER ===\nseed: {rng_seed}\n{note}\n"),
        notes: vec![note],
        failure: None,
    })
}

/// Corrupts a child so that it no longer parses: a two-element tuple is
/// inserted at the top of the head.
pub fn inject_fault(result: &mut OperatorResult) {
    let text = &result.child_text;
    let corrupted = match text.lines().position(|l| l.starts_with("head:")) {
        Some(i) => {
            let mut lines: Vec<&str> = text.lines().collect();
            lines.insert(i + 1, "  - [-1, 1]");
            lines.join("\n") + "\n"
        }
        None => format!("{text}\nhead:\n  - [-1, 1]\n"),
    };
    result.child_text = corrupted;
    result.notes.push("fault injected".into());
}
