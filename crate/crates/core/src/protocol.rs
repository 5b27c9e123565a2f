//! Parser and renderer for the tagged multi-turn interaction grammar.
//!
//! A policy turn is a sequence of tagged segments. A non-final turn is
//! `<think>…</think><tool_call>…</tool_call>`; the final turn is
//! `<think>…</think><answer>…</answer>`. Whitespace between and around
//! segments is permitted; anything else outside a tag pair is stray text.
//!
//! Malformed input is data, not failure: [`parse_turn`] never errors and
//! instead reports every detectable violation on the returned [`Turn`].

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// The sentinel that halts generation and triggers tool dispatch.
pub const SENTINEL: &str = TOOL_CALL_CLOSE;

/// Kind of a tagged segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Think,
    ToolCall,
    Answer,
}

impl SegmentKind {
    fn open_tag(self) -> &'static str {
        match self {
            SegmentKind::Think => THINK_OPEN,
            SegmentKind::ToolCall => TOOL_CALL_OPEN,
            SegmentKind::Answer => ANSWER_OPEN,
        }
    }

    fn close_tag(self) -> &'static str {
        match self {
            SegmentKind::Think => THINK_CLOSE,
            SegmentKind::ToolCall => TOOL_CALL_CLOSE,
            SegmentKind::Answer => ANSWER_CLOSE,
        }
    }
}

/// Structural violation classes reported by [`parse_turn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationCode {
    MissingThink,
    MissingAction,
    WrongOrder,
    DuplicateSegment,
    NestedTags,
    UnclosedTag,
    StrayText,
    EmptySegment,
    AnswerBeforeFinal,
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ViolationCode::MissingThink => "missing_think",
            ViolationCode::MissingAction => "missing_action",
            ViolationCode::WrongOrder => "wrong_order",
            ViolationCode::DuplicateSegment => "duplicate_segment",
            ViolationCode::NestedTags => "nested_tags",
            ViolationCode::UnclosedTag => "unclosed_tag",
            ViolationCode::StrayText => "stray_text",
            ViolationCode::EmptySegment => "empty_segment",
            ViolationCode::AnswerBeforeFinal => "answer_before_final",
        };
        f.write_str(name)
    }
}

/// A violation with its byte span `[start, end)` into the raw turn text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub span: (usize, usize),
}

impl Violation {
    fn new(code: ViolationCode, start: usize, end: usize) -> Self {
        Violation {
            code,
            span: (start, end),
        }
    }
}

/// Parsed body of a tool-call segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallPayload {
    pub tool: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Map<String, Value>>,
}

/// Verbatim body of an answer segment; normalization happens at scoring time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPayload {
    pub answer_text: String,
}

/// The action carried by a turn. A turn never carries both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnAction {
    ToolCall(ToolCallPayload),
    Answer(AnswerPayload),
}

/// Structural kind of the action segment, known even when the payload
/// inside it fails to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    ToolCall,
    Answer,
}

/// One parsed policy turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// Position of the turn within its episode; assigned by the caller.
    pub index: usize,
    /// Inner text of the first think segment, empty when absent.
    pub think_text: String,
    /// Structural kind of the first action segment, if any.
    pub action_kind: Option<ActionKind>,
    /// Parsed action; populated only when the segment body parses.
    pub action: Option<TurnAction>,
    /// Verbatim inner text of the first action segment, if any.
    pub action_text: Option<String>,
    /// The raw policy output this turn was parsed from.
    pub raw_text: String,
    /// Exhaustive list of detected violations; empty iff well-formed.
    pub violations: Vec<Violation>,
}

impl Turn {
    pub fn is_well_formed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn tool_call(&self) -> Option<&ToolCallPayload> {
        match &self.action {
            Some(TurnAction::ToolCall(p)) => Some(p),
            _ => None,
        }
    }

    pub fn answer_text(&self) -> Option<&str> {
        match &self.action {
            Some(TurnAction::Answer(p)) => Some(p.answer_text.as_str()),
            _ => None,
        }
    }

    /// Policy-authored text of the turn with the protocol tags removed.
    /// This is what the repetition detector scans; observations never
    /// pass through here.
    pub fn policy_text(&self) -> String {
        strip_tags(&self.raw_text)
    }
}

/// Why a tool-call body failed to parse into a [`ToolCallPayload`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemaViolation {
    /// Body is not parseable as a key-value document.
    Unparseable(String),
    /// Body parsed but is not a key-value object.
    NotAnObject,
    /// A mandatory key (`tool` or `task`) is absent.
    MissingKey(&'static str),
    /// A key is present but its value has the wrong kind.
    WrongValueKind(&'static str),
    /// A key outside the payload schema is present.
    ExtraneousKey(String),
}

impl fmt::Display for SchemaViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemaViolation::Unparseable(msg) => write!(f, "payload not parseable: {msg}"),
            SchemaViolation::NotAnObject => write!(f, "payload is not a key-value object"),
            SchemaViolation::MissingKey(k) => write!(f, "payload missing mandatory key `{k}`"),
            SchemaViolation::WrongValueKind(k) => {
                write!(f, "payload key `{k}` has wrong value kind")
            }
            SchemaViolation::ExtraneousKey(k) => write!(f, "payload carries extraneous key `{k}`"),
        }
    }
}

/// Error returned by [`render_turn`] for turns that cannot be rendered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RenderError {
    /// The turn carries violations; only well-formed turns render.
    HasViolations,
    /// The turn has no parsed action to emit.
    MissingAction,
}

impl fmt::Display for RenderError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RenderError::HasViolations => write!(f, "turn has violations and cannot be rendered"),
            RenderError::MissingAction => write!(f, "turn has no parsed action to render"),
        }
    }
}

const ALL_TAGS: [&str; 6] = [
    THINK_OPEN,
    THINK_CLOSE,
    TOOL_CALL_OPEN,
    TOOL_CALL_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
];

fn strip_tags(raw: &str) -> String {
    let mut out = raw.to_string();
    for tag in ALL_TAGS {
        out = out.replace(tag, " ");
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct TagHit {
    pos: usize,
    len: usize,
    kind: SegmentKind,
    is_close: bool,
}

/// Earliest tag occurrence at or after `from`. Tag literals are ASCII and
/// no two can match at the same position, so the earliest hit is unique.
fn next_tag(raw: &str, from: usize) -> Option<TagHit> {
    let mut best: Option<TagHit> = None;
    let kinds = [
        SegmentKind::Think,
        SegmentKind::ToolCall,
        SegmentKind::Answer,
    ];
    for kind in kinds {
        for (tag, is_close) in [(kind.open_tag(), false), (kind.close_tag(), true)] {
            if let Some(rel) = raw[from..].find(tag) {
                let pos = from + rel;
                if best.is_none_or(|b| pos < b.pos) {
                    best = Some(TagHit {
                        pos,
                        len: tag.len(),
                        kind,
                        is_close,
                    });
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy)]
struct RawSegment {
    kind: SegmentKind,
    open_pos: usize,
    inner: (usize, usize),
    close_end: usize,
}

/// Flags a StrayText violation for any non-whitespace content in
/// `raw[start..end)`.
fn flag_stray(raw: &str, start: usize, end: usize, violations: &mut Vec<Violation>) {
    let window = &raw[start..end];
    let mut first = None;
    let mut last_end = 0;
    for (i, ch) in window.char_indices() {
        if !ch.is_whitespace() {
            if first.is_none() {
                first = Some(i);
            }
            last_end = i + ch.len_utf8();
        }
    }
    if let Some(f) = first {
        violations.push(Violation::new(
            ViolationCode::StrayText,
            start + f,
            start + last_end,
        ));
    }
}

/// Tokenizes `raw` into complete tagged segments, reporting stray text,
/// nesting, and unclosed tags along the way. Close tags of a *different*
/// kind inside an open segment are treated as content; open tags inside a
/// segment violate non-nested closure.
fn scan_segments(raw: &str) -> (Vec<RawSegment>, Vec<Violation>) {
    let mut segments = Vec::new();
    let mut violations = Vec::new();
    let mut pos = 0usize;

    'outer: while let Some(hit) = next_tag(raw, pos) {
        flag_stray(raw, pos, hit.pos, &mut violations);
        if hit.is_close {
            // Unmatched close tag outside any segment: stray text.
            violations.push(Violation::new(
                ViolationCode::StrayText,
                hit.pos,
                hit.pos + hit.len,
            ));
            pos = hit.pos + hit.len;
            continue;
        }
        let open_pos = hit.pos;
        let kind = hit.kind;
        let content_start = hit.pos + hit.len;
        let mut scan = content_start;
        loop {
            match next_tag(raw, scan) {
                None => {
                    violations.push(Violation::new(
                        ViolationCode::UnclosedTag,
                        open_pos,
                        raw.len(),
                    ));
                    break 'outer;
                }
                Some(h) if h.is_close && h.kind == kind => {
                    segments.push(RawSegment {
                        kind,
                        open_pos,
                        inner: (content_start, h.pos),
                        close_end: h.pos + h.len,
                    });
                    pos = h.pos + h.len;
                    break;
                }
                Some(h) if !h.is_close => {
                    violations.push(Violation::new(
                        ViolationCode::NestedTags,
                        h.pos,
                        h.pos + h.len,
                    ));
                    scan = h.pos + h.len;
                }
                Some(h) => {
                    // Mismatched close tag: content.
                    scan = h.pos + h.len;
                }
            }
        }
    }
    if next_tag(raw, pos).is_none() {
        flag_stray(raw, pos, raw.len(), &mut violations);
    }
    (segments, violations)
}

/// Parses raw policy output into a [`Turn`].
///
/// The returned violation list is exhaustive: every detectable violation is
/// recorded, not just the first. The action is populated only when its
/// segment body parses; the answer body always parses verbatim, a tool-call
/// body must satisfy [`parse_tool_payload`].
///
/// `is_final_expected = false` additionally flags an answer segment as
/// `AnswerBeforeFinal`. Callers that determine finality from the emitted
/// segment itself (the episode engine does) pass `true` whenever an answer
/// is acceptable.
pub fn parse_turn(raw: &str, is_final_expected: bool) -> Turn {
    let (segments, mut violations) = scan_segments(raw);

    let thinks: Vec<&RawSegment> = segments
        .iter()
        .filter(|s| s.kind == SegmentKind::Think)
        .collect();
    let actions: Vec<&RawSegment> = segments
        .iter()
        .filter(|s| s.kind != SegmentKind::Think)
        .collect();

    if thinks.is_empty() {
        violations.push(Violation::new(ViolationCode::MissingThink, 0, raw.len()));
    }
    for extra in thinks.iter().skip(1) {
        violations.push(Violation::new(
            ViolationCode::DuplicateSegment,
            extra.open_pos,
            extra.close_end,
        ));
    }
    if actions.is_empty() {
        violations.push(Violation::new(ViolationCode::MissingAction, 0, raw.len()));
    }
    for extra in actions.iter().skip(1) {
        violations.push(Violation::new(
            ViolationCode::DuplicateSegment,
            extra.open_pos,
            extra.close_end,
        ));
    }
    if let (Some(think), Some(action)) = (thinks.first(), actions.first()) {
        if action.open_pos < think.open_pos {
            violations.push(Violation::new(
                ViolationCode::WrongOrder,
                action.open_pos,
                action.close_end,
            ));
        }
    }
    for seg in &segments {
        let empty = raw[seg.inner.0..seg.inner.1].trim().is_empty();
        let checked = matches!(seg.kind, SegmentKind::Think | SegmentKind::Answer);
        if checked && empty {
            violations.push(Violation::new(
                ViolationCode::EmptySegment,
                seg.inner.0,
                seg.inner.1,
            ));
        }
    }
    if !is_final_expected {
        if let Some(ans) = actions.iter().find(|s| s.kind == SegmentKind::Answer) {
            violations.push(Violation::new(
                ViolationCode::AnswerBeforeFinal,
                ans.open_pos,
                ans.close_end,
            ));
        }
    }

    let think_text = thinks
        .first()
        .map(|s| raw[s.inner.0..s.inner.1].to_string())
        .unwrap_or_default();

    let (action_kind, action, action_text) = match actions.first() {
        None => (None, None, None),
        Some(seg) => {
            let inner = raw[seg.inner.0..seg.inner.1].to_string();
            match seg.kind {
                SegmentKind::Answer => (
                    Some(ActionKind::Answer),
                    Some(TurnAction::Answer(AnswerPayload {
                        answer_text: inner.clone(),
                    })),
                    Some(inner),
                ),
                SegmentKind::ToolCall => {
                    let parsed = parse_tool_payload(&inner).ok().map(TurnAction::ToolCall);
                    (Some(ActionKind::ToolCall), parsed, Some(inner))
                }
                SegmentKind::Think => unreachable!("think segments are filtered out of actions"),
            }
        }
    };

    Turn {
        index: 0,
        think_text,
        action_kind,
        action,
        action_text,
        raw_text: raw.to_string(),
        violations,
    }
}

/// Parses the body of a tool_call segment into a payload.
///
/// The body must be a key-value document with mandatory text keys `tool`
/// and `task` and an optional map key `arguments`. Anything else is a
/// [`SchemaViolation`], which downstream classification treats as an
/// invocation-schema error.
pub fn parse_tool_payload(inner: &str) -> Result<ToolCallPayload, SchemaViolation> {
    let value: Value =
        serde_json::from_str(inner).map_err(|e| SchemaViolation::Unparseable(e.to_string()))?;
    let obj = value.as_object().ok_or(SchemaViolation::NotAnObject)?;
    for key in obj.keys() {
        if key != "tool" && key != "task" && key != "arguments" {
            return Err(SchemaViolation::ExtraneousKey(key.clone()));
        }
    }
    let tool = obj
        .get("tool")
        .ok_or(SchemaViolation::MissingKey("tool"))?
        .as_str()
        .ok_or(SchemaViolation::WrongValueKind("tool"))?
        .to_string();
    let task = obj
        .get("task")
        .ok_or(SchemaViolation::MissingKey("task"))?
        .as_str()
        .ok_or(SchemaViolation::WrongValueKind("task"))?
        .to_string();
    let arguments = match obj.get("arguments") {
        None => None,
        Some(Value::Object(map)) => Some(map.clone()),
        Some(_) => return Err(SchemaViolation::WrongValueKind("arguments")),
    };
    Ok(ToolCallPayload {
        tool,
        task,
        arguments,
    })
}

/// Renders a well-formed turn back to canonical text.
///
/// The think and answer bodies are emitted verbatim; a tool-call payload is
/// emitted as canonical JSON (sorted keys, no extra whitespace), so
/// `parse_turn(render_turn(t))` reproduces the turn's segments exactly.
pub fn render_turn(turn: &Turn) -> Result<String, RenderError> {
    if !turn.is_well_formed() {
        return Err(RenderError::HasViolations);
    }
    let action = turn.action.as_ref().ok_or(RenderError::MissingAction)?;
    let mut out = String::new();
    out.push_str(THINK_OPEN);
    out.push_str(&turn.think_text);
    out.push_str(THINK_CLOSE);
    match action {
        TurnAction::ToolCall(payload) => {
            out.push_str(TOOL_CALL_OPEN);
            out.push_str(&serde_json::to_string(payload).expect("payload serializes"));
            out.push_str(TOOL_CALL_CLOSE);
        }
        TurnAction::Answer(payload) => {
            out.push_str(ANSWER_OPEN);
            out.push_str(&payload.answer_text);
            out.push_str(ANSWER_CLOSE);
        }
    }
    Ok(out)
}

/// Returns the end offset of the first complete `</tool_call>` in the
/// stream, or `None`. The orchestrator cuts generation here and dispatches
/// the pending call.
pub fn find_sentinel(stream: &str) -> Option<usize> {
    stream.find(SENTINEL).map(|p| p + SENTINEL.len())
}
