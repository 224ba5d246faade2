//! Message grammar for both roles: tag scanning, parsing, format scoring,
//! rendering, and the interleaved think/select/answer trace format.
//!
//! Controller messages carry one `<think>` block and exactly one decision:
//! either a `<tool_call>` wrapping
//! `{"name": "timeseries_selection_tool", "arguments": {"ts_seg": [first, last]}}`
//! with inclusive bounds, or `<answer>ACCEPT</answer>`. Reasoner messages
//! carry one `<think>` block and one non-empty `<answer>` block.
//!
//! Parsing never fails: every malformation is reported in a [`FormatReport`].
//! Each distinct non-critical violation class costs [`DEDUCTION`], floored at
//! zero; any critical violation forces the score to -1.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::{
    normalize_answer, ControllerStep, Decision, InteractionTrajectory, ReasonerStep, Segment,
};

pub const DEDUCTION: f64 = 0.25;
pub const TOOL_NAME: &str = "timeseries_selection_tool";
pub const ACCEPT_LITERAL: &str = "ACCEPT";
/// Trace lint thresholds.
pub const MAX_TRACE_SEGMENTS: usize = 3;
pub const MIN_TRACE_SEGMENT_LEN: usize = 8;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    // non-critical
    MissingThink,
    MultipleThink,
    MultipleAnswers,
    AnswerInsideThink,
    TextOutsideBlocks,
    NestedBlock,
    UnknownToolKeys,
    // critical
    MissingAnswer,
    EmptyAnswer,
    NoDecision,
    MultipleDecisions,
    InvalidToolCall,
    InvalidAcceptance,
    SegmentOutOfBounds,
    DegenerateSegment,
    AcceptWithoutAnswer,
}

impl Violation {
    pub fn is_critical(self) -> bool {
        use Violation::*;
        matches!(
            self,
            MissingAnswer
                | EmptyAnswer
                | NoDecision
                | MultipleDecisions
                | InvalidToolCall
                | InvalidAcceptance
                | SegmentOutOfBounds
                | DegenerateSegment
                | AcceptWithoutAnswer
        )
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        match s.as_ref().and_then(Value::as_str) {
            Some(name) => f.write_str(name),
            None => write!(f, "{self:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub score: f64,
    pub critical: bool,
    pub violations: Vec<Violation>,
}

impl FormatReport {
    fn from_violations(mut violations: Vec<Violation>) -> Self {
        violations.sort_by_key(|v| *v as u8);
        violations.dedup();
        let critical = violations.iter().any(|v| v.is_critical());
        let score = if critical {
            -1.0
        } else {
            (1.0 - DEDUCTION * violations.len() as f64).max(0.0)
        };
        FormatReport { score, critical, violations }
    }
}

// ---------------------------------------------------------------------------
// Tag scanning
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Think,
    Answer,
    ToolCall,
    SelectionTool,
}

impl BlockKind {
    const ALL: [BlockKind; 4] =
        [BlockKind::Think, BlockKind::Answer, BlockKind::ToolCall, BlockKind::SelectionTool];

    fn name(self) -> &'static str {
        match self {
            BlockKind::Think => "think",
            BlockKind::Answer => "answer",
            BlockKind::ToolCall => "tool_call",
            BlockKind::SelectionTool => TOOL_NAME,
        }
    }
}

#[derive(Copy, Clone, Debug)]
struct TagEvent {
    kind: BlockKind,
    open: bool,
    start: usize,
    end: usize,
}

#[derive(Clone, Debug)]
struct Block {
    kind: BlockKind,
    outer: Range<usize>,
    inner: Range<usize>,
    parent: Option<BlockKind>,
}

#[derive(Debug, Default)]
struct Scan {
    /// Ordered by opening position.
    blocks: Vec<Block>,
    unmatched: Vec<TagEvent>,
}

fn scan_tags(raw: &str) -> Vec<TagEvent> {
    let bytes = raw.as_bytes();
    let mut events = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        let rest = &raw[i..];
        let close = rest.starts_with("</");
        let body = if close { &rest[2..] } else { &rest[1..] };
        let hit = BlockKind::ALL.iter().find(|k| {
            let name = k.name();
            body.starts_with(name) && body[name.len()..].starts_with('>')
        });
        match hit {
            Some(&kind) => {
                let len = kind.name().len() + if close { 3 } else { 2 };
                events.push(TagEvent { kind, open: !close, start: i, end: i + len });
                i += len;
            }
            None => i += 1,
        }
    }
    events
}

fn build_blocks(raw: &str) -> Scan {
    let mut scan = Scan::default();
    let mut stack: Vec<TagEvent> = Vec::new();
    for ev in scan_tags(raw) {
        if ev.open {
            stack.push(ev);
            continue;
        }
        match stack.iter().rposition(|o| o.kind == ev.kind) {
            Some(pos) => {
                scan.unmatched.extend(stack.drain(pos + 1..));
                let open = stack.pop().expect("position is within stack");
                scan.blocks.push(Block {
                    kind: ev.kind,
                    outer: open.start..ev.end,
                    inner: open.end..ev.start,
                    parent: stack.last().map(|o| o.kind),
                });
            }
            None => scan.unmatched.push(ev),
        }
    }
    scan.unmatched.extend(stack);
    scan.blocks.sort_by_key(|b| b.outer.start);
    scan
}

/// True when non-whitespace text (including stray tags) lies outside every
/// top-level block.
fn has_text_outside(raw: &str, scan: &Scan) -> bool {
    let mut cursor = 0;
    let mut outside = String::new();
    for b in scan.blocks.iter().filter(|b| b.parent.is_none()) {
        if b.outer.start >= cursor {
            outside.push_str(&raw[cursor..b.outer.start]);
            cursor = b.outer.end;
        }
    }
    outside.push_str(&raw[cursor.min(raw.len())..]);
    outside.chars().any(|c| !c.is_whitespace())
}

struct Layout<'a> {
    raw: &'a str,
    thinks: Vec<&'a Block>,
    answers: Vec<&'a Block>,
    tool_calls: Vec<&'a Block>,
    violations: Vec<Violation>,
}

/// Shared structural checks. `allowed` lists block kinds that may appear at
/// the top level; other top-level kinds count as stray text.
fn layout<'a>(raw: &'a str, scan: &'a Scan, allowed: &[BlockKind]) -> Layout<'a> {
    let mut out = Layout {
        raw,
        thinks: Vec::new(),
        answers: Vec::new(),
        tool_calls: Vec::new(),
        violations: Vec::new(),
    };
    let mut stray = has_text_outside(raw, scan);
    for b in &scan.blocks {
        match (b.parent, b.kind) {
            (None, k) if !allowed.contains(&k) => stray = true,
            (None, BlockKind::Think) => out.thinks.push(b),
            (None, BlockKind::Answer) => out.answers.push(b),
            (None, BlockKind::ToolCall) => out.tool_calls.push(b),
            (None, BlockKind::SelectionTool) => stray = true,
            (Some(BlockKind::Think), BlockKind::Answer) => {
                out.violations.push(Violation::AnswerInsideThink);
                out.answers.push(b);
            }
            (Some(_), _) => out.violations.push(Violation::NestedBlock),
        }
    }
    out.answers.sort_by_key(|b| b.outer.start);
    if stray {
        out.violations.push(Violation::TextOutsideBlocks);
    }
    match out.thinks.len() {
        0 => out.violations.push(Violation::MissingThink),
        1 => {}
        _ => out.violations.push(Violation::MultipleThink),
    }
    out
}

impl Layout<'_> {
    fn think_text(&self) -> String {
        self.thinks
            .first()
            .map(|b| self.raw[b.inner.clone()].trim().to_string())
            .unwrap_or_default()
    }

    fn inner(&self, b: &Block) -> &str {
        &self.raw[b.inner.clone()]
    }
}

// ---------------------------------------------------------------------------
// Reasoner
// ---------------------------------------------------------------------------

/// Parses a reasoner message. The first answer block wins.
pub fn parse_reasoner(raw: &str) -> (ReasonerStep, FormatReport) {
    let scan = build_blocks(raw);
    let mut lay = layout(raw, &scan, &[BlockKind::Think, BlockKind::Answer]);
    let mut answer = String::new();
    match lay.answers.first() {
        None => lay.violations.push(Violation::MissingAnswer),
        Some(first) => {
            answer = normalize_answer(lay.inner(first));
            if answer.is_empty() {
                lay.violations.push(Violation::EmptyAnswer);
            }
        }
    }
    if lay.answers.len() > 1 {
        lay.violations.push(Violation::MultipleAnswers);
    }
    let report = FormatReport::from_violations(std::mem::take(&mut lay.violations));
    if report.critical {
        answer.clear();
    }
    let step = ReasonerStep {
        think: lay.think_text(),
        answer,
        raw_message: raw.to_string(),
        format_score: report.score,
        critical: report.critical,
        violations: report.violations.clone(),
        tokens: Vec::new(),
        log_probs: Vec::new(),
    };
    (step, report)
}

// ---------------------------------------------------------------------------
// Controller
// ---------------------------------------------------------------------------

/// What the controller parser needs to know beyond the message text.
#[derive(Copy, Clone, Debug)]
pub struct ControllerContext {
    pub series_len: usize,
    /// Whether a reasoner answer exists for ACCEPT to accept.
    pub has_prior_answer: bool,
}

enum ToolParse {
    Segment(Segment, bool),
    Invalid(Violation),
}

fn parse_tool_payload(payload: &str, series_len: usize) -> ToolParse {
    let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(payload.trim()) else {
        return ToolParse::Invalid(Violation::InvalidToolCall);
    };
    if obj.get("name").and_then(Value::as_str) != Some(TOOL_NAME) {
        return ToolParse::Invalid(Violation::InvalidToolCall);
    }
    let Some(Value::Object(args)) = obj.get("arguments") else {
        return ToolParse::Invalid(Violation::InvalidToolCall);
    };
    let bounds = match args.get("ts_seg") {
        Some(Value::Array(a)) if a.len() == 2 => (a[0].as_u64(), a[1].as_u64()),
        _ => return ToolParse::Invalid(Violation::InvalidToolCall),
    };
    let (Some(first), Some(last)) = bounds else {
        return ToolParse::Invalid(Violation::InvalidToolCall);
    };
    let extra_keys = obj.len() > 2 || args.len() > 1;
    if last < first {
        return ToolParse::Invalid(Violation::DegenerateSegment);
    }
    if last >= series_len as u64 {
        return ToolParse::Invalid(Violation::SegmentOutOfBounds);
    }
    let seg = Segment { start: first as usize, end: last as usize + 1 };
    ToolParse::Segment(seg, extra_keys)
}

/// Parses one controller message into a step with its per-step score.
pub fn parse_controller(raw: &str, ctx: ControllerContext) -> (ControllerStep, FormatReport) {
    let scan = build_blocks(raw);
    let mut lay = layout(raw, &scan, &[BlockKind::Think, BlockKind::Answer, BlockKind::ToolCall]);
    let mut decision = None;
    let mut segment = None;
    match (lay.tool_calls.len(), lay.answers.len()) {
        (0, 0) => lay.violations.push(Violation::NoDecision),
        (1, 0) => match parse_tool_payload(lay.inner(lay.tool_calls[0]), ctx.series_len) {
            ToolParse::Segment(seg, extra) => {
                if extra {
                    lay.violations.push(Violation::UnknownToolKeys);
                }
                decision = Some(Decision::Continue);
                segment = Some(seg);
            }
            ToolParse::Invalid(v) => lay.violations.push(v),
        },
        (0, 1) => {
            if normalize_answer(lay.inner(lay.answers[0])) != ACCEPT_LITERAL {
                lay.violations.push(Violation::InvalidAcceptance);
            } else if !ctx.has_prior_answer {
                lay.violations.push(Violation::AcceptWithoutAnswer);
            } else {
                decision = Some(Decision::Accept);
            }
        }
        _ => lay.violations.push(Violation::MultipleDecisions),
    }
    let report = FormatReport::from_violations(std::mem::take(&mut lay.violations));
    if report.critical {
        decision = None;
        segment = None;
    }
    let step = ControllerStep {
        think: lay.think_text(),
        decision,
        proposed_segment: segment,
        raw_message: raw.to_string(),
        format_score: report.score,
        violation: report.critical,
        violations: report.violations.clone(),
        tokens: Vec::new(),
        log_probs: Vec::new(),
    };
    (step, report)
}

/// Why a controller trajectory fires the violation indicator.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralFault {
    CriticalStep,
    NonFinalWithoutSelection,
    FinalNotAccept,
}

/// First round (0-based) that fires the trajectory violation indicator.
pub fn controller_fault(steps: &[ControllerStep]) -> Option<(usize, StructuralFault)> {
    let last = steps.len().checked_sub(1)?;
    steps.iter().enumerate().find_map(|(i, s)| {
        if s.violation {
            Some((i, StructuralFault::CriticalStep))
        } else if i < last && (s.decision != Some(Decision::Continue) || s.proposed_segment.is_none())
        {
            Some((i, StructuralFault::NonFinalWithoutSelection))
        } else if i == last && s.decision != Some(Decision::Accept) {
            Some((i, StructuralFault::FinalNotAccept))
        } else {
            None
        }
    })
}

/// Trajectory-level controller format score: the mean per-step score when no
/// violation indicator fires, otherwise -1.
pub fn score_controller_trajectory(steps: &[ControllerStep]) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::usage("controller trajectory has no steps"));
    }
    let viol = if controller_fault(steps).is_some() { 1.0 } else { 0.0 };
    let mean = steps.iter().map(|s| s.format_score).sum::<f64>() / steps.len() as f64;
    Ok((1.0 - viol) * mean - viol)
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

pub fn render_controller_continue(think: &str, seg: Segment) -> String {
    let (first, last) = seg.to_inclusive();
    format!(
        "<think> {think} </think>\n<tool_call>\n{{\"name\": \"{TOOL_NAME}\", \"arguments\": {{\"ts_seg\": [{first}, {last}]}}}}\n</tool_call>"
    )
}

pub fn render_controller_accept(think: &str) -> String {
    format!("<think> {think} </think>\n<answer>{ACCEPT_LITERAL}</answer>")
}

pub fn render_reasoner(think: &str, answer: &str) -> String {
    format!("<think>{think}</think>\n<answer>\n{answer}\n</answer>")
}

// ---------------------------------------------------------------------------
// Interleaved traces
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStep {
    Think(String),
    /// Inclusive wire bounds.
    Select { first: usize, last: usize },
    Answer(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceLint {
    TooManySegments { count: usize },
    SegmentTooShort { index: usize, len: usize },
    SegmentOutOfRange { index: usize },
    MissingAnswer,
    MultipleAnswers,
    AnswerNotFinal,
    StrayText,
}

impl fmt::Display for TraceLint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceLint::TooManySegments { count } => {
                write!(f, "{count} segments exceeds maximum {MAX_TRACE_SEGMENTS}")
            }
            TraceLint::SegmentTooShort { index, len } => write!(
                f,
                "segment {index} has length {len}, below minimum {MIN_TRACE_SEGMENT_LEN}"
            ),
            TraceLint::SegmentOutOfRange { index } => write!(f, "segment {index} out of range"),
            TraceLint::MissingAnswer => f.write_str("missing answer"),
            TraceLint::MultipleAnswers => f.write_str("multiple answers"),
            TraceLint::AnswerNotFinal => f.write_str("answer is not the final step"),
            TraceLint::StrayText => f.write_str("text outside blocks"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub steps: Vec<TraceStep>,
    pub lints: Vec<TraceLint>,
}

impl Trace {
    pub fn selections(&self) -> Vec<(usize, usize)> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                TraceStep::Select { first, last } => Some((*first, *last)),
                _ => None,
            })
            .collect()
    }

    pub fn answer(&self) -> Option<&str> {
        self.steps.iter().find_map(|s| match s {
            TraceStep::Answer(a) => Some(a.as_str()),
            _ => None,
        })
    }

    /// One CONTINUE per selection followed by ACCEPT when an answer closes it.
    pub fn decisions(&self) -> Vec<Decision> {
        let mut out = vec![Decision::Continue; self.selections().len()];
        if self.answer().is_some() {
            out.push(Decision::Accept);
        }
        out
    }
}

/// Step list a trajectory exports to: the controller's reasoning before
/// each selection, then the last reasoner trace and the final answer.
pub fn trace_steps(trajectory: &InteractionTrajectory) -> Vec<TraceStep> {
    let mut steps = Vec::new();
    for round in &trajectory.rounds {
        if let (Some(Decision::Continue), Some(seg)) =
            (round.controller.decision, round.controller.proposed_segment)
        {
            let (first, last) = seg.to_inclusive();
            steps.push(TraceStep::Think(round.controller.think.clone()));
            steps.push(TraceStep::Select { first, last });
        }
    }
    let final_think = trajectory
        .rounds
        .iter()
        .rev()
        .find_map(|r| r.reasoner.as_ref())
        .map(|r| r.think.clone())
        .unwrap_or_default();
    steps.push(TraceStep::Think(final_think));
    steps.push(TraceStep::Answer(trajectory.final_answer.clone()));
    steps
}

pub fn serialize_trace_steps(steps: &[TraceStep]) -> String {
    let mut out = String::new();
    for s in steps {
        match s {
            TraceStep::Think(t) => out.push_str(&format!("<think> {t} </think>\n")),
            TraceStep::Select { first, last } => out.push_str(&format!(
                "<{TOOL_NAME}> [{first}, {last}] </{TOOL_NAME}>\n"
            )),
            TraceStep::Answer(a) => out.push_str(&format!("<answer> {a} </answer>\n")),
        }
    }
    out
}

pub fn serialize_sft_trace(trajectory: &InteractionTrajectory) -> String {
    serialize_trace_steps(&trace_steps(trajectory))
}

fn parse_selection(body: &str) -> Option<(usize, usize)> {
    let inner = body.trim().strip_prefix('[')?.strip_suffix(']')?;
    let (a, b) = inner.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

/// Parses an interleaved trace. Structural problems (unbalanced or nested
/// tags, unreadable selections) are errors; template constraints are lints.
/// `series_len` enables the bounds lint.
pub fn parse_sft_trace(raw: &str, series_len: Option<usize>) -> Result<Trace> {
    let scan = build_blocks(raw);
    if let Some(ev) = scan.unmatched.iter().min_by_key(|e| e.start) {
        return Err(Error::Parse {
            position: ev.start,
            message: format!(
                "unbalanced <{}{}> tag",
                if ev.open { "" } else { "/" },
                ev.kind.name()
            ),
        });
    }
    if let Some(b) = scan.blocks.iter().find(|b| b.parent.is_some()) {
        return Err(Error::Parse {
            position: b.outer.start,
            message: format!("nested <{}> block", b.kind.name()),
        });
    }
    let mut steps = Vec::new();
    let mut lints = Vec::new();
    for b in &scan.blocks {
        let body = &raw[b.inner.clone()];
        match b.kind {
            BlockKind::Think => steps.push(TraceStep::Think(body.trim().to_string())),
            BlockKind::Answer => steps.push(TraceStep::Answer(body.trim().to_string())),
            BlockKind::SelectionTool => {
                let (first, last) = parse_selection(body).ok_or_else(|| Error::Parse {
                    position: b.inner.start,
                    message: format!("unreadable selection {:?}", body.trim()),
                })?;
                steps.push(TraceStep::Select { first, last });
            }
            BlockKind::ToolCall => {
                return Err(Error::Parse {
                    position: b.outer.start,
                    message: "tool_call block is not part of the trace template".into(),
                })
            }
        }
    }
    if has_text_outside(raw, &scan) {
        lints.push(TraceLint::StrayText);
    }
    let trace = Trace { steps, lints: Vec::new() };
    let selections = trace.selections();
    if selections.len() > MAX_TRACE_SEGMENTS {
        lints.push(TraceLint::TooManySegments { count: selections.len() });
    }
    for (index, &(first, last)) in selections.iter().enumerate() {
        let len = (last + 1).saturating_sub(first);
        if len < MIN_TRACE_SEGMENT_LEN {
            lints.push(TraceLint::SegmentTooShort { index, len });
        }
        let out_of_range = last < first || series_len.is_some_and(|h| last + 1 > h);
        if out_of_range {
            lints.push(TraceLint::SegmentOutOfRange { index });
        }
    }
    let answers = trace.steps.iter().filter(|s| matches!(s, TraceStep::Answer(_))).count();
    match answers {
        0 => lints.push(TraceLint::MissingAnswer),
        1 => {}
        _ => lints.push(TraceLint::MultipleAnswers),
    }
    if answers > 0 && !matches!(trace.steps.last(), Some(TraceStep::Answer(_))) {
        lints.push(TraceLint::AnswerNotFinal);
    }
    Ok(Trace { steps: trace.steps, lints })
}
