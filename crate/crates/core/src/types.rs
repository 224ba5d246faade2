//! Domain types shared by every module: series, segments, questions and
//! the per-round records of an interaction trajectory.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Violation;

/// A univariate series of finite values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    id: String,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::usage("time series must hold at least one value"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::usage(format!("non-finite value at index {i}")));
        }
        Ok(Self { id: id.into(), values })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn full_span(&self) -> Segment {
        Segment { start: 0, end: self.len() }
    }
}

/// Half-open index range `[start, end)` into a series.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    /// Builds a segment and checks it against a series length.
    pub fn new(start: usize, end: usize, series_len: usize) -> Result<Self> {
        let seg = Segment { start, end };
        seg.validate(series_len)?;
        Ok(seg)
    }

    /// Converts inclusive wire bounds `[first, last]` into the half-open form.
    pub fn from_inclusive(first: usize, last: usize, series_len: usize) -> Result<Self> {
        let end = last
            .checked_add(1)
            .ok_or(Error::Bounds { start: first, end: last, len: series_len })?;
        Segment::new(first, end, series_len)
    }

    /// Inclusive wire bounds `[first, last]`.
    pub fn to_inclusive(self) -> (usize, usize) {
        (self.start, self.end - 1)
    }

    pub fn validate(&self, series_len: usize) -> Result<()> {
        if self.start < self.end && self.end <= series_len {
            Ok(())
        } else {
            Err(Error::Bounds { start: self.start, end: self.end, len: series_len })
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }

    /// Number of indices shared with `other`.
    pub fn overlap(&self, other: &Segment) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// Ordered, append-only list of segments accumulated during a rollout.
/// Duplicates are kept.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentList(Vec<Segment>);

impl SegmentList {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn from_segments(segments: Vec<Segment>, series_len: usize) -> Result<Self> {
        for s in &segments {
            s.validate(series_len)?;
        }
        Ok(Self(segments))
    }

    pub fn push(&mut self, seg: Segment) {
        self.0.push(seg);
    }

    pub fn as_slice(&self) -> &[Segment] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Segment> {
        self.0.iter()
    }

    pub fn coverage_fraction(&self, series_len: usize) -> Result<f64> {
        coverage_fraction(&self.0, series_len)
    }
}

impl<'a> IntoIterator for &'a SegmentList {
    type Item = &'a Segment;
    type IntoIter = std::slice::Iter<'a, Segment>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Values covered by `seg`.
pub fn slice(series: &TimeSeries, seg: Segment) -> Result<&[f64]> {
    seg.validate(series.len())?;
    Ok(&series.values[seg.start..seg.end])
}

/// Merged, sorted, non-overlapping cover of `segments`.
pub fn merge_segments(segments: &[Segment]) -> Vec<Segment> {
    let mut sorted: Vec<Segment> = segments.to_vec();
    sorted.sort_unstable();
    let mut merged: Vec<Segment> = Vec::with_capacity(sorted.len());
    for seg in sorted {
        match merged.last_mut() {
            Some(last) if seg.start <= last.end => last.end = last.end.max(seg.end),
            _ => merged.push(seg),
        }
    }
    merged
}

/// Share of distinct timesteps of a length-`series_len` series covered by the
/// union of `segments`. Overlaps count once.
pub fn coverage_fraction(segments: &[Segment], series_len: usize) -> Result<f64> {
    if series_len == 0 {
        return Err(Error::usage("series length must be positive"));
    }
    for s in segments {
        s.validate(series_len)?;
    }
    let covered: usize = merge_segments(segments).iter().map(Segment::len).sum();
    Ok(covered as f64 / series_len as f64)
}

/// Strips surrounding whitespace, keeps the first line and uppercases it.
pub fn normalize_answer(raw: &str) -> String {
    raw.trim().lines().next().unwrap_or("").trim().to_uppercase()
}

/// Coarse question family; lets a policy condition on the kind of question
/// without reading its text.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionTag {
    Locate,
    PatternKind,
    EventSequence,
    Other,
}

impl QuestionTag {
    pub const ALL: [QuestionTag; 4] = [
        QuestionTag::Locate,
        QuestionTag::PatternKind,
        QuestionTag::EventSequence,
        QuestionTag::Other,
    ];

    pub fn index(self) -> usize {
        match self {
            QuestionTag::Locate => 0,
            QuestionTag::PatternKind => 1,
            QuestionTag::EventSequence => 2,
            QuestionTag::Other => 3,
        }
    }
}

/// A multiple-choice question. `gold` is visible to rewards only; policies
/// receive a [`QuestionView`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    pub options: Vec<char>,
    pub gold: char,
    pub tag: QuestionTag,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        prompt: impl Into<String>,
        options: Vec<char>,
        gold: char,
        tag: QuestionTag,
    ) -> Result<Self> {
        let q = Question { id: id.into(), prompt: prompt.into(), options, gold, tag };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=26).contains(&self.options.len()) {
            return Err(Error::usage(format!(
                "question {} has {} options; expected 2..=26",
                self.id,
                self.options.len()
            )));
        }
        for (i, c) in self.options.iter().enumerate() {
            if !c.is_ascii_uppercase() || self.options[..i].contains(c) {
                return Err(Error::usage(format!("question {} has invalid option {c:?}", self.id)));
            }
        }
        if !self.options.contains(&self.gold) {
            return Err(Error::usage(format!("gold {:?} not among options", self.gold)));
        }
        Ok(())
    }

    /// The first `k` capital letters.
    pub fn letter_options(k: usize) -> Vec<char> {
        (b'A'..=b'Z').take(k).map(char::from).collect()
    }

    pub fn option_index(&self, label: char) -> Option<usize> {
        self.options.iter().position(|&c| c == label)
    }

    pub fn view(&self) -> QuestionView<'_> {
        QuestionView { id: &self.id, prompt: &self.prompt, options: &self.options, tag: self.tag }
    }
}

/// The part of a question a policy may see.
#[derive(Copy, Clone, Debug)]
pub struct QuestionView<'a> {
    pub id: &'a str,
    pub prompt: &'a str,
    pub options: &'a [char],
    pub tag: QuestionTag,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Continue,
    Accept,
}

/// Structured action component; the unit the objectives average over.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Token {
    Decision(Decision),
    Window(usize),
    Answer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerStep {
    pub think: String,
    /// `None` when the message carried no single valid decision.
    pub decision: Option<Decision>,
    pub proposed_segment: Option<Segment>,
    pub raw_message: String,
    pub format_score: f64,
    /// Critical violation flag.
    pub violation: bool,
    pub violations: Vec<Violation>,
    pub tokens: Vec<Token>,
    pub log_probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonerStep {
    pub think: String,
    /// Normalized answer; empty when the answer block failed to parse.
    pub answer: String,
    pub raw_message: String,
    pub format_score: f64,
    pub critical: bool,
    pub violations: Vec<Violation>,
    pub tokens: Vec<Token>,
    pub log_probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub controller: ControllerStep,
    pub reasoner: Option<ReasonerStep>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Termination {
    Accept,
    RoundCap,
    CriticalViolation,
}

/// One controller/reasoner episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionTrajectory {
    pub rounds: Vec<Round>,
    pub final_segments: SegmentList,
    pub final_answer: String,
    pub terminated_by: Termination,
}

impl InteractionTrajectory {
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn controller_steps(&self) -> impl Iterator<Item = &ControllerStep> {
        self.rounds.iter().map(|r| &r.controller)
    }

    /// Segments proposed strictly before round `round` (0-based).
    pub fn segments_before(&self, round: usize) -> Vec<Segment> {
        self.rounds[..round]
            .iter()
            .filter_map(|r| r.controller.proposed_segment)
            .collect()
    }

    /// Reasoner answer and trace visible to the controller at `round` (0-based).
    pub fn prior_reasoner(&self, round: usize) -> Option<&ReasonerStep> {
        self.rounds[..round].iter().rev().find_map(|r| r.reasoner.as_ref())
    }
}
