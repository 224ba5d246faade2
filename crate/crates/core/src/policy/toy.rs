//! Log-linear tabular policy serving both roles from one parameter vector.
//!
//! Controller actions are the windows of a fixed grid plus ACCEPT. A
//! window's logit is read from a table indexed by (question tag, salience
//! bucket of the window, already-covered flag); the ACCEPT logit from a table
//! indexed by (question tag, round bucket, coverage bucket, count of salient
//! windows not yet covered). A CONTINUE action emits two tokens, the decision
//! and the window, whose log-probabilities factor the joint action
//! probability; ACCEPT emits one. ACCEPT is masked until a reasoner answer
//! exists.
//!
//! The reasoner answers from a table indexed by a question-specific summary
//! of the covered values (see [`reasoner_row`]) and emits one answer token.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{log_softmax, log_sum_exp, sample_index, ControllerView, Policy, PolicyState, ReasonerView, Sample, SamplingConfig};
use crate::protocol::{render_controller_accept, render_controller_continue, render_reasoner};
use crate::rng::Rng;
use crate::types::{merge_segments, Decision, QuestionTag, Segment, Token};

const TAGS: usize = 4;
const SALIENCE_BUCKETS: usize = 4;
const ROUND_BUCKETS: usize = 4;
const COVERAGE_BUCKETS: usize = 4;
const PENDING_BUCKETS: usize = 3;
/// Salience bucket from which a window counts as salient for ACCEPT features.
const SALIENT_FROM: usize = 2;

const KIND_ROWS: usize = 5;
const SEQUENCE_ROWS: usize = 7;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub window_len: usize,
    pub stride: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { window_len: 16, stride: 16 }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Bucket edges on a window's peak absolute value.
    pub salience_edges: [f64; 3],
    /// Absolute value from which a covered point counts as an event hit.
    pub detect_threshold: f64,
    /// Hits closer than this (same sign) belong to one event.
    pub event_merge_gap: usize,
    /// Events at least this long are classed as wide.
    pub wide_event_len: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            salience_edges: [3.0, 4.5, 6.0],
            detect_threshold: 4.0,
            event_merge_gap: 8,
            wide_event_len: 12,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyLayout {
    /// Answer options K.
    pub options: usize,
    pub grid: GridConfig,
    pub features: FeatureConfig,
}

impl ToyLayout {
    pub fn new(options: usize) -> Self {
        ToyLayout { options, grid: GridConfig::default(), features: FeatureConfig::default() }
    }

    fn window_table_len(&self) -> usize {
        TAGS * SALIENCE_BUCKETS * 2
    }

    fn accept_table_len(&self) -> usize {
        TAGS * ROUND_BUCKETS * COVERAGE_BUCKETS * PENDING_BUCKETS
    }

    fn reasoner_rows(&self, tag: QuestionTag) -> usize {
        match tag {
            QuestionTag::Locate => self.options + 1,
            QuestionTag::PatternKind => KIND_ROWS,
            QuestionTag::EventSequence => SEQUENCE_ROWS,
            QuestionTag::Other => 1,
        }
    }

    pub fn controller_params(&self) -> std::ops::Range<usize> {
        0..self.window_table_len() + self.accept_table_len()
    }

    pub fn reasoner_params(&self) -> std::ops::Range<usize> {
        self.controller_params().end..self.num_params()
    }

    pub fn num_params(&self) -> usize {
        let rsn: usize = QuestionTag::ALL.iter().map(|&t| self.reasoner_rows(t)).sum::<usize>() * self.options;
        self.window_table_len() + self.accept_table_len() + rsn
    }

    fn window_index(&self, tag: QuestionTag, salience: usize, covered: bool) -> usize {
        (tag.index() * SALIENCE_BUCKETS + salience) * 2 + covered as usize
    }

    fn accept_index(&self, tag: QuestionTag, round: usize, coverage: usize, pending: usize) -> usize {
        self.window_table_len()
            + ((tag.index() * ROUND_BUCKETS + round) * COVERAGE_BUCKETS + coverage) * PENDING_BUCKETS
            + pending
    }

    fn reasoner_index(&self, tag: QuestionTag, row: usize, option: usize) -> usize {
        let before: usize = QuestionTag::ALL
            .iter()
            .take_while(|&&t| t != tag)
            .map(|&t| self.reasoner_rows(t))
            .sum();
        self.reasoner_params().start + (before + row) * self.options + option
    }
}

/// Candidate windows over `[0, series_len)`. A final window flush with the
/// end is added when the stride leaves a tail uncovered.
pub fn window_grid(series_len: usize, grid: GridConfig) -> Vec<Segment> {
    let len = grid.window_len.min(series_len).max(1);
    let stride = grid.stride.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= series_len {
        out.push(Segment { start, end: start + len });
        start += stride;
    }
    if out.last().is_none_or(|w| w.end < series_len) {
        out.push(Segment { start: series_len - len, end: series_len });
    }
    out
}

pub fn salience_bucket(values: &[f64], edges: &[f64; 3]) -> usize {
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    edges.iter().take_while(|&&e| peak >= e).count()
}

/// A run of same-signed covered points beyond the detection threshold.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Event {
    pub first: usize,
    pub last: usize,
    pub positive: bool,
    pub peak: f64,
}

impl Event {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Groups threshold hits among `points` (time-ordered `(t, x)`) into events.
pub fn detect_events(points: &[(usize, f64)], features: &FeatureConfig) -> Vec<Event> {
    let mut events: Vec<Event> = Vec::new();
    for &(t, x) in points {
        if x.abs() < features.detect_threshold {
            continue;
        }
        let positive = x > 0.0;
        match events.last_mut() {
            Some(e) if e.positive == positive && t - e.last <= features.event_merge_gap => {
                e.last = t;
                e.peak = e.peak.max(x.abs());
            }
            _ => events.push(Event { first: t, last: t, positive, peak: x.abs() }),
        }
    }
    events
}

fn covered_points(view: &ReasonerView<'_>) -> Vec<(usize, f64)> {
    let segs: Vec<Segment> = view.segments.iter().map(|s| s.segment).collect();
    let mut points = Vec::new();
    for m in merge_segments(&segs) {
        for t in m.start..m.end {
            // take the value from whichever view covers t
            let v = view
                .segments
                .iter()
                .find(|s| s.segment.contains(t))
                .map(|s| s.values[t - s.segment.start])
                .expect("merged cover comes from the views");
            points.push((t, v));
        }
    }
    points
}

/// Reasoner table row for the covered evidence in `view`.
///
/// * Locate: the region (of `options` equal regions) holding the strongest
///   covered hit, or `options` when nothing crosses the threshold.
/// * PatternKind: none / narrow+ / narrow- / wide+ / wide- for the
///   strongest event.
/// * EventSequence: none / + / - / ++ / +- / -+ / -- for the first two events.
pub fn reasoner_row(view: &ReasonerView<'_>, options: usize, features: &FeatureConfig) -> usize {
    let points = covered_points(view);
    match view.question.tag {
        QuestionTag::Locate => {
            let best = points.iter().copied().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
            match best {
                Some((t, x)) if x.abs() >= features.detect_threshold => {
                    (t * options / view.series_len.max(1)).min(options - 1)
                }
                _ => options,
            }
        }
        QuestionTag::PatternKind => {
            let events = detect_events(&points, features);
            match events.iter().max_by(|a, b| a.peak.total_cmp(&b.peak)) {
                None => 0,
                Some(e) => {
                    let wide = e.len() >= features.wide_event_len;
                    1 + 2 * wide as usize + (!e.positive) as usize
                }
            }
        }
        QuestionTag::EventSequence => {
            let events = detect_events(&points, features);
            match events.as_slice() {
                [] => 0,
                [e] => 1 + (!e.positive) as usize,
                [a, b, ..] => 3 + 2 * (!a.positive) as usize + (!b.positive) as usize,
            }
        }
        QuestionTag::Other => 0,
    }
}

/// Per-action parameter indices and logits for a controller state; the last
/// entry is ACCEPT.
struct ControllerTable {
    windows: Vec<Segment>,
    salience: Vec<usize>,
    index: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGridPolicy {
    layout: ToyLayout,
    params: Vec<f64>,
    /// Probability of rendering a deliberately malformed message.
    #[serde(default)]
    corruption_rate: f64,
}

impl ToyGridPolicy {
    /// All-zero parameters: uniform over actions and answers.
    pub fn uniform(layout: ToyLayout) -> Self {
        ToyGridPolicy { params: vec![0.0; layout.num_params()], layout, corruption_rate: 0.0 }
    }

    pub fn from_params(layout: ToyLayout, params: Vec<f64>) -> crate::Result<Self> {
        if params.len() != layout.num_params() {
            return Err(crate::Error::usage(format!(
                "parameter vector has {} entries; layout needs {}",
                params.len(),
                layout.num_params()
            )));
        }
        Ok(ToyGridPolicy { layout, params, corruption_rate: 0.0 })
    }

    pub fn with_corruption(mut self, rate: f64) -> Self {
        self.corruption_rate = rate.clamp(0.0, 1.0);
        self
    }

    pub fn layout(&self) -> &ToyLayout {
        &self.layout
    }

    pub fn set_params(&mut self, params: &[f64]) {
        self.params.copy_from_slice(params);
    }

    fn controller_table(&self, view: &ControllerView<'_>) -> ControllerTable {
        let lay = &self.layout;
        let tag = view.question.tag;
        let series_len = view.series.len();
        let windows = window_grid(series_len, lay.grid);
        let covered = merge_segments(view.segments);
        let is_covered = |w: &Segment| covered.iter().any(|c| c.start <= w.start && w.end <= c.end);
        let salience: Vec<usize> = windows
            .iter()
            .map(|w| salience_bucket(&view.series.values()[w.start..w.end], &lay.features.salience_edges))
            .collect();
        let mut index: Vec<usize> = windows
            .iter()
            .zip(&salience)
            .map(|(w, &s)| lay.window_index(tag, s, is_covered(w)))
            .collect();
        let pending = windows
            .iter()
            .zip(&salience)
            .filter(|(w, &s)| s >= SALIENT_FROM && !is_covered(w))
            .count()
            .min(PENDING_BUCKETS - 1);
        let cov_len: usize = covered.iter().map(Segment::len).sum();
        let coverage = (cov_len * COVERAGE_BUCKETS / series_len.max(1)).min(COVERAGE_BUCKETS - 1);
        let round = view.round.clamp(1, ROUND_BUCKETS) - 1;
        if view.prior_answer.is_some() {
            index.push(lay.accept_index(tag, round, coverage, pending));
        }
        ControllerTable { windows, salience, index }
    }

    /// Raw controller logits: one per grid window, then ACCEPT when it is
    /// available.
    pub fn controller_logits(&self, view: &ControllerView<'_>) -> Vec<f64> {
        self.logits(&self.controller_table(view).index)
    }

    pub fn reasoner_logits(&self, view: &ReasonerView<'_>) -> Vec<f64> {
        self.logits(&self.reasoner_indices(view))
    }

    fn reasoner_indices(&self, view: &ReasonerView<'_>) -> Vec<usize> {
        let k = view.question.options.len().min(self.layout.options);
        let row = reasoner_row(view, self.layout.options, &self.layout.features);
        (0..k).map(|o| self.layout.reasoner_index(view.question.tag, row, o)).collect()
    }

    fn logits(&self, index: &[usize]) -> Vec<f64> {
        index.iter().map(|&i| self.params[i]).collect()
    }

    /// Per-token log-probs and the parameter-space gradient pieces, shared by
    /// `log_prob` and the gradient routine.
    fn token_terms(&self, state: &PolicyState<'_>, tokens: &[Token], temperature: f64) -> Vec<TokenTerm> {
        match state {
            PolicyState::Controller(view) => {
                let table = self.controller_table(view);
                let lp = log_softmax(&self.logits(&table.index), temperature);
                let n_win = table.windows.len();
                let lp_continue = log_sum_exp(&lp[..n_win]);
                tokens
                    .iter()
                    .map(|tok| match *tok {
                        Token::Decision(Decision::Continue) => TokenTerm {
                            log_prob: lp_continue,
                            // numerator: windows renormalized; denominator: all actions
                            plus: (0..n_win).map(|w| (table.index[w], (lp[w] - lp_continue).exp())).collect(),
                            minus: table.index.iter().zip(&lp).map(|(&i, l)| (i, l.exp())).collect(),
                        },
                        Token::Window(w) if w < n_win => TokenTerm {
                            log_prob: lp[w] - lp_continue,
                            plus: vec![(table.index[w], 1.0)],
                            minus: (0..n_win).map(|v| (table.index[v], (lp[v] - lp_continue).exp())).collect(),
                        },
                        Token::Decision(Decision::Accept) if lp.len() > n_win => TokenTerm {
                            log_prob: lp[n_win],
                            plus: vec![(table.index[n_win], 1.0)],
                            minus: table.index.iter().zip(&lp).map(|(&i, l)| (i, l.exp())).collect(),
                        },
                        _ => TokenTerm::impossible(),
                    })
                    .collect()
            }
            PolicyState::Reasoner(view) => {
                let index = self.reasoner_indices(view);
                let lp = log_softmax(&self.logits(&index), temperature);
                tokens
                    .iter()
                    .map(|tok| match *tok {
                        Token::Answer(k) if k < index.len() => TokenTerm {
                            log_prob: lp[k],
                            plus: vec![(index[k], 1.0)],
                            minus: index.iter().zip(&lp).map(|(&i, l)| (i, l.exp())).collect(),
                        },
                        _ => TokenTerm::impossible(),
                    })
                    .collect()
            }
        }
    }

    fn sample_controller(&self, view: &ControllerView<'_>, sampling: &SamplingConfig, rng: &mut Rng) -> Sample {
        let table = self.controller_table(view);
        let temperature = sampling.scoring_temperature();
        let lp = log_softmax(&self.logits(&table.index), temperature);
        let choice = sample_index(&lp, sampling, rng);
        let n_win = table.windows.len();
        let corrupt = self.corruption_rate > 0.0 && rng.random::<f64>() < self.corruption_rate;
        if choice == n_win {
            let think = format!(
                "round {}: covered evidence looks sufficient, accepting {}",
                view.round,
                view.prior_answer.unwrap_or("nothing")
            );
            let message = if corrupt {
                corrupt_controller(&think, table.windows[0], view.series.len(), rng)
            } else {
                render_controller_accept(&think)
            };
            return Sample { message, tokens: vec![Token::Decision(Decision::Accept)], log_probs: vec![lp[n_win]] };
        }
        let lp_continue = log_sum_exp(&lp[..n_win]);
        let seg = table.windows[choice];
        let think = format!(
            "round {}: inspecting window {choice} {seg} with salience {}",
            view.round, table.salience[choice]
        );
        let message = if corrupt {
            corrupt_controller(&think, seg, view.series.len(), rng)
        } else {
            render_controller_continue(&think, seg)
        };
        Sample {
            message,
            tokens: vec![Token::Decision(Decision::Continue), Token::Window(choice)],
            log_probs: vec![lp_continue, lp[choice] - lp_continue],
        }
    }

    fn sample_reasoner(&self, view: &ReasonerView<'_>, sampling: &SamplingConfig, rng: &mut Rng) -> Sample {
        let index = self.reasoner_indices(view);
        let lp = log_softmax(&self.logits(&index), sampling.scoring_temperature());
        let k = sample_index(&lp, sampling, rng);
        let row = reasoner_row(view, self.layout.options, &self.layout.features);
        let label = view.question.options[k].to_string();
        let think = format!("evidence class {row} over {} segment(s) suggests {label}", view.segments.len());
        let message = if self.corruption_rate > 0.0 && rng.random::<f64>() < self.corruption_rate {
            corrupt_reasoner(&think, &label, rng)
        } else {
            render_reasoner(&think, &label)
        };
        Sample { message, tokens: vec![Token::Answer(k)], log_probs: vec![lp[k]] }
    }
}

struct TokenTerm {
    log_prob: f64,
    plus: Vec<(usize, f64)>,
    minus: Vec<(usize, f64)>,
}

impl TokenTerm {
    fn impossible() -> Self {
        TokenTerm { log_prob: f64::NEG_INFINITY, plus: Vec::new(), minus: Vec::new() }
    }
}

fn corrupt_controller(think: &str, seg: Segment, series_len: usize, rng: &mut Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!("<think> {think} </think>"),
        1 => format!("{}\n<answer>ACCEPT</answer>", render_controller_continue(think, seg)),
        2 => render_controller_continue(think, Segment { start: seg.start, end: series_len + 8 }),
        _ => format!("<think> {think} </think>\n<tool_call>{{\"name\": \"timeseries_selection_tool\"</tool_call>"),
    }
}

fn corrupt_reasoner(think: &str, label: &str, rng: &mut Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!("<think>{think}</think>"),
        1 => format!("<think>{think}</think>\n<answer>\n</answer>"),
        2 => format!("<think>{think} <answer>{label}</answer></think>"),
        _ => format!("<answer>{label}</answer>"),
    }
}

impl Policy for ToyGridPolicy {
    fn sample(&self, state: &PolicyState<'_>, sampling: &SamplingConfig, rng: &mut Rng) -> Sample {
        match state {
            PolicyState::Controller(view) => self.sample_controller(view, sampling, rng),
            PolicyState::Reasoner(view) => self.sample_reasoner(view, sampling, rng),
        }
    }

    fn log_prob(&self, state: &PolicyState<'_>, tokens: &[Token], temperature: f64) -> Vec<f64> {
        self.token_terms(state, tokens, temperature).iter().map(|t| t.log_prob).collect()
    }

    fn actions(&self, state: &PolicyState<'_>, temperature: f64) -> Option<Vec<(Vec<Token>, f64)>> {
        match state {
            PolicyState::Controller(view) => {
                let table = self.controller_table(view);
                let lp = log_softmax(&self.logits(&table.index), temperature);
                let n_win = table.windows.len();
                let mut out: Vec<(Vec<Token>, f64)> = (0..n_win)
                    .map(|w| (vec![Token::Decision(Decision::Continue), Token::Window(w)], lp[w]))
                    .collect();
                if lp.len() > n_win {
                    out.push((vec![Token::Decision(Decision::Accept)], lp[n_win]));
                }
                Some(out)
            }
            PolicyState::Reasoner(view) => {
                let index = self.reasoner_indices(view);
                let lp = log_softmax(&self.logits(&index), temperature);
                Some(lp.iter().enumerate().map(|(k, &l)| (vec![Token::Answer(k)], l)).collect())
            }
        }
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_score_gradient(
        &self,
        state: &PolicyState<'_>,
        tokens: &[Token],
        temperature: f64,
        weight: f64,
        grad: &mut [f64],
    ) {
        let scale = weight / temperature;
        for term in self.token_terms(state, tokens, temperature) {
            for (i, p) in term.plus {
                grad[i] += scale * p;
            }
            for (i, p) in term.minus {
                grad[i] -= scale * p;
            }
        }
    }

    fn snapshot(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}
