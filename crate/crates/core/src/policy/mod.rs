//! The two-role stochastic policy contract and its implementations.
//!
//! A policy maps a role-specific [`PolicyState`] to a rendered protocol
//! message plus the structured tokens it emitted. Parametric policies expose
//! a flat parameter vector and the gradient of summed token log-probabilities
//! with respect to it; the objectives in [`crate::optimize`] only ever touch
//! parameters through this trait.

mod scripted;
mod toy;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use scripted::{MockReasoner, ScriptStep, ScriptedController};
pub use toy::{
    detect_events, reasoner_row, salience_bucket, window_grid, Event, FeatureConfig,
    GridConfig, ToyGridPolicy, ToyLayout,
};

use crate::rng::Rng;
use crate::types::{QuestionView, Segment, TimeSeries, Token};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Controller,
    Reasoner,
}

/// Controller input: question, full series, accumulated segments and the
/// previous reasoner output.
#[derive(Copy, Clone, Debug)]
pub struct ControllerView<'a> {
    pub question: QuestionView<'a>,
    pub series: &'a TimeSeries,
    pub segments: &'a [Segment],
    pub prior_answer: Option<&'a str>,
    pub prior_trace: Option<&'a str>,
    /// 1-based round index.
    pub round: usize,
}

#[derive(Copy, Clone, Debug)]
pub struct SegmentView<'a> {
    pub segment: Segment,
    pub values: &'a [f64],
}

/// Reasoner input: the question and the selected slices only.
#[derive(Clone, Debug)]
pub struct ReasonerView<'a> {
    pub question: QuestionView<'a>,
    pub series_len: usize,
    pub segments: Vec<SegmentView<'a>>,
}

impl<'a> ReasonerView<'a> {
    /// Slices `series` by `segments`. Segments must be valid for the series.
    pub fn new(question: QuestionView<'a>, series: &'a TimeSeries, segments: &[Segment]) -> Self {
        let segments = segments
            .iter()
            .map(|&segment| SegmentView {
                segment,
                values: &series.values()[segment.start..segment.end],
            })
            .collect();
        ReasonerView { question, series_len: series.len(), segments }
    }
}

#[derive(Clone, Debug)]
pub enum PolicyState<'a> {
    Controller(ControllerView<'a>),
    Reasoner(ReasonerView<'a>),
}

impl PolicyState<'_> {
    pub fn role(&self) -> Role {
        match self {
            PolicyState::Controller(_) => Role::Controller,
            PolicyState::Reasoner(_) => Role::Reasoner,
        }
    }

    pub fn question(&self) -> QuestionView<'_> {
        match self {
            PolicyState::Controller(c) => c.question,
            PolicyState::Reasoner(r) => r.question,
        }
    }
}

/// Decoding parameters. A temperature of zero selects greedy decoding.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl SamplingConfig {
    pub const CONTROLLER: SamplingConfig = SamplingConfig { temperature: 1.0, top_p: 0.95 };
    pub const REASONER: SamplingConfig = SamplingConfig { temperature: 0.7, top_p: 0.95 };
    pub const GREEDY: SamplingConfig = SamplingConfig { temperature: 0.0, top_p: 1.0 };

    pub fn is_greedy(&self) -> bool {
        self.temperature <= 0.0
    }

    /// Temperature used for reported log-probabilities.
    pub fn scoring_temperature(&self) -> f64 {
        if self.is_greedy() {
            1.0
        } else {
            self.temperature
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub message: String,
    pub tokens: Vec<Token>,
    pub log_probs: Vec<f64>,
}

pub trait Policy: Send + Sync {
    /// Draws one message. Reported log-probabilities are those of the
    /// temperature-scaled distribution before nucleus truncation.
    fn sample(&self, state: &PolicyState<'_>, sampling: &SamplingConfig, rng: &mut Rng) -> Sample;

    /// Per-token log-probabilities of `tokens` under current parameters.
    fn log_prob(&self, state: &PolicyState<'_>, tokens: &[Token], temperature: f64) -> Vec<f64>;

    /// Every complete token sequence with its summed log-probability, when
    /// the action space is small enough to enumerate.
    fn actions(&self, _state: &PolicyState<'_>, _temperature: f64) -> Option<Vec<(Vec<Token>, f64)>> {
        None
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Adds `weight * grad(sum of log-probs of tokens)` into `grad`.
    fn accumulate_score_gradient(
        &self,
        _state: &PolicyState<'_>,
        _tokens: &[Token],
        _temperature: f64,
        _weight: f64,
        _grad: &mut [f64],
    ) {
    }

    fn score_gradient(&self, state: &PolicyState<'_>, tokens: &[Token], temperature: f64) -> Vec<f64> {
        let mut grad = vec![0.0; self.num_params()];
        self.accumulate_score_gradient(state, tokens, temperature, 1.0, &mut grad);
        grad
    }

    /// Gradient ascent step.
    fn apply_update(&mut self, grad: &[f64], learning_rate: f64) {
        for (p, g) in self.params_mut().iter_mut().zip(grad) {
            *p += learning_rate * g;
        }
    }

    /// Independent frozen copy.
    fn snapshot(&self) -> Box<dyn Policy>;
}

// ---------------------------------------------------------------------------
// Categorical helpers
// ---------------------------------------------------------------------------

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let z = log_sum_exp(&scaled);
    scaled.iter().map(|s| s - z).collect()
}

/// Draws an index from `log_probs` under `sampling`: argmax when greedy,
/// otherwise from the smallest high-probability prefix whose mass reaches
/// `top_p`, renormalized.
pub fn sample_index(log_probs: &[f64], sampling: &SamplingConfig, rng: &mut Rng) -> usize {
    if sampling.is_greedy() {
        return argmax(log_probs);
    }
    let mut order: Vec<usize> = (0..log_probs.len()).collect();
    order.sort_by(|&a, &b| log_probs[b].total_cmp(&log_probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::with_capacity(order.len());
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += log_probs[i].exp();
        if mass >= sampling.top_p {
            break;
        }
    }
    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &kept {
        acc += log_probs[i].exp();
        if u < acc {
            return i;
        }
    }
    *kept.last().expect("non-empty distribution")
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// KL divergence to a reference policy
// ---------------------------------------------------------------------------

/// Probability ratios below this are clamped before taking logs.
pub const DEFAULT_RATIO_FLOOR: f64 = 1e-12;

/// Per-token nonnegative estimator `r - 1 - ln r`, `r = pi_ref / pi`,
/// averaged over the sampled tokens.
pub fn kl_estimate(
    policy: &dyn Policy,
    reference: &dyn Policy,
    state: &PolicyState<'_>,
    tokens: &[Token],
    temperature: f64,
    ratio_floor: f64,
) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let lp = policy.log_prob(state, tokens, temperature);
    let lq = reference.log_prob(state, tokens, temperature);
    let total: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(p, q)| {
            let r = (q - p).exp().max(ratio_floor);
            r - 1.0 - r.ln()
        })
        .sum();
    total / tokens.len() as f64
}

/// Exact `KL(pi || pi_ref)` at `state` for enumerable policies.
pub fn kl_exact(
    policy: &dyn Policy,
    reference: &dyn Policy,
    state: &PolicyState<'_>,
    temperature: f64,
) -> Option<f64> {
    let actions = policy.actions(state, temperature)?;
    Some(
        actions
            .iter()
            .map(|(tokens, lp)| {
                let lq: f64 = reference.log_prob(state, tokens, temperature).iter().sum();
                let p = lp.exp();
                if p == 0.0 {
                    0.0
                } else {
                    p * (lp - lq)
                }
            })
            .sum(),
    )
}

/// Exact KL where the action space is enumerable, the sampled-token
/// estimator otherwise.
pub fn kl_divergence_estimate(
    policy: &dyn Policy,
    reference: &dyn Policy,
    state: &PolicyState<'_>,
    tokens: &[Token],
    temperature: f64,
) -> f64 {
    kl_exact(policy, reference, state, temperature)
        .unwrap_or_else(|| kl_estimate(policy, reference, state, tokens, temperature, DEFAULT_RATIO_FLOOR))
}

/// Adds `weight * grad KL(pi || pi_ref)` into `grad`. Uses the exact form
/// `sum_a p_a (ln p_a - ln q_a) grad ln p_a` when enumerable, otherwise the
/// gradient of the per-token estimator, `(1 - r_t) grad ln pi(o_t)`.
pub fn accumulate_kl_gradient(
    policy: &dyn Policy,
    reference: &dyn Policy,
    state: &PolicyState<'_>,
    tokens: &[Token],
    temperature: f64,
    weight: f64,
    grad: &mut [f64],
) {
    if let Some(actions) = policy.actions(state, temperature) {
        for (seq, lp) in actions {
            let lq: f64 = reference.log_prob(state, &seq, temperature).iter().sum();
            let p = lp.exp();
            if p > 0.0 {
                policy.accumulate_score_gradient(state, &seq, temperature, weight * p * (lp - lq), grad);
            }
        }
        return;
    }
    if tokens.is_empty() {
        return;
    }
    let lp = policy.log_prob(state, tokens, temperature);
    let lq = reference.log_prob(state, tokens, temperature);
    let per = weight / tokens.len() as f64;
    for t in 0..tokens.len() {
        let r = (lq[t] - lp[t]).exp().max(DEFAULT_RATIO_FLOOR);
        let w = per * (1.0 - r);
        policy.accumulate_score_gradient(state, &tokens[..=t], temperature, w, grad);
        policy.accumulate_score_gradient(state, &tokens[..t], temperature, -w, grad);
    }
}
