mod common;

use std::collections::HashMap;
use std::sync::Mutex;

use proptest::prelude::*;
use segrl_core::optimize::{group_advantages, EPSILON};
use segrl_core::policy::{
    argmax, kl_estimate, log_softmax, MockReasoner, Policy, PolicyState, ReasonerView, Sample, SamplingConfig,
    ScriptStep, ScriptedController, ToyGridPolicy, ToyLayout, DEFAULT_RATIO_FLOOR,
};
use segrl_core::protocol::{
    controller_fault, parse_controller, parse_reasoner, parse_sft_trace, score_controller_trajectory,
    serialize_sft_trace, ControllerContext,
};
use segrl_core::rewards::{controller_reward, correctness, reasoner_reward, reliability, RewardWeights};
use segrl_core::rng::{stream, Rng};
use segrl_core::rollout::{run_group, run_trajectory, RolloutConfig};
use segrl_core::synthenv::{covers, generate, EnvConfig};
use segrl_core::types::{
    coverage_fraction, slice, Decision, Question, QuestionTag, Segment, Termination, TimeSeries, Token,
};

fn segment(h: usize) -> impl Strategy<Value = Segment> {
    (0..h).prop_flat_map(move |s| (Just(s), s + 1..=h)).prop_map(|(start, end)| Segment { start, end })
}

fn segments(h: usize) -> impl Strategy<Value = Vec<Segment>> {
    prop::collection::vec(segment(h), 0..8)
}

/// Fragments that make tag-heavy text likely.
fn message() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("<think>".to_string()),
        Just("</think>".to_string()),
        Just("<answer>".to_string()),
        Just("</answer>".to_string()),
        Just("<tool_call>".to_string()),
        Just("</tool_call>".to_string()),
        Just("ACCEPT".to_string()),
        Just(r#"{"name":"timeseries_selection_tool","arguments":{"ts_seg":[3,40]}}"#.to_string()),
        Just(r#"{"name":"timeseries_selection_tool","arguments":{"ts_seg":[-1,1e99]}}"#.to_string()),
        "[a-zA-Z ]{0,6}",
        any::<String>(),
    ];
    prop::collection::vec(piece, 0..10).prop_map(|v| v.concat())
}

fn mock_key(q: &Question) -> MockReasoner {
    MockReasoner::new(1.0, HashMap::from([(q.id.clone(), q.gold)]))
}

fn task_question() -> Question {
    Question::new("q0", "where", Question::letter_options(4), 'C', QuestionTag::Locate).unwrap()
}

fn series(h: usize, seed: u64) -> TimeSeries {
    let values = (0..h).map(|t| ((t as f64 + seed as f64) * 0.37).sin()).collect();
    TimeSeries::new("s", values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn coverage_matches_mask_and_ignores_order_and_duplicates(segs in segments(64), rot in 0usize..8, dup in 0usize..8) {
        let h = 64;
        let base = coverage_fraction(&segs, h).unwrap();
        prop_assert_eq!(base, common::brute_coverage(&segs, h));
        let mut rotated = segs.clone();
        if !rotated.is_empty() {
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            rotated.reverse();
        }
        prop_assert_eq!(coverage_fraction(&rotated, h).unwrap(), base);
        let mut duplicated = segs.clone();
        if let Some(&s) = segs.get(dup % segs.len().max(1)) {
            duplicated.push(s);
        }
        prop_assert_eq!(coverage_fraction(&duplicated, h).unwrap(), base);
    }

    #[test]
    fn full_span_covers_exactly_one(h in 1usize..500) {
        let s = series(h, 0);
        prop_assert_eq!(coverage_fraction(&[s.full_span()], h).unwrap(), 1.0);
    }

    #[test]
    fn slices_of_a_partition_reconstruct_the_series(h in 1usize..200, cuts in prop::collection::btree_set(1usize..200, 0..10)) {
        let s = series(h, 3);
        let mut bounds: Vec<usize> = cuts.into_iter().filter(|&c| c < h).collect();
        bounds.insert(0, 0);
        bounds.push(h);
        let mut joined = Vec::new();
        for w in bounds.windows(2) {
            joined.extend_from_slice(slice(&s, Segment { start: w[0], end: w[1] }).unwrap());
        }
        prop_assert_eq!(joined.as_slice(), s.values());
    }

    #[test]
    fn parsing_is_total_and_scores_are_exclusive(raw in message(), h in 1usize..200, prior: bool) {
        let (step, r) = parse_reasoner(&raw);
        prop_assert!((r.critical && r.score == -1.0) ^ (!r.critical && (0.0..=1.0).contains(&r.score)));
        prop_assert_eq!(step.critical, r.critical);
        if r.critical {
            prop_assert!(step.answer.is_empty());
        }
        let (step, r) = parse_controller(&raw, ControllerContext { series_len: h, has_prior_answer: prior });
        prop_assert!((r.critical && r.score == -1.0) ^ (!r.critical && (0.0..=1.0).contains(&r.score)));
        if let Some(seg) = step.proposed_segment {
            prop_assert!(seg.start < seg.end && seg.end <= h);
        }
    }

    #[test]
    fn trajectory_score_is_mean_or_minus_one(raws in prop::collection::vec(message(), 1..5)) {
        let steps: Vec<_> = raws
            .iter()
            .enumerate()
            .map(|(i, r)| parse_controller(r, ControllerContext { series_len: 50, has_prior_answer: i > 0 }).0)
            .collect();
        let score = score_controller_trajectory(&steps).unwrap();
        prop_assert!(score == -1.0 || (0.0..=1.0).contains(&score));
        if controller_fault(&steps).is_none() {
            let mean = steps.iter().map(|s| s.format_score).sum::<f64>() / steps.len() as f64;
            prop_assert_eq!(score, mean);
        } else {
            prop_assert_eq!(score, -1.0);
        }
    }

    #[test]
    fn sft_trace_round_trips(segs in prop::collection::vec(segment(96), 1..4)) {
        let q = task_question();
        let s = series(96, 1);
        let mut script: Vec<ScriptStep> = segs.iter().map(|&g| ScriptStep::Select(g)).collect();
        script.push(ScriptStep::Accept);
        let cfg = RolloutConfig { max_rounds: segs.len() + 1, ..RolloutConfig::default() };
        let t = run_trajectory(&ScriptedController::new(script), &mock_key(&q), &q, &s, &cfg, &mut stream(0, &[])).unwrap();
        prop_assert_eq!(t.terminated_by, Termination::Accept);
        let trace = parse_sft_trace(&serialize_sft_trace(&t), Some(96)).unwrap();
        let expected: Vec<(usize, usize)> = segs.iter().map(|g| g.to_inclusive()).collect();
        prop_assert_eq!(trace.selections(), expected);
        let mut decisions = vec![Decision::Continue; segs.len()];
        decisions.push(Decision::Accept);
        prop_assert_eq!(trace.decisions(), decisions);
        prop_assert_eq!(trace.answer(), Some(t.final_answer.as_str()));
    }

    #[test]
    fn estimator_is_nonnegative(r in 1e-12f64..1e12) {
        prop_assert!(r - 1.0 - r.ln() >= 0.0);
    }

    #[test]
    fn sampled_kl_estimate_is_nonnegative(seed: u64, window in 0usize..8) {
        let layout = ToyLayout::new(4);
        let a = random_toy(layout, seed, 3.0);
        let b = random_toy(layout, seed ^ 0xFFFF, 3.0);
        let task = generate(&EnvConfig::default(), seed, 0).unwrap();
        let segs: [Segment; 0] = [];
        let view = segrl_core::policy::ControllerView {
            question: task.question.view(), series: &task.series, segments: &segs,
            prior_answer: None, prior_trace: None, round: 1,
        };
        let tokens = [Token::Decision(Decision::Continue), Token::Window(window)];
        let k = kl_estimate(&a, &b, &PolicyState::Controller(view), &tokens, 1.0, DEFAULT_RATIO_FLOOR);
        prop_assert!(k >= 0.0);
    }

    #[test]
    fn argmax_and_ranking_survive_scaling(logits in prop::collection::vec(-50.0f64..50.0, 1..12), c in 0.01f64..100.0, t in 0.05f64..5.0) {
        let scaled: Vec<f64> = logits.iter().map(|l| l * c).collect();
        prop_assert_eq!(argmax(&scaled), argmax(&logits));
        let a = log_softmax(&logits, 1.0);
        let b = log_softmax(&logits, t);
        for i in 0..logits.len() {
            for j in 0..logits.len() {
                if logits[i] > logits[j] {
                    prop_assert!(a[i] >= a[j] && b[i] >= b[j]);
                }
            }
        }
    }

    #[test]
    fn snapshots_are_frozen(seed: u64, updates in prop::collection::vec(-5.0f64..5.0, 1..6)) {
        let layout = ToyLayout::new(4);
        let mut p = random_toy(layout, seed, 1.0);
        let task = generate(&EnvConfig::default(), seed, 1).unwrap();
        let segs = [task.series.full_span()];
        let state = PolicyState::Reasoner(ReasonerView::new(task.question.view(), &task.series, &segs));
        let snap = p.snapshot();
        let before = snap.actions(&state, 0.7).unwrap();
        let mut rng_a = stream(seed, &[1]);
        let sample_before = snap.sample(&state, &SamplingConfig::REASONER, &mut rng_a);
        for u in updates {
            let grad = vec![u; p.num_params()];
            p.apply_update(&grad, 1.0);
        }
        prop_assert_eq!(snap.actions(&state, 0.7).unwrap(), before);
        let mut rng_b = stream(seed, &[1]);
        prop_assert_eq!(snap.sample(&state, &SamplingConfig::REASONER, &mut rng_b), sample_before);
    }

    #[test]
    fn rollout_structure(seed: u64, max_rounds in 1usize..6, corruption in 0.0f64..0.4) {
        let layout = ToyLayout::new(4);
        let policy = random_toy(layout, seed, 2.0).with_corruption(corruption);
        let recorder = Recorder::new(policy.clone());
        let task = generate(&EnvConfig::two_interval(), seed, 0).unwrap();
        let cfg = RolloutConfig { max_rounds, ..RolloutConfig::default() };
        let t = run_trajectory(&policy, &recorder, &task.question, &task.series, &cfg, &mut stream(seed, &[])).unwrap();
        prop_assert!(!t.is_empty() && t.len() <= max_rounds);
        let proposed: Vec<Segment> = t.rounds.iter().filter_map(|r| r.controller.proposed_segment).collect();
        prop_assert_eq!(t.final_segments.as_slice(), proposed.as_slice());
        let last = &t.rounds[t.len() - 1].controller;
        match t.terminated_by {
            Termination::Accept => {
                prop_assert_eq!(last.decision, Some(Decision::Accept));
                prop_assert!(last.proposed_segment.is_none());
                prop_assert!(t.rounds[t.len() - 1].reasoner.is_none());
            }
            Termination::CriticalViolation => prop_assert!(last.violation),
            Termination::RoundCap => prop_assert_eq!(t.len(), max_rounds),
        }
        let seen = recorder.seen.into_inner().unwrap();
        let calls: Vec<usize> = t.rounds.iter().enumerate().filter(|(_, r)| r.reasoner.is_some()).map(|(i, _)| i).collect();
        prop_assert_eq!(seen.len(), calls.len());
        for (k, (segs, values)) in seen.iter().enumerate() {
            prop_assert_eq!(segs.as_slice(), &proposed[..k + 1]);
            for (s, v) in segs.iter().zip(values) {
                prop_assert_eq!(v.as_slice(), &task.series.values()[s.start..s.end]);
            }
        }
    }

    #[test]
    fn run_group_is_reproducible_and_r_mu_is_reliability(seed: u64) {
        let layout = ToyLayout::new(4);
        let policy = random_toy(layout, seed, 1.0);
        let task = generate(&EnvConfig::default(), seed, 2).unwrap();
        let cfg = RolloutConfig::default();
        let a = run_group(&policy, &policy, &task.question, &task.series, 4, 5, &cfg, seed, &[9, 9]).unwrap();
        let b = run_group(&policy, &policy, &task.question, &task.series, 4, 5, &cfg, seed, &[9, 9]).unwrap();
        prop_assert_eq!(&a, &b);
        for m in &a.members {
            let c: Vec<f64> = m.resamples.iter().map(|r| correctness(&task.question, &r.answer)).collect();
            prop_assert_eq!(&m.correctness, &c);
            prop_assert_eq!(m.r_mu, reliability(&c).unwrap());
            prop_assert_eq!(m.r_mu, c.iter().sum::<f64>() / c.len() as f64);
        }
    }

    #[test]
    fn reward_ranges_and_monotonicity(d1 in 0.0f64..=1.0, d2 in 0.0f64..=1.0, f1 in 0.0f64..=1.0, f2 in 0.0f64..=1.0, c: bool, fr in prop_oneof![Just(-1.0), 0.0f64..=1.0]) {
        let w = RewardWeights::default();
        let (dlo, dhi) = (d1.min(d2), d1.max(d2));
        let (flo, fhi) = (f1.min(f2), f1.max(f2));
        prop_assert!(controller_reward(flo, dlo, &w) <= controller_reward(flo, dhi, &w));
        prop_assert!(controller_reward(flo, dlo, &w) <= controller_reward(fhi, dlo, &w));
        for f in [-1.0, flo, fhi] {
            let r = controller_reward(f, d1, &w);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
        prop_assert_eq!(controller_reward(-1.0, d1, &w), -1.0);
        let r = reasoner_reward(c as u8 as f64, fr, &w);
        prop_assert!(r >= -w.w_e && r <= 1.0);
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..17), shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
        let a = group_advantages(&rewards, EPSILON).unwrap();
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let sigma = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sigma < EPSILON {
            prop_assert!(a.iter().all(|x| *x == 0.0));
        } else {
            prop_assert!((a.iter().sum::<f64>() / n).abs() <= 1e-9);
        }
        let exact = group_advantages(&rewards, 0.0).unwrap();
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        let a_shift = group_advantages(&shifted, EPSILON).unwrap();
        let e_scale = group_advantages(&scaled, 0.0).unwrap();
        let a_scale = group_advantages(&scaled, EPSILON).unwrap();
        for i in 0..rewards.len() {
            prop_assert!((a_shift[i] - a[i]).abs() <= 1e-9);
            prop_assert!((e_scale[i] - exact[i]).abs() <= 1e-9);
            prop_assert!((a_scale[i] - a[i]).abs() <= 1e-3);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// No single segment shorter than the gap between the two planted
    /// intervals can cover both.
    #[test]
    fn two_interval_tasks_need_two_segments(seed: u64, index in 0u64..1000) {
        let cfg = EnvConfig::two_interval();
        let task = generate(&cfg, seed, index).unwrap();
        prop_assert_eq!(task.intervals.len(), 2);
        let mut iv = task.intervals.clone();
        iv.sort_by_key(|s| s.start);
        let gap = iv[1].start - iv[0].end;
        prop_assert!(gap >= cfg.min_gap);
        let h = task.series.len();
        for start in 0..h {
            for len in 1..gap.min(h - start + 1) {
                let seg = Segment { start, end: start + len };
                prop_assert!(!covers(f64::MIN_POSITIVE, &task.intervals, &[seg]));
            }
        }
    }
}

fn random_toy(layout: ToyLayout, seed: u64, scale: f64) -> ToyGridPolicy {
    use rand::Rng as _;
    let mut rng: Rng = stream(seed, &[77]);
    let params = (0..layout.num_params()).map(|_| rng.random_range(-scale..=scale)).collect();
    ToyGridPolicy::from_params(layout, params).unwrap()
}

/// Reasoner that logs the segments and values it was shown.
type Seen = Vec<(Vec<Segment>, Vec<Vec<f64>>)>;

struct Recorder {
    inner: ToyGridPolicy,
    seen: Mutex<Seen>,
}

impl Recorder {
    fn new(inner: ToyGridPolicy) -> Self {
        Recorder { inner, seen: Mutex::new(Vec::new()) }
    }
}

impl Policy for Recorder {
    fn sample(&self, state: &PolicyState<'_>, sampling: &SamplingConfig, rng: &mut Rng) -> Sample {
        if let PolicyState::Reasoner(v) = state {
            let segs = v.segments.iter().map(|s| s.segment).collect();
            let values = v.segments.iter().map(|s| s.values.to_vec()).collect();
            self.seen.lock().unwrap().push((segs, values));
        }
        self.inner.sample(state, sampling, rng)
    }
    fn log_prob(&self, state: &PolicyState<'_>, tokens: &[Token], temperature: f64) -> Vec<f64> {
        self.inner.log_prob(state, tokens, temperature)
    }
    fn snapshot(&self) -> Box<dyn Policy> {
        self.inner.snapshot()
    }
}
