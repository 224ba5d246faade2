//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the code paths it is used to check.
#![allow(dead_code)]

use segrl_core::types::Segment;

/// Coverage by marking every covered timestep.
pub fn brute_coverage(segments: &[Segment], series_len: usize) -> f64 {
    let mut mask = vec![false; series_len];
    for s in segments {
        mask[s.start..s.end].fill(true);
    }
    mask.iter().filter(|m| **m).count() as f64 / series_len as f64
}

pub mod fixtures {
    //! Canonical messages with scores worked out by hand from the deduction
    //! table: 1.0 minus 0.25 per distinct non-critical class, -1 on any
    //! critical violation.

    #[derive(Copy, Clone, Debug)]
    pub enum Role {
        Reasoner,
        /// Series length and whether a reasoner answer exists.
        Controller { series_len: usize, has_prior_answer: bool },
    }

    #[derive(Copy, Clone, Debug)]
    pub struct Fixture {
        pub name: &'static str,
        pub role: Role,
        pub raw: &'static str,
        pub score: f64,
        pub critical: bool,
    }

    const R: Role = Role::Reasoner;
    const C: Role = Role::Controller { series_len: 100, has_prior_answer: true };
    const C_FIRST: Role = Role::Controller { series_len: 100, has_prior_answer: false };

    pub const MESSAGES: &[Fixture] = &[
        Fixture { name: "reasoner compliant", role: R, raw: "<think>t</think><answer>A</answer>", score: 1.0, critical: false },
        Fixture { name: "reasoner missing answer", role: R, raw: "<think>t</think>", score: -1.0, critical: true },
        Fixture { name: "reasoner empty answer", role: R, raw: "<think>t</think><answer> </answer>", score: -1.0, critical: true },
        Fixture { name: "reasoner missing think", role: R, raw: "<answer>B</answer>", score: 0.75, critical: false },
        Fixture { name: "reasoner double answer", role: R, raw: "<think>t</think><answer>A</answer><answer>B</answer>", score: 0.75, critical: false },
        Fixture { name: "reasoner double think", role: R, raw: "<think>a</think><think>b</think><answer>A</answer>", score: 0.75, critical: false },
        Fixture { name: "reasoner answer inside think", role: R, raw: "<think>t <answer>B</answer></think>", score: 0.75, critical: false },
        Fixture { name: "reasoner stray text and no think", role: R, raw: "so: <answer>C</answer>", score: 0.5, critical: false },
        Fixture {
            name: "controller compliant continue",
            role: C,
            raw: r#"<think>t</think><tool_call>{"name":"timeseries_selection_tool","arguments":{"ts_seg":[10,20]}}</tool_call>"#,
            score: 1.0,
            critical: false,
        },
        Fixture { name: "controller compliant accept", role: C, raw: "<think>t</think><answer>ACCEPT</answer>", score: 1.0, critical: false },
        Fixture {
            name: "controller double decision",
            role: C,
            raw: r#"<think>t</think><tool_call>{"name":"timeseries_selection_tool","arguments":{"ts_seg":[10,20]}}</tool_call><answer>ACCEPT</answer>"#,
            score: -1.0,
            critical: true,
        },
        Fixture { name: "controller no decision", role: C, raw: "<think>t</think>", score: -1.0, critical: true },
        Fixture {
            name: "controller out-of-bounds segment",
            role: C,
            raw: r#"<think>t</think><tool_call>{"name":"timeseries_selection_tool","arguments":{"ts_seg":[90,100]}}</tool_call>"#,
            score: -1.0,
            critical: true,
        },
        Fixture {
            name: "controller degenerate segment",
            role: C,
            raw: r#"<think>t</think><tool_call>{"name":"timeseries_selection_tool","arguments":{"ts_seg":[20,10]}}</tool_call>"#,
            score: -1.0,
            critical: true,
        },
        Fixture {
            name: "controller wrong tool name",
            role: C,
            raw: r#"<think>t</think><tool_call>{"name":"zoom","arguments":{"ts_seg":[1,9]}}</tool_call>"#,
            score: -1.0,
            critical: true,
        },
        Fixture { name: "controller accept at round 1", role: C_FIRST, raw: "<think>t</think><answer>ACCEPT</answer>", score: -1.0, critical: true },
        Fixture { name: "controller accept with other literal", role: C, raw: "<think>t</think><answer>B</answer>", score: -1.0, critical: true },
        Fixture {
            name: "controller missing think",
            role: C,
            raw: r#"<tool_call>{"name":"timeseries_selection_tool","arguments":{"ts_seg":[0,7]}}</tool_call>"#,
            score: 0.75,
            critical: false,
        },
        Fixture { name: "controller stray text", role: C, raw: "ok <think>t</think><answer>ACCEPT</answer>", score: 0.75, critical: false },
        Fixture {
            name: "controller unknown tool keys",
            role: C,
            raw: r#"<think>t</think><tool_call>{"name":"timeseries_selection_tool","arguments":{"ts_seg":[0,7],"zoom":2}}</tool_call>"#,
            score: 0.75,
            critical: false,
        },
    ];

    /// Per-step scores, per-step critical flags and decisions (`true` for
    /// ACCEPT) with the expected trajectory score.
    pub struct TrajectoryFixture {
        pub name: &'static str,
        pub steps: &'static [(f64, bool, Option<bool>)],
        pub score: f64,
    }

    pub const TRAJECTORIES: &[TrajectoryFixture] = &[
        TrajectoryFixture { name: "three clean rounds", steps: &[(1.0, false, Some(false)), (1.0, false, Some(false)), (1.0, false, Some(true))], score: 1.0 },
        TrajectoryFixture { name: "mean of 1 and 0.75", steps: &[(1.0, false, Some(false)), (0.75, false, Some(true))], score: 0.875 },
        TrajectoryFixture { name: "mean of 1, 0.75, 0.5", steps: &[(1.0, false, Some(false)), (0.75, false, Some(false)), (0.5, false, Some(true))], score: 0.75 },
        TrajectoryFixture { name: "critical last step", steps: &[(1.0, false, Some(false)), (-1.0, true, None)], score: -1.0 },
        TrajectoryFixture { name: "round cap without accept", steps: &[(1.0, false, Some(false)), (1.0, false, Some(false))], score: -1.0 },
        TrajectoryFixture { name: "accept before the last round", steps: &[(1.0, false, Some(true)), (1.0, false, Some(true))], score: -1.0 },
    ];
}

pub mod tiny {
    //! Two windows, ACCEPT from round 2, at most two rounds and two answer
    //! options: 20 complete trajectories. Objectives are evaluated by
    //! enumeration with log-probabilities recomputed from the raw logits.

    use segrl_core::optimize::{controller_objective_grad, reasoner_objective_grad, ReasonerBatch};
    use segrl_core::policy::{ControllerView, Policy, ReasonerView, ToyGridPolicy, ToyLayout};
    use segrl_core::rng::Rng;
    use segrl_core::types::{
        ControllerStep, Decision, InteractionTrajectory, Question, QuestionTag, ReasonerStep, Round, Segment,
        SegmentList, Termination, TimeSeries, Token,
    };
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    pub const H: usize = 32;
    pub const K: usize = 2;
    pub const WINDOWS: [Segment; 2] = [Segment { start: 0, end: 16 }, Segment { start: 16, end: 32 }];
    pub const CTL_TEMP: f64 = 1.0;
    pub const RSN_TEMP: f64 = 0.7;

    pub struct Setup {
        pub question: Question,
        pub series: TimeSeries,
        pub layout: ToyLayout,
    }

    /// Random series whose windows land in varied salience buckets.
    pub fn setup(rng: &mut Rng) -> Setup {
        let mut values: Vec<f64> = (0..H).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0).collect();
        let t = rng.random_range(0..H);
        values[t] += if rng.random::<bool>() { 7.0 } else { -7.0 };
        let question = Question::new("tiny", "which half holds the spike", Question::letter_options(K), 'A', QuestionTag::Locate)
            .expect("valid question");
        Setup { question, series: TimeSeries::new("tiny", values).expect("finite"), layout: ToyLayout::new(K) }
    }

    #[derive(Clone, Debug)]
    pub struct Path {
        pub windows: Vec<usize>,
        pub answers: Vec<usize>,
        pub accept: bool,
    }

    pub fn enumerate() -> Vec<Path> {
        let mut out = Vec::new();
        for w1 in 0..2 {
            for a1 in 0..K {
                out.push(Path { windows: vec![w1], answers: vec![a1], accept: true });
                for w2 in 0..2 {
                    for a2 in 0..K {
                        out.push(Path { windows: vec![w1, w2], answers: vec![a1, a2], accept: false });
                    }
                }
            }
        }
        out
    }

    fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
        let s: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + s.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        s.iter().map(|x| x - z).collect()
    }

    fn controller_tokens(path: &Path, round: usize) -> Vec<Token> {
        if round < path.windows.len() {
            vec![Token::Decision(Decision::Continue), Token::Window(path.windows[round])]
        } else {
            vec![Token::Decision(Decision::Accept)]
        }
    }

    fn label(s: &Setup, a: usize) -> String {
        s.question.options[a].to_string()
    }

    /// Controller token log-probs at round `round` (0-based) of `path`.
    pub fn controller_log_probs(policy: &ToyGridPolicy, s: &Setup, path: &Path, round: usize) -> Vec<f64> {
        let segments: Vec<Segment> = path.windows[..round].iter().map(|&w| WINDOWS[w]).collect();
        let prior = (round > 0).then(|| label(s, path.answers[round - 1]));
        let view = ControllerView {
            question: s.question.view(),
            series: &s.series,
            segments: &segments,
            prior_answer: prior.as_deref(),
            prior_trace: prior.as_ref().map(|_| ""),
            round: round + 1,
        };
        let lp = log_softmax(&policy.controller_logits(&view), CTL_TEMP);
        let cont = (lp[0].exp() + lp[1].exp()).ln();
        controller_tokens(path, round)
            .iter()
            .map(|t| match *t {
                Token::Decision(Decision::Continue) => cont,
                Token::Window(w) => lp[w] - cont,
                Token::Decision(Decision::Accept) => lp[2],
                Token::Answer(_) => unreachable!(),
            })
            .collect()
    }

    pub fn answer_log_probs(policy: &ToyGridPolicy, s: &Setup, segments: &[Segment]) -> Vec<f64> {
        let view = ReasonerView::new(s.question.view(), &s.series, segments);
        log_softmax(&policy.reasoner_logits(&view), RSN_TEMP)
    }

    fn rounds(path: &Path) -> usize {
        path.windows.len() + path.accept as usize
    }

    /// Probability of the whole episode, answers included.
    pub fn path_prob(policy: &ToyGridPolicy, s: &Setup, path: &Path) -> f64 {
        let mut lp = 0.0;
        for i in 0..rounds(path) {
            lp += controller_log_probs(policy, s, path, i).iter().sum::<f64>();
            if i < path.windows.len() {
                let segs: Vec<Segment> = path.windows[..=i].iter().map(|&w| WINDOWS[w]).collect();
                lp += answer_log_probs(policy, s, &segs)[path.answers[i]];
            }
        }
        lp.exp()
    }

    /// Surrogate controller objective with trajectory weights `p0` fixed.
    pub fn controller_value(
        policy: &ToyGridPolicy,
        s: &Setup,
        paths: &[Path],
        p0: &[f64],
        adv: &[f64],
        myopic: bool,
    ) -> f64 {
        let mut total = 0.0;
        for (k, path) in paths.iter().enumerate() {
            let l = rounds(path);
            for i in 0..l {
                if myopic && i + 1 != l {
                    continue;
                }
                let lp = controller_log_probs(policy, s, path, i);
                let per_round = if myopic { 1.0 } else { 1.0 / l as f64 };
                total += p0[k] * adv[k] * per_round * lp.iter().sum::<f64>() / lp.len() as f64;
            }
        }
        total
    }

    /// Expected answer score under fixed weights minus `beta` times the exact
    /// KL to `reference`.
    pub fn reasoner_value(
        policy: &ToyGridPolicy,
        reference: &ToyGridPolicy,
        s: &Setup,
        segments: &[Segment],
        p0: &[f64],
        adv: &[f64],
        beta: f64,
    ) -> f64 {
        let lp = answer_log_probs(policy, s, segments);
        let lq = answer_log_probs(reference, s, segments);
        let surrogate: f64 = (0..K).map(|a| p0[a] * adv[a] * lp[a]).sum();
        let kl: f64 = (0..K).map(|a| lp[a].exp() * (lp[a] - lq[a])).sum();
        surrogate - beta * kl
    }

    pub fn trajectory(s: &Setup, path: &Path) -> InteractionTrajectory {
        let mut rounds_out = Vec::new();
        for i in 0..rounds(path) {
            let tokens = controller_tokens(path, i);
            let cont = i < path.windows.len();
            let controller = ControllerStep {
                think: String::new(),
                decision: Some(if cont { Decision::Continue } else { Decision::Accept }),
                proposed_segment: cont.then(|| WINDOWS[path.windows[i]]),
                raw_message: String::new(),
                format_score: 1.0,
                violation: false,
                violations: Vec::new(),
                log_probs: vec![0.0; tokens.len()],
                tokens,
            };
            let reasoner = cont.then(|| answer_step(s, path.answers[i]));
            rounds_out.push(Round { controller, reasoner });
        }
        let segs: Vec<Segment> = path.windows.iter().map(|&w| WINDOWS[w]).collect();
        InteractionTrajectory {
            rounds: rounds_out,
            final_segments: SegmentList::from_segments(segs, H).expect("in bounds"),
            final_answer: label(s, *path.answers.last().expect("at least one answer")),
            terminated_by: if path.accept { Termination::Accept } else { Termination::RoundCap },
        }
    }

    pub fn answer_step(s: &Setup, a: usize) -> ReasonerStep {
        ReasonerStep {
            think: String::new(),
            answer: label(s, a),
            raw_message: String::new(),
            format_score: 1.0,
            critical: false,
            violations: Vec::new(),
            tokens: vec![Token::Answer(a)],
            log_probs: vec![0.0],
        }
    }

    fn random_params(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn central_difference(theta: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut x = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                x[i] = theta[i] + h;
                let up = f(&x);
                x[i] = theta[i] - h;
                let down = f(&x);
                x[i] = theta[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Infinite when the reference gradient vanishes, so a degenerate point
    /// cannot pass.
    fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return f64::INFINITY;
        }
        diff / norm
    }

    /// Worst relative errors (controller, reasoner) over one random point.
    pub fn check_point(rng: &mut Rng, myopic: bool) -> (f64, f64) {
        const STEP: f64 = 1e-5;
        const BETA: f64 = 0.3;
        let s = setup(rng);
        let n = s.layout.num_params();
        let theta = random_params(n, rng);
        let policy = ToyGridPolicy::from_params(s.layout, theta.clone()).expect("layout");
        let with = |x: &[f64]| ToyGridPolicy::from_params(s.layout, x.to_vec()).expect("layout");

        let paths = enumerate();
        let p0: Vec<f64> = paths.iter().map(|p| path_prob(&policy, &s, p)).collect();
        let adv: Vec<f64> = paths.iter().map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let trajectories: Vec<InteractionTrajectory> = paths.iter().map(|p| trajectory(&s, p)).collect();
        let refs: Vec<&InteractionTrajectory> = trajectories.iter().collect();
        let g = paths.len() as f64;
        let group_adv: Vec<f64> = p0.iter().zip(&adv).map(|(p, a)| g * p * a).collect();
        let mut analytic = vec![0.0; n];
        controller_objective_grad(&policy, &s.question, &s.series, &refs, &group_adv, CTL_TEMP, myopic, 1.0, &mut analytic)
            .expect("objective");
        let numeric = central_difference(&theta, STEP, |x| controller_value(&with(x), &s, &paths, &p0, &adv, myopic));
        let ctl_err = relative_error(&analytic, &numeric);

        let reference = with(&random_params(n, rng));
        let mut rsn_err: f64 = 0.0;
        for segments in [vec![WINDOWS[0]], vec![WINDOWS[1]], vec![WINDOWS[0], WINDOWS[1]]] {
            let q0: Vec<f64> = answer_log_probs(&policy, &s, &segments).iter().map(|l| l.exp()).collect();
            let adv: Vec<f64> = (0..K).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let resamples: Vec<ReasonerStep> = (0..K).map(|a| answer_step(&s, a)).collect();
            let batch_adv: Vec<f64> = (0..K).map(|a| K as f64 * q0[a] * adv[a]).collect();
            let batch = ReasonerBatch {
                question: &s.question,
                series: &s.series,
                final_segments: &segments,
                resamples: &resamples,
                advantages: &batch_adv,
            };
            let mut analytic = vec![0.0; n];
            let reference_dyn: &dyn Policy = &reference;
            reasoner_objective_grad(&policy, Some(reference_dyn), &batch, RSN_TEMP, BETA, 1.0, &mut analytic)
                .expect("objective");
            let numeric =
                central_difference(&theta, STEP, |x| reasoner_value(&with(x), &reference, &s, &segments, &q0, &adv, BETA));
            rsn_err = rsn_err.max(relative_error(&analytic, &numeric));
        }
        (ctl_err, rsn_err)
    }
}
