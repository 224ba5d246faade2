mod common;

use common::fixtures::{Role, MESSAGES, TRAJECTORIES};
use segrl_core::protocol::{parse_controller, parse_reasoner, score_controller_trajectory, ControllerContext};
use segrl_core::types::{ControllerStep, Decision, Segment};

#[test]
fn message_scores_are_exact() {
    assert!(MESSAGES.len() >= 12);
    for f in MESSAGES {
        let report = match f.role {
            Role::Reasoner => parse_reasoner(f.raw).1,
            Role::Controller { series_len, has_prior_answer } => {
                parse_controller(f.raw, ControllerContext { series_len, has_prior_answer }).1
            }
        };
        assert_eq!(report.score.to_bits(), f.score.to_bits(), "{}: {:?}", f.name, report);
        assert_eq!(report.critical, f.critical, "{}", f.name);
    }
}

fn step(score: f64, critical: bool, accept: Option<bool>) -> ControllerStep {
    let decision = accept.map(|a| if a { Decision::Accept } else { Decision::Continue });
    ControllerStep {
        think: "t".into(),
        decision,
        proposed_segment: (accept == Some(false)).then_some(Segment { start: 0, end: 8 }),
        raw_message: String::new(),
        format_score: score,
        violation: critical,
        violations: Vec::new(),
        tokens: Vec::new(),
        log_probs: Vec::new(),
    }
}

#[test]
fn trajectory_scores_are_exact() {
    for f in TRAJECTORIES {
        let steps: Vec<_> = f.steps.iter().map(|&(s, c, a)| step(s, c, a)).collect();
        let got = score_controller_trajectory(&steps).unwrap();
        assert_eq!(got.to_bits(), f.score.to_bits(), "{}: {got}", f.name);
    }
}

#[test]
fn inclusive_bounds_become_half_open() {
    let raw = r#"<think>t</think><tool_call>{"name":"timeseries_selection_tool","arguments":{"ts_seg":[10,20]}}</tool_call>"#;
    let (s, _) = parse_controller(raw, ControllerContext { series_len: 100, has_prior_answer: false });
    assert_eq!(s.proposed_segment, Some(Segment { start: 10, end: 21 }));
    let last = r#"<think>t</think><tool_call>{"name":"timeseries_selection_tool","arguments":{"ts_seg":[0,99]}}</tool_call>"#;
    let (s, r) = parse_controller(last, ControllerContext { series_len: 100, has_prior_answer: false });
    assert_eq!((s.proposed_segment, r.critical), (Some(Segment { start: 0, end: 100 }), false));
}
