//! Fixed-behavior policies for tests and baselines.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng as _;

use super::{ControllerView, Policy, PolicyState, ReasonerView, Sample, SamplingConfig};
use crate::protocol::{render_controller_accept, render_controller_continue, render_reasoner};
use crate::rng::Rng;
use crate::types::{Decision, Segment, Token};

#[derive(Clone, Debug, PartialEq)]
pub enum ScriptStep {
    Select(Segment),
    Accept,
    /// Emitted verbatim, with no tokens.
    Raw(String),
}

/// Plays `script[round - 1]`, accepting once the script runs out.
#[derive(Clone, Debug, Default)]
pub struct ScriptedController {
    script: Vec<ScriptStep>,
}

impl ScriptedController {
    pub fn new(script: Vec<ScriptStep>) -> Self {
        ScriptedController { script }
    }

    fn step(&self, view: &ControllerView<'_>) -> Sample {
        let step = self.script.get(view.round.saturating_sub(1)).cloned().unwrap_or(ScriptStep::Accept);
        let think = format!("scripted round {}", view.round);
        match step {
            ScriptStep::Select(seg) => Sample {
                message: render_controller_continue(&think, seg),
                tokens: vec![Token::Decision(Decision::Continue)],
                log_probs: vec![0.0],
            },
            ScriptStep::Accept => Sample {
                message: render_controller_accept(&think),
                tokens: vec![Token::Decision(Decision::Accept)],
                log_probs: vec![0.0],
            },
            ScriptStep::Raw(message) => Sample { message, tokens: Vec::new(), log_probs: Vec::new() },
        }
    }
}

/// Answers correctly with probability `accuracy`, otherwise uniformly among
/// the wrong options. Questions missing from the key get uniform answers.
#[derive(Clone, Debug)]
pub struct MockReasoner {
    accuracy: f64,
    key: Arc<HashMap<String, char>>,
}

impl MockReasoner {
    pub fn new(accuracy: f64, key: HashMap<String, char>) -> Self {
        MockReasoner { accuracy: accuracy.clamp(0.0, 1.0), key: Arc::new(key) }
    }

    fn answer(&self, view: &ReasonerView<'_>, rng: &mut Rng) -> usize {
        let options = view.question.options;
        let k = options.len();
        match self.key.get(view.question.id).and_then(|g| options.iter().position(|o| o == g)) {
            Some(gold) => {
                if k == 1 || rng.random::<f64>() < self.accuracy {
                    gold
                } else {
                    let j = rng.random_range(0..k - 1);
                    if j >= gold {
                        j + 1
                    } else {
                        j
                    }
                }
            }
            None => rng.random_range(0..k),
        }
    }
}

impl Policy for ScriptedController {
    fn sample(&self, state: &PolicyState<'_>, _sampling: &SamplingConfig, _rng: &mut Rng) -> Sample {
        match state {
            PolicyState::Controller(view) => self.step(view),
            PolicyState::Reasoner(_) => Sample {
                message: render_reasoner("scripted controller has no answer", "A"),
                tokens: vec![Token::Answer(0)],
                log_probs: vec![0.0],
            },
        }
    }

    fn log_prob(&self, _state: &PolicyState<'_>, tokens: &[Token], _temperature: f64) -> Vec<f64> {
        vec![0.0; tokens.len()]
    }

    fn snapshot(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

impl Policy for MockReasoner {
    fn sample(&self, state: &PolicyState<'_>, _sampling: &SamplingConfig, rng: &mut Rng) -> Sample {
        match state {
            PolicyState::Reasoner(view) => {
                let k = self.answer(view, rng);
                let label = view.question.options[k].to_string();
                Sample {
                    message: render_reasoner("mock", &label),
                    tokens: vec![Token::Answer(k)],
                    log_probs: vec![0.0],
                }
            }
            PolicyState::Controller(_) => Sample {
                message: render_controller_accept("mock reasoner cannot select"),
                tokens: vec![Token::Decision(Decision::Accept)],
                log_probs: vec![0.0],
            },
        }
    }

    fn log_prob(&self, _state: &PolicyState<'_>, tokens: &[Token], _temperature: f64) -> Vec<f64> {
        vec![0.0; tokens.len()]
    }

    fn snapshot(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}
