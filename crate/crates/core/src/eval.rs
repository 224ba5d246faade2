//! Held-out evaluation: accuracy, protocol violations and the usage
//! histogram of coverage against accuracy.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec::Execution;
use crate::optimize::EvalDecoding;
use crate::policy::{Policy, SamplingConfig, ScriptStep, ScriptedController, ToyGridPolicy};
use crate::protocol::controller_fault;
use crate::rewards::correctness;
use crate::rng::stream;
use crate::rollout::{resample_final_reasoner, run_trajectory, RolloutConfig};
use crate::synthenv::{OracleReasoner, OracleParams, PlantedTask};
use crate::types::{coverage_fraction, Termination};

pub const USAGE_BINS: usize = 10;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    /// The trained policy selects.
    Policy,
    /// Selects each planted interval exactly, then accepts.
    Oracle,
    /// All-zero logits, always sampled.
    Uniform,
    /// No selection; one reasoner call on the full series.
    FullSeries,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReasonerChoice {
    Policy,
    Oracle(OracleParams),
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub controller: ControllerMode,
    pub reasoner: ReasonerChoice,
    pub rollout: RolloutConfig,
    pub decoding: EvalDecoding,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub id: String,
    pub gold: char,
    pub answer: String,
    pub correct: bool,
    pub coverage: f64,
    pub rounds: usize,
    pub terminated_by: Option<Termination>,
    /// Whether the controller violation indicator fired.
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Share of questions in this bin, in percent.
    pub percent: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub mean_coverage: f64,
    pub violation_rate: f64,
    pub critical_rate: f64,
    pub usage: Vec<UsageBin>,
    #[serde(skip)]
    pub results: Vec<QuestionResult>,
}

impl EvalReport {
    /// Index of the most populated usage bin (lowest on ties).
    pub fn modal_bin(&self) -> Option<usize> {
        let best = self.usage.iter().map(|b| b.count).max()?;
        self.usage.iter().position(|b| b.count == best)
    }
}

/// Bin `i` holds coverage in `[i/10, (i+1)/10)`; full coverage joins the last bin.
pub fn usage_bin(coverage: f64) -> usize {
    ((coverage * USAGE_BINS as f64).floor() as usize).min(USAGE_BINS - 1)
}

pub fn usage_histogram(results: &[QuestionResult]) -> Vec<UsageBin> {
    let mut counts = [0usize; USAGE_BINS];
    let mut hits = [0usize; USAGE_BINS];
    for r in results {
        let b = usage_bin(r.coverage);
        counts[b] += 1;
        hits[b] += r.correct as usize;
    }
    let n = results.len().max(1) as f64;
    (0..USAGE_BINS)
        .map(|i| UsageBin {
            lo: i as f64 / USAGE_BINS as f64,
            hi: (i + 1) as f64 / USAGE_BINS as f64,
            count: counts[i],
            percent: 100.0 * counts[i] as f64 / n,
            accuracy: (counts[i] > 0).then(|| hits[i] as f64 / counts[i] as f64),
        })
        .collect()
}

fn oracle_script(task: &PlantedTask) -> ScriptedController {
    let mut script: Vec<ScriptStep> = task.intervals.iter().map(|&iv| ScriptStep::Select(iv)).collect();
    if script.is_empty() {
        script.push(ScriptStep::Select(task.series.full_span()));
    }
    script.push(ScriptStep::Accept);
    ScriptedController::new(script)
}

fn evaluate_one(
    policy: &ToyGridPolicy,
    uniform: &ToyGridPolicy,
    oracle: Option<&OracleReasoner>,
    task: &PlantedTask,
    index: usize,
    cfg: &EvalConfig,
) -> Result<QuestionResult> {
    let mut rng = stream(cfg.seed, &[index as u64]);
    let mut rollout = cfg.rollout;
    if cfg.decoding == EvalDecoding::Greedy {
        rollout.controller_sampling = SamplingConfig::GREEDY;
        rollout.reasoner_sampling = SamplingConfig::GREEDY;
    }
    let reasoner: &dyn Policy = match oracle {
        Some(o) => o,
        None => policy,
    };
    let q = &task.question;
    if cfg.controller == ControllerMode::FullSeries {
        let full = [task.series.full_span()];
        let step = resample_final_reasoner(reasoner, q, &task.series, &full, 1, &rollout.reasoner_sampling, &mut rng)?
            .remove(0);
        let correct = correctness(q, &step.answer) == 1.0;
        return Ok(QuestionResult {
            id: task.id.clone(),
            gold: q.gold,
            answer: step.answer,
            correct,
            coverage: 1.0,
            rounds: 0,
            terminated_by: None,
            violation: false,
        });
    }
    let script;
    let controller: &dyn Policy = match cfg.controller {
        ControllerMode::Policy => policy,
        ControllerMode::Uniform => {
            rollout.controller_sampling = cfg.rollout.controller_sampling;
            uniform
        }
        _ => {
            script = oracle_script(task);
            &script
        }
    };
    let t = run_trajectory(controller, reasoner, q, &task.series, &rollout, &mut rng)?;
    let steps: Vec<_> = t.controller_steps().cloned().collect();
    Ok(QuestionResult {
        id: task.id.clone(),
        gold: q.gold,
        correct: correctness(q, &t.final_answer) == 1.0,
        answer: t.final_answer.clone(),
        coverage: coverage_fraction(t.final_segments.as_slice(), task.series.len())?,
        rounds: t.len(),
        terminated_by: Some(t.terminated_by),
        violation: controller_fault(&steps).is_some(),
    })
}

/// Runs one episode per task and aggregates.
pub fn evaluate(policy: &ToyGridPolicy, tasks: &[PlantedTask], cfg: &EvalConfig) -> Result<EvalReport> {
    let uniform = ToyGridPolicy::uniform(*policy.layout());
    let oracle = match cfg.reasoner {
        ReasonerChoice::Policy => None,
        ReasonerChoice::Oracle(params) => Some(OracleReasoner::new(params, tasks)),
    };
    let results = cfg
        .execution
        .map(tasks.len(), |i| evaluate_one(policy, &uniform, oracle.as_ref(), &tasks[i], i, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = results.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let accuracy = frac(results.iter().filter(|r| r.correct).count());
    let violation_rate = frac(results.iter().filter(|r| r.violation).count());
    let critical_rate =
        frac(results.iter().filter(|r| r.terminated_by == Some(Termination::CriticalViolation)).count());
    let mean_coverage = if n == 0 { 0.0 } else { results.iter().map(|r| r.coverage).sum::<f64>() / n as f64 };
    Ok(EvalReport {
        n,
        accuracy,
        mean_coverage,
        violation_rate,
        critical_rate,
        usage: usage_histogram(&results),
        results,
    })
}
