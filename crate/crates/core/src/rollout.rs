//! Controller/reasoner interaction episodes and the nested group rollouts
//! built from them.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ControllerView, Policy, PolicyState, ReasonerView, SamplingConfig};
use crate::protocol::{parse_controller, parse_reasoner, ControllerContext};
use crate::rewards::{correctness, population_variance, reliability};
use crate::rng::{stream, Rng};
use crate::types::{
    Decision, InteractionTrajectory, Question, ReasonerStep, Round, Segment, SegmentList, Termination,
    TimeSeries,
};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_rounds: usize,
    pub controller_sampling: SamplingConfig,
    pub reasoner_sampling: SamplingConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_rounds: 4,
            controller_sampling: SamplingConfig::CONTROLLER,
            reasoner_sampling: SamplingConfig::REASONER,
        }
    }
}

fn reasoner_step(
    reasoner: &dyn Policy,
    question: &Question,
    series: &TimeSeries,
    segments: &[Segment],
    sampling: &SamplingConfig,
    rng: &mut Rng,
) -> ReasonerStep {
    let state = PolicyState::Reasoner(ReasonerView::new(question.view(), series, segments));
    let sample = reasoner.sample(&state, sampling, rng);
    let (mut step, _) = parse_reasoner(&sample.message);
    step.tokens = sample.tokens;
    step.log_probs = sample.log_probs;
    step
}

/// Plays one episode. Rounds alternate a controller decision with, on
/// CONTINUE, a reasoner answer over the enlarged segment list.
pub fn run_trajectory(
    controller: &dyn Policy,
    reasoner: &dyn Policy,
    question: &Question,
    series: &TimeSeries,
    cfg: &RolloutConfig,
    rng: &mut Rng,
) -> Result<InteractionTrajectory> {
    if cfg.max_rounds == 0 {
        return Err(Error::usage("max_rounds must be at least 1"));
    }
    let mut segments: Vec<Segment> = Vec::new();
    let mut rounds: Vec<Round> = Vec::new();
    let mut prior: Option<ReasonerStep> = None;
    let mut outcome = None;
    for round in 1..=cfg.max_rounds {
        let view = ControllerView {
            question: question.view(),
            series,
            segments: &segments,
            prior_answer: prior.as_ref().map(|p| p.answer.as_str()),
            prior_trace: prior.as_ref().map(|p| p.think.as_str()),
            round,
        };
        let sample = controller.sample(&PolicyState::Controller(view), &cfg.controller_sampling, rng);
        let ctx = ControllerContext { series_len: series.len(), has_prior_answer: prior.is_some() };
        let (mut step, _) = parse_controller(&sample.message, ctx);
        step.tokens = sample.tokens;
        step.log_probs = sample.log_probs;

        if step.violation {
            rounds.push(Round { controller: step, reasoner: None });
            outcome = Some((Termination::CriticalViolation, String::new()));
            break;
        }
        match (step.decision, step.proposed_segment) {
            (Some(Decision::Continue), Some(seg)) => {
                segments.push(seg);
                let r = reasoner_step(reasoner, question, series, &segments, &cfg.reasoner_sampling, rng);
                prior = Some(r.clone());
                rounds.push(Round { controller: step, reasoner: Some(r) });
            }
            _ => {
                rounds.push(Round { controller: step, reasoner: None });
                let answer = prior.as_ref().map(|p| p.answer.clone()).unwrap_or_default();
                outcome = Some((Termination::Accept, answer));
                break;
            }
        }
    }
    let (terminated_by, final_answer) = outcome.unwrap_or_else(|| {
        (Termination::RoundCap, prior.as_ref().map(|p| p.answer.clone()).unwrap_or_default())
    });
    Ok(InteractionTrajectory {
        rounds,
        final_segments: SegmentList::from_segments(segments, series.len())?,
        final_answer,
        terminated_by,
    })
}

/// `n` independent reasoner draws conditioned on the same segment list.
pub fn resample_final_reasoner(
    reasoner: &dyn Policy,
    question: &Question,
    series: &TimeSeries,
    final_segments: &[Segment],
    n: usize,
    sampling: &SamplingConfig,
    rng: &mut Rng,
) -> Result<Vec<ReasonerStep>> {
    if n == 0 {
        return Err(Error::usage("at least one resample is required"));
    }
    Ok((0..n).map(|_| reasoner_step(reasoner, question, series, final_segments, sampling, rng)).collect())
}

/// One trajectory of a group with its final-round resamples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub trajectory: InteractionTrajectory,
    pub resamples: Vec<ReasonerStep>,
    pub correctness: Vec<f64>,
    /// Correctness of the trajectory's own final answer.
    pub final_correct: f64,
    pub r_mu: f64,
    pub r_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub members: Vec<GroupMember>,
}

impl Group {
    pub fn variances(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.r_sigma).collect()
    }
}

/// `g` trajectories, each followed by `n` final-round resamples. Trajectory
/// `i` draws from the stream at `path ++ [i]` under `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_group(
    controller: &dyn Policy,
    reasoner: &dyn Policy,
    question: &Question,
    series: &TimeSeries,
    g: usize,
    n: usize,
    cfg: &RolloutConfig,
    seed: u64,
    path: &[u64],
) -> Result<Group> {
    if g < 2 {
        return Err(Error::usage("a group needs at least two trajectories"));
    }
    let mut members = Vec::with_capacity(g);
    for i in 0..g {
        let mut key = path.to_vec();
        key.push(i as u64);
        let mut rng = stream(seed, &key);
        let trajectory = run_trajectory(controller, reasoner, question, series, cfg, &mut rng)?;
        let resamples = resample_final_reasoner(
            reasoner,
            question,
            series,
            trajectory.final_segments.as_slice(),
            n,
            &cfg.reasoner_sampling,
            &mut rng,
        )?;
        let correctness: Vec<f64> = resamples.iter().map(|r| correctness(question, &r.answer)).collect();
        let r_mu = reliability(&correctness)?;
        let r_sigma = population_variance(&correctness);
        let final_correct = crate::rewards::correctness(question, &trajectory.final_answer);
        members.push(GroupMember { trajectory, resamples, correctness, final_correct, r_mu, r_sigma });
    }
    Ok(Group { members })
}

/// One line of a trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub question_id: String,
    pub seed: u64,
    pub stream: Vec<u64>,
    pub member: GroupMember,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<crate::rewards::RewardBundle>,
}

pub fn write_records(records: &[TrajectoryRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
