//! Group-relative advantages, variance-guided group selection, the two role
//! objectives and the joint training step.

mod trainer;

use rand::Rng as _;

pub use trainer::{
    Ablations, EvalDecoding, MetricsRecord, OptimizerKind, OptimizerState, ReasonerMode, StepOutcome,
    TrainConfig, Trainer,
};

use crate::error::{Error, Result};
use crate::policy::{
    accumulate_kl_gradient, kl_divergence_estimate, ControllerView, Policy, PolicyState, ReasonerView,
};
use crate::rng::Rng;
use crate::types::{InteractionTrajectory, Question, ReasonerStep, Segment, TimeSeries};

/// Stability constant of the advantage normalization.
pub const EPSILON: f64 = 1e-6;

/// `(r - mean) / (std + eps)` with population std, or all zeros when
/// `std < eps` or the group is constant.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::usage("group advantages need at least two rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    if std < eps || std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps)).collect())
}

/// Draws a group index with probability proportional to its correctness
/// variance; uniform when every variance is zero.
pub fn variance_guided_pick(variances: &[f64], rng: &mut Rng) -> Result<usize> {
    if variances.is_empty() {
        return Err(Error::usage("no groups to pick from"));
    }
    if let Some(v) = variances.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::usage(format!("invalid group variance {v}")));
    }
    let total: f64 = variances.iter().sum();
    if total == 0.0 {
        return Ok(rng.random_range(0..variances.len()));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, v) in variances.iter().enumerate() {
        acc += v;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(variances.iter().rposition(|v| *v > 0.0).expect("positive total"))
}

pub fn uniform_pick(n: usize, rng: &mut Rng) -> Result<usize> {
    if n == 0 {
        return Err(Error::usage("no groups to pick from"));
    }
    Ok(rng.random_range(0..n))
}

/// Controller state at 0-based round `i` of `trajectory`.
pub fn controller_state<'a>(
    question: &'a Question,
    series: &'a TimeSeries,
    trajectory: &'a InteractionTrajectory,
    segments: &'a [Segment],
    i: usize,
) -> PolicyState<'a> {
    let prior = trajectory.prior_reasoner(i);
    PolicyState::Controller(ControllerView {
        question: question.view(),
        series,
        segments,
        prior_answer: prior.map(|p| p.answer.as_str()),
        prior_trace: prior.map(|p| p.think.as_str()),
        round: i + 1,
    })
}

/// Per-message credit weights of the controller objective: entry `[g][i]`
/// multiplies the summed token score of round `i` of trajectory `g`.
pub fn controller_credit(trajectories: &[&InteractionTrajectory], advantages: &[f64], myopic: bool) -> Vec<Vec<f64>> {
    let g = trajectories.len() as f64;
    trajectories
        .iter()
        .zip(advantages)
        .map(|(t, &a)| {
            let l = t.len();
            t.rounds
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let tokens = r.controller.tokens.len();
                    if tokens == 0 || (myopic && i + 1 != l) {
                        0.0
                    } else if myopic {
                        a / (g * tokens as f64)
                    } else {
                        a / (g * l as f64 * tokens as f64)
                    }
                })
                .collect()
        })
        .collect()
}

fn check_lengths(what: &str, items: usize, advantages: usize) -> Result<()> {
    if items != advantages {
        return Err(Error::usage(format!("{items} {what} but {advantages} advantages")));
    }
    Ok(())
}

/// Value of the controller surrogate objective for one group, scaled by
/// `scale` (the batch normalization).
#[allow(clippy::too_many_arguments)]
pub fn controller_objective(
    policy: &dyn Policy,
    question: &Question,
    series: &TimeSeries,
    trajectories: &[&InteractionTrajectory],
    advantages: &[f64],
    temperature: f64,
    myopic: bool,
    scale: f64,
) -> Result<f64> {
    check_lengths("trajectories", trajectories.len(), advantages.len())?;
    let credit = controller_credit(trajectories, advantages, myopic);
    let mut total = 0.0;
    for (t, w) in trajectories.iter().zip(&credit) {
        for (i, round) in t.rounds.iter().enumerate() {
            if w[i] == 0.0 {
                continue;
            }
            let segs = t.segments_before(i);
            let state = controller_state(question, series, t, &segs, i);
            let lp: f64 = policy.log_prob(&state, &round.controller.tokens, temperature).iter().sum();
            total += scale * w[i] * lp;
        }
    }
    Ok(total)
}

/// Adds the controller objective gradient into `grad` and returns the
/// credit weights applied to each message.
#[allow(clippy::too_many_arguments)]
pub fn controller_objective_grad(
    policy: &dyn Policy,
    question: &Question,
    series: &TimeSeries,
    trajectories: &[&InteractionTrajectory],
    advantages: &[f64],
    temperature: f64,
    myopic: bool,
    scale: f64,
    grad: &mut [f64],
) -> Result<Vec<Vec<f64>>> {
    check_lengths("trajectories", trajectories.len(), advantages.len())?;
    let credit = controller_credit(trajectories, advantages, myopic);
    for (t, w) in trajectories.iter().zip(&credit) {
        for (i, round) in t.rounds.iter().enumerate() {
            if w[i] == 0.0 {
                continue;
            }
            let segs = t.segments_before(i);
            let state = controller_state(question, series, t, &segs, i);
            policy.accumulate_score_gradient(&state, &round.controller.tokens, temperature, scale * w[i], grad);
        }
    }
    Ok(credit)
}

/// Final-round reasoner inputs shared by the objective and its gradient.
pub struct ReasonerBatch<'a> {
    pub question: &'a Question,
    pub series: &'a TimeSeries,
    pub final_segments: &'a [Segment],
    pub resamples: &'a [ReasonerStep],
    pub advantages: &'a [f64],
}

impl ReasonerBatch<'_> {
    fn state(&self) -> PolicyState<'_> {
        PolicyState::Reasoner(ReasonerView::new(self.question.view(), self.series, self.final_segments))
    }

    fn credit(&self) -> Vec<f64> {
        let n = self.resamples.len() as f64;
        self.resamples
            .iter()
            .zip(self.advantages)
            .map(|(r, a)| if r.tokens.is_empty() { 0.0 } else { a / (n * r.tokens.len() as f64) })
            .collect()
    }
}

/// Reasoner surrogate objective minus `beta` times the KL to `reference`.
pub fn reasoner_objective(
    policy: &dyn Policy,
    reference: Option<&dyn Policy>,
    batch: &ReasonerBatch<'_>,
    temperature: f64,
    beta: f64,
    scale: f64,
) -> Result<f64> {
    check_lengths("resamples", batch.resamples.len(), batch.advantages.len())?;
    let state = batch.state();
    let mut total = 0.0;
    for (r, w) in batch.resamples.iter().zip(batch.credit()) {
        if w != 0.0 {
            total += w * policy.log_prob(&state, &r.tokens, temperature).iter().sum::<f64>();
        }
    }
    if let (Some(reference), true) = (reference, beta != 0.0) {
        let n = batch.resamples.len() as f64;
        let kl: f64 = batch
            .resamples
            .iter()
            .map(|r| kl_divergence_estimate(policy, reference, &state, &r.tokens, temperature))
            .sum::<f64>()
            / n;
        total -= beta * kl;
    }
    Ok(scale * total)
}

/// Adds the reasoner objective gradient into `grad` and returns the per-
/// resample credit weights.
pub fn reasoner_objective_grad(
    policy: &dyn Policy,
    reference: Option<&dyn Policy>,
    batch: &ReasonerBatch<'_>,
    temperature: f64,
    beta: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    check_lengths("resamples", batch.resamples.len(), batch.advantages.len())?;
    let state = batch.state();
    let credit = batch.credit();
    for (r, &w) in batch.resamples.iter().zip(&credit) {
        if w != 0.0 {
            policy.accumulate_score_gradient(&state, &r.tokens, temperature, scale * w, grad);
        }
    }
    if let (Some(reference), true) = (reference, beta != 0.0) {
        if policy.actions(&state, temperature).is_some() {
            accumulate_kl_gradient(policy, reference, &state, &[], temperature, -beta * scale, grad);
        } else {
            let per = -beta * scale / batch.resamples.len() as f64;
            for r in batch.resamples {
                accumulate_kl_gradient(policy, reference, &state, &r.tokens, temperature, per, grad);
            }
        }
    }
    Ok(credit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[0.5, 0.5, 0.5], EPSILON).unwrap(), vec![0.0; 3]);
        let a = group_advantages(&[1.0, 0.0], EPSILON).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-5 && (a[1] + 1.0).abs() < 1e-5);
        let a = group_advantages(&[1.0, 0.0, 0.5], EPSILON).unwrap();
        assert!((a[0] - 1.224_744_871).abs() < 1e-5);
        assert!((a[1] + 1.224_744_871).abs() < 1e-5);
        assert!(a[2].abs() < 1e-12);
        assert!(group_advantages(&[1.0], EPSILON).is_err());
    }

    #[test]
    fn pick_rejects_negative() {
        let mut rng = stream(0, &[]);
        assert!(variance_guided_pick(&[0.1, -0.1], &mut rng).is_err());
        assert!(variance_guided_pick(&[f64::NAN], &mut rng).is_err());
        for _ in 0..100 {
            assert_eq!(variance_guided_pick(&[0.0, 0.0, 1.0], &mut rng).unwrap(), 2);
        }
    }
}
