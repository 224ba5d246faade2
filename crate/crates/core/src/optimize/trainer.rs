use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    controller_objective_grad, group_advantages, reasoner_objective_grad, uniform_pick, variance_guided_pick,
    ReasonerBatch, EPSILON,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ControllerMode, EvalConfig, EvalReport, ReasonerChoice};
use crate::exec::Execution;
use crate::policy::{Policy, ToyGridPolicy, ToyLayout};
use crate::protocol::score_controller_trajectory;
use crate::rewards::{controller_reward, correctness, reasoner_reward, RewardWeights};
use crate::rng::stream;
use crate::rollout::{resample_final_reasoner, run_group, RolloutConfig};
use crate::synthenv::{OracleReasoner, OracleParams, PlantedTask};
use crate::types::coverage_fraction;

const STREAM_PERMUTATION: u64 = 1;
const STREAM_GROUP: u64 = 2;
const STREAM_PICK: u64 = 3;
const STREAM_RESAMPLE: u64 = 4;
const STREAM_EVAL: u64 = 5;

/// Ablation switches. All off is the full method.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Train the reasoner alone on the full series; no segment selection.
    pub reasoner_only: bool,
    /// Freeze the reasoner.
    pub controller_only: bool,
    /// Replace reliability with the correctness of the trajectory's own answer.
    pub no_reliability: bool,
    /// Credit only the last controller round.
    pub myopic_controller: bool,
    /// Pick the reasoner group uniformly.
    pub uniform_group_sampling: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] =
        ["reasoner_only", "controller_only", "no_reliability", "myopic_controller", "uniform_group_sampling"];

    fn flags(&mut self) -> [&mut bool; 5] {
        [
            &mut self.reasoner_only,
            &mut self.controller_only,
            &mut self.no_reliability,
            &mut self.myopic_controller,
            &mut self.uniform_group_sampling,
        ]
    }

    /// Parses `none` or a `,`/`+` separated list of switch names.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Ablations::default();
        for name in text.split([',', '+']).map(str::trim).filter(|s| !s.is_empty()) {
            if name == "none" || name == "full" {
                continue;
            }
            let i = Self::NAMES
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::config(format!("unknown ablation {name:?}; expected one of {:?}", Self::NAMES)))?;
            *out.flags()[i] = true;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn label(&self) -> String {
        let mut copy = *self;
        let on: Vec<&str> = copy.flags().iter().zip(Self::NAMES).filter(|(f, _)| ***f).map(|(_, n)| n).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reasoner_only && self.controller_only {
            return Err(Error::config("reasoner_only and controller_only are exclusive"));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient ascent.
    Ascent,
    /// Adaptive moments with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub const ADAMW: OptimizerKind = OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 };
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    /// Ascent step on the entries flagged in `trainable`.
    pub fn apply(&mut self, kind: &OptimizerKind, lr: f64, params: &mut [f64], grad: &[f64], trainable: &[bool]) {
        match *kind {
            OptimizerKind::Ascent => {
                for ((p, g), on) in params.iter_mut().zip(grad).zip(trainable) {
                    if *on {
                        *p += lr * g;
                    }
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    if !trainable[i] {
                        continue;
                    }
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let step = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                    params[i] += lr * (step - weight_decay * params[i]);
                }
            }
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReasonerMode {
    /// The shared policy answers (self-play).
    Learned,
    /// The coverage-gated oracle answers; reasoner parameters stay frozen.
    Oracle(OracleParams),
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalDecoding {
    /// Rollout temperatures and nucleus mass.
    #[default]
    Sampled,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub group_size: usize,
    pub resamples: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub rollout: RolloutConfig,
    pub weights: RewardWeights,
    pub ablations: Ablations,
    pub optimizer: OptimizerKind,
    pub reasoner: ReasonerMode,
    /// Evaluate every this many steps; 0 disables.
    pub eval_every: u64,
    pub eval_decoding: EvalDecoding,
    pub checkpoint_every: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 500,
            batch_size: 64,
            group_size: 6,
            resamples: 6,
            learning_rate: 1e-6,
            beta: 0.002,
            epsilon: EPSILON,
            rollout: RolloutConfig::default(),
            weights: RewardWeights::default(),
            ablations: Ablations::default(),
            optimizer: OptimizerKind::Ascent,
            reasoner: ReasonerMode::Learned,
            eval_every: 50,
            eval_decoding: EvalDecoding::Sampled,
            checkpoint_every: 50,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with a step size that moves tabular logits within a few
    /// hundred steps.
    pub fn desk() -> Self {
        TrainConfig { learning_rate: DESK_LEARNING_RATE, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.group_size < 2 || self.resamples < 2 {
            return bad("group_size and resamples must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and nonnegative");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.rollout.max_rounds == 0 {
            return bad("max_rounds must be at least 1");
        }
        for s in [self.rollout.controller_sampling, self.rollout.reasoner_sampling] {
            if s.temperature.is_nan() || s.temperature <= 0.0 || !(s.top_p > 0.0 && s.top_p <= 1.0) {
                return bad("rollout temperatures must be > 0 and top_p in (0, 1]");
            }
        }
        self.weights.validate()?;
        self.ablations.validate()
    }

    /// The fields a resumed run must share with the checkpointed one.
    pub fn compatibility_key(&self) -> TrainConfig {
        TrainConfig {
            steps: 0,
            eval_every: 0,
            checkpoint_every: 0,
            execution: Execution::default(),
            ..self.clone()
        }
    }
}

pub const DESK_LEARNING_RATE: f64 = 1.0;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub ablation: String,
    pub mean_r_ctl: Option<f64>,
    pub mean_r_rsn: f64,
    pub reliability: f64,
    pub coverage: f64,
    pub violation_rate: f64,
    pub mean_rounds: f64,
    pub grad_norm: f64,
    pub eval_accuracy: Option<f64>,
}

/// Per-question result of the rollout and gradient phase.
struct QuestionOutcome {
    grad: Vec<f64>,
    r_ctl: Vec<f64>,
    r_rsn: Vec<f64>,
    reliability: Vec<f64>,
    coverage: Vec<f64>,
    violations: usize,
    rounds: Vec<usize>,
}

pub struct StepOutcome {
    pub metrics: MetricsRecord,
    pub eval: Option<EvalReport>,
}

/// Training state for a shared-parameter toy policy.
pub struct Trainer {
    cfg: TrainConfig,
    policy: ToyGridPolicy,
    reference: ToyGridPolicy,
    optimizer: OptimizerState,
    step: u64,
    tasks: Vec<PlantedTask>,
    eval_tasks: Vec<PlantedTask>,
    oracle: Option<OracleReasoner>,
}

impl Trainer {
    /// Fresh run from `policy`, which also becomes the KL reference.
    pub fn new(
        cfg: TrainConfig,
        policy: ToyGridPolicy,
        tasks: Vec<PlantedTask>,
        eval_tasks: Vec<PlantedTask>,
    ) -> Result<Self> {
        let reference = policy.clone();
        Self::resume(cfg, policy, reference, OptimizerState::default(), 0, tasks, eval_tasks)
    }

    pub fn resume(
        cfg: TrainConfig,
        policy: ToyGridPolicy,
        reference: ToyGridPolicy,
        optimizer: OptimizerState,
        step: u64,
        tasks: Vec<PlantedTask>,
        eval_tasks: Vec<PlantedTask>,
    ) -> Result<Self> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(Error::usage("training needs at least one task"));
        }
        if policy.layout() != reference.layout() {
            return Err(Error::IncompatibleCheckpoint("policy and reference layouts differ".into()));
        }
        for t in tasks.iter().chain(&eval_tasks) {
            if t.question.options.len() > policy.layout().options {
                return Err(Error::usage(format!(
                    "task {} has {} options; the policy supports {}",
                    t.id,
                    t.question.options.len(),
                    policy.layout().options
                )));
            }
        }
        let oracle = match cfg.reasoner {
            ReasonerMode::Learned => None,
            ReasonerMode::Oracle(params) => Some(OracleReasoner::new(params, &tasks)),
        };
        Ok(Trainer { cfg, policy, reference, optimizer, step, tasks, eval_tasks, oracle })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn set_execution(&mut self, execution: Execution) {
        self.cfg.execution = execution;
    }

    pub fn policy(&self) -> &ToyGridPolicy {
        &self.policy
    }

    pub fn reference(&self) -> &ToyGridPolicy {
        &self.reference
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn layout(&self) -> &ToyLayout {
        self.policy.layout()
    }

    fn reasoner(&self) -> &dyn Policy {
        match &self.oracle {
            Some(o) => o,
            None => &self.policy,
        }
    }

    /// Task indices of the batch for `step`: consecutive positions of a
    /// stream of per-epoch permutations.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.tasks.len() as u64;
        let b = self.cfg.batch_size as u64;
        let mut out = Vec::with_capacity(b as usize);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for pos in step * b..(step + 1) * b {
            let epoch = pos / n;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..n as usize).collect();
                perm.shuffle(&mut stream(self.cfg.seed, &[STREAM_PERMUTATION, epoch]));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("filled above").1[(pos % n) as usize]);
        }
        out
    }

    /// Which parameters the current configuration may change.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let lay = self.policy.layout();
        let ctl = lay.controller_params();
        let rsn = lay.reasoner_params();
        let ab = &self.cfg.ablations;
        let train_rsn = !ab.controller_only && self.oracle.is_none();
        (0..lay.num_params())
            .map(|i| (ctl.contains(&i) && !ab.reasoner_only) || (rsn.contains(&i) && train_rsn))
            .collect()
    }

    fn question_outcome(&self, b: usize, task: &PlantedTask) -> Result<QuestionOutcome> {
        let cfg = &self.cfg;
        let ab = &cfg.ablations;
        let policy: &dyn Policy = &self.policy;
        let reasoner = self.reasoner();
        let learn_reasoner = !ab.controller_only && self.oracle.is_none();
        let scale = 1.0 / cfg.batch_size as f64;
        let rsn_temp = cfg.rollout.reasoner_sampling.scoring_temperature();
        let ctl_temp = cfg.rollout.controller_sampling.scoring_temperature();
        let q = &task.question;
        let series = &task.series;
        let mut grad = vec![0.0; policy.num_params()];
        let key = [self.step, b as u64];

        if ab.reasoner_only {
            let full = [series.full_span()];
            let mut rng = stream(cfg.seed, &[STREAM_RESAMPLE, key[0], key[1]]);
            let resamples = resample_final_reasoner(
                reasoner,
                q,
                series,
                &full,
                cfg.resamples,
                &cfg.rollout.reasoner_sampling,
                &mut rng,
            )?;
            let c: Vec<f64> = resamples.iter().map(|r| correctness(q, &r.answer)).collect();
            let r_rsn: Vec<f64> =
                resamples.iter().zip(&c).map(|(r, c)| reasoner_reward(*c, r.format_score, &cfg.weights)).collect();
            if learn_reasoner {
                let adv = group_advantages(&r_rsn, cfg.epsilon)?;
                let batch =
                    ReasonerBatch { question: q, series, final_segments: &full, resamples: &resamples, advantages: &adv };
                let reference: &dyn Policy = &self.reference;
                reasoner_objective_grad(policy, Some(reference), &batch, rsn_temp, cfg.beta, scale, &mut grad)?;
            }
            let reliability = c.iter().sum::<f64>() / c.len() as f64;
            return Ok(QuestionOutcome {
                grad,
                r_ctl: Vec::new(),
                r_rsn,
                reliability: vec![reliability],
                coverage: vec![1.0],
                violations: 0,
                rounds: vec![0],
            });
        }

        let group = run_group(
            policy,
            reasoner,
            q,
            series,
            cfg.group_size,
            cfg.resamples,
            &cfg.rollout,
            cfg.seed,
            &[STREAM_GROUP, key[0], key[1]],
        )?;
        let mut r_ctl = Vec::with_capacity(group.members.len());
        let mut violations = 0;
        for m in &group.members {
            let steps: Vec<_> = m.trajectory.controller_steps().cloned().collect();
            let f_ctl = score_controller_trajectory(&steps)?;
            if f_ctl < 0.0 {
                violations += 1;
            }
            let d = if ab.no_reliability { m.final_correct } else { m.r_mu };
            r_ctl.push(controller_reward(f_ctl, d, &cfg.weights));
        }
        let adv_ctl = group_advantages(&r_ctl, cfg.epsilon)?;
        let trajectories: Vec<_> = group.members.iter().map(|m| &m.trajectory).collect();
        controller_objective_grad(
            policy,
            q,
            series,
            &trajectories,
            &adv_ctl,
            ctl_temp,
            ab.myopic_controller,
            scale,
            &mut grad,
        )?;

        let mut pick_rng = stream(cfg.seed, &[STREAM_PICK, key[0], key[1]]);
        let g_star = if ab.uniform_group_sampling {
            uniform_pick(group.members.len(), &mut pick_rng)?
        } else {
            variance_guided_pick(&group.variances(), &mut pick_rng)?
        };
        let chosen = &group.members[g_star];
        let r_rsn: Vec<f64> = chosen
            .resamples
            .iter()
            .zip(&chosen.correctness)
            .map(|(r, c)| reasoner_reward(*c, r.format_score, &cfg.weights))
            .collect();
        if learn_reasoner {
            let adv = group_advantages(&r_rsn, cfg.epsilon)?;
            let batch = ReasonerBatch {
                question: q,
                series,
                final_segments: chosen.trajectory.final_segments.as_slice(),
                resamples: &chosen.resamples,
                advantages: &adv,
            };
            let reference: &dyn Policy = &self.reference;
            reasoner_objective_grad(policy, Some(reference), &batch, rsn_temp, cfg.beta, scale, &mut grad)?;
        }
        let coverage = group
            .members
            .iter()
            .map(|m| coverage_fraction(m.trajectory.final_segments.as_slice(), series.len()))
            .collect::<Result<Vec<f64>>>()?;
        Ok(QuestionOutcome {
            grad,
            r_ctl,
            r_rsn,
            reliability: group.members.iter().map(|m| m.r_mu).collect(),
            coverage,
            violations,
            rounds: group.members.iter().map(|m| m.trajectory.len()).collect(),
        })
    }

    /// One joint update. Rollouts run under the configured execution mode;
    /// gradients are summed in batch order.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let indices = self.batch_indices(self.step);
        let outcomes: Vec<Result<QuestionOutcome>> = {
            let this = &*self;
            this.cfg.execution.map(indices.len(), |b| this.question_outcome(b, &this.tasks[indices[b]]))
        };
        let mut grad = vec![0.0; self.policy.num_params()];
        let (mut r_ctl, mut r_rsn, mut rel, mut cov, mut rounds) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut violations = 0;
        for o in outcomes {
            let o = o?;
            for (a, g) in grad.iter_mut().zip(&o.grad) {
                *a += g;
            }
            r_ctl.extend(o.r_ctl);
            r_rsn.extend(o.r_rsn);
            rel.extend(o.reliability);
            cov.extend(o.coverage);
            rounds.extend(o.rounds);
            violations += o.violations;
        }
        let trainable = self.trainable_mask();
        if self.cfg.learning_rate > 0.0 {
            let lr = self.cfg.learning_rate;
            self.optimizer.apply(&self.cfg.optimizer, lr, self.policy.params_mut(), &grad, &trainable);
        }
        self.step += 1;

        let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        let eval = if self.eval_due() { Some(self.evaluate()?) } else { None };
        let n_traj = cov.len().max(1) as f64;
        let metrics = MetricsRecord {
            step: self.step,
            ablation: self.cfg.ablations.label(),
            mean_r_ctl: (!r_ctl.is_empty()).then(|| mean(&r_ctl)),
            mean_r_rsn: mean(&r_rsn),
            reliability: mean(&rel),
            coverage: mean(&cov),
            violation_rate: violations as f64 / n_traj,
            mean_rounds: mean(&rounds.iter().map(|&r| r as f64).collect::<Vec<_>>()),
            grad_norm: grad.iter().zip(&trainable).filter(|(_, t)| **t).map(|(g, _)| g * g).sum::<f64>().sqrt(),
            eval_accuracy: eval.as_ref().map(|e| e.accuracy),
        };
        Ok(StepOutcome { metrics, eval })
    }

    fn eval_due(&self) -> bool {
        let every = self.cfg.eval_every;
        !self.eval_tasks.is_empty() && every > 0 && self.step.is_multiple_of(every)
    }

    pub fn eval_config(&self) -> EvalConfig {
        let reasoner = match self.cfg.reasoner {
            ReasonerMode::Learned => ReasonerChoice::Policy,
            ReasonerMode::Oracle(params) => ReasonerChoice::Oracle(params),
        };
        let controller = if self.cfg.ablations.reasoner_only { ControllerMode::FullSeries } else { ControllerMode::Policy };
        EvalConfig {
            controller,
            reasoner,
            rollout: self.cfg.rollout,
            decoding: self.cfg.eval_decoding,
            seed: stream_seed(self.cfg.seed, STREAM_EVAL),
            execution: self.cfg.execution,
        }
    }

    /// Evaluates the current policy on the held-out tasks.
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.policy, &self.eval_tasks, &self.eval_config())
    }
}

fn stream_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    stream(seed, &[tag]).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        assert_eq!(Ablations::parse("none").unwrap().label(), "full");
        let a = Ablations::parse("myopic_controller").unwrap();
        assert!(a.myopic_controller);
        assert_eq!(a.label(), "myopic_controller");
        let b = Ablations::parse("no_reliability+uniform_group_sampling").unwrap();
        assert_eq!(Ablations::parse(&b.label()).unwrap(), b);
        assert!(Ablations::parse("bogus").is_err());
        assert!(Ablations::parse("reasoner_only,controller_only").is_err());
    }

    #[test]
    fn adamw_moves_toward_gradient() {
        let mut st = OptimizerState::default();
        let mut p = vec![0.0, 0.0];
        st.apply(&OptimizerKind::ADAMW, 0.1, &mut p, &[1.0, -2.0], &[true, false]);
        assert!((p[0] - 0.1).abs() < 1e-6);
        assert_eq!(p[1], 0.0);
    }
}
