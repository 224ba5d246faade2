//! Subcommand bodies. Each takes the fully resolved configuration.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use segrl_core::eval::{evaluate, EvalConfig, EvalReport, ReasonerChoice};
use segrl_core::io::{truncate_metrics, Checkpoint, MetricsWriter, CHECKPOINT_VERSION};
use segrl_core::optimize::Trainer;
use segrl_core::policy::{Policy, ToyGridPolicy, ToyLayout};
use segrl_core::protocol::{controller_fault, parse_sft_trace, score_controller_trajectory, serialize_sft_trace};
use segrl_core::rewards::{controller_reward, correctness, population_variance, reasoner_reward, reliability, RewardBundle};
use segrl_core::rng::stream;
use segrl_core::rollout::{resample_final_reasoner, run_trajectory, RolloutConfig};
use segrl_core::synthenv::{Corpus, OracleReasoner};
use segrl_core::types::{InteractionTrajectory, ReasonerStep};
use segrl_core::Execution;
use serde_json::json;

use crate::config::{FileConfig, ReasonerKind};
use crate::{EvalArgs, Failure, TraceArgs, TrainArgs};

macro_rules! say {
    ($quiet:expr, $($arg:tt)*) => {
        if !$quiet {
            println!($($arg)*);
        }
    };
}

fn execution(cfg: &FileConfig) -> Execution {
    if cfg.workers == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn read_corpus(path: &Path) -> Result<Corpus, Failure> {
    let file = File::open(path).map_err(|e| Failure::config(format!("cannot open corpus {}: {e}", path.display())))?;
    Corpus::read_from(BufReader::new(file))
        .map_err(|e| Failure::config(format!("invalid corpus {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(Failure::config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn make_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::config(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Policy and rollout settings for evaluation; untrained when no checkpoint.
fn policy_for(checkpoint: Option<&PathBuf>, corpus: &Corpus, cfg: &FileConfig) -> Result<(ToyGridPolicy, RolloutConfig), Failure> {
    let options = corpus.header.config.options;
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.layout.options < options {
                return Err(Failure {
                    code: 4,
                    message: format!(
                        "checkpoint supports {} options; corpus needs {options}",
                        ck.layout.options
                    ),
                });
            }
            Ok((ck.policy()?, ck.config.rollout))
        }
        None => Ok((ToyGridPolicy::uniform(ToyLayout::new(options)), cfg.train.rollout)),
    }
}

fn reasoner_choice(cfg: &FileConfig) -> ReasonerChoice {
    match cfg.eval.reasoner {
        ReasonerKind::Policy => ReasonerChoice::Policy,
        ReasonerKind::Oracle => ReasonerChoice::Oracle(cfg.eval.oracle),
    }
}

pub fn gen(cfg: &FileConfig, out: &Path, quiet: bool) -> Result<(), Failure> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Failure::config(format!("directory {} does not exist", parent.display())));
        }
    }
    let corpus = Corpus::generate(&cfg.env, cfg.gen.seed, cfg.gen.count)?;
    let file = File::create(out).map_err(|e| Failure::config(format!("cannot create {}: {e}", out.display())))?;
    corpus.write_to(BufWriter::new(file))?;
    say!(quiet, "wrote {} tasks to {}", corpus.tasks.len(), out.display());
    Ok(())
}

fn checkpoint_of(trainer: &Trainer, cfg: &FileConfig) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        step: trainer.step_index(),
        layout: *trainer.layout(),
        params: trainer.policy().params().to_vec(),
        reference: trainer.reference().params().to_vec(),
        optimizer: trainer.optimizer().clone(),
        config: cfg.train.clone(),
    }
}

pub fn train(cfg: &FileConfig, args: &TrainArgs, quiet: bool) -> Result<(), Failure> {
    let corpus = read_corpus(&args.corpus)?;
    let eval_tasks = match &args.eval_corpus {
        Some(p) => read_corpus(p)?.tasks,
        None => Vec::new(),
    };
    let layout = ToyLayout::new(corpus.header.config.options);
    let mut train_cfg = cfg.train.clone();
    train_cfg.execution = execution(cfg);
    let metrics_path = args.out.join("metrics.jsonl");

    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.check_compatible(&train_cfg)?;
            if ck.layout != layout {
                return Err(Failure { code: 4, message: "checkpoint layout does not match the corpus".into() });
            }
            make_dir(&args.out)?;
            truncate_metrics(&metrics_path, ck.step)?;
            Trainer::resume(
                train_cfg,
                ck.policy()?,
                ck.reference_policy()?,
                ck.optimizer.clone(),
                ck.step,
                corpus.tasks,
                eval_tasks,
            )?
        }
        None => {
            make_dir(&args.out)?;
            if metrics_path.exists() {
                fs::remove_file(&metrics_path)?;
            }
            Trainer::new(train_cfg, ToyGridPolicy::uniform(layout), corpus.tasks, eval_tasks)?
        }
    };
    fs::write(args.out.join("config.toml"), cfg.to_toml())?;

    let stop = args.stop_after.map_or(cfg.train.steps, |s| s.min(cfg.train.steps));
    let every = cfg.train.checkpoint_every;
    let mut metrics = MetricsWriter::append(&metrics_path)?;
    while trainer.step_index() < stop {
        let outcome = trainer.step()?;
        metrics.write(&outcome.metrics)?;
        let step = trainer.step_index();
        if every > 0 && step % every == 0 {
            checkpoint_of(&trainer, cfg).save(&args.out.join(format!("step-{step:06}.ckpt")))?;
        }
        if let Some(acc) = outcome.metrics.eval_accuracy.filter(|_| !quiet) {
            eprintln!("step {step}: eval accuracy {acc:.3}");
        }
    }
    let step = trainer.step_index();
    if step < cfg.train.steps {
        let path = args.out.join(format!("step-{step:06}.ckpt"));
        checkpoint_of(&trainer, cfg).save(&path)?;
        say!(quiet, "stopped at step {step}; resume from {}", path.display());
        return Ok(());
    }
    checkpoint_of(&trainer, cfg).save(&args.out.join("final.ckpt"))?;
    let report = args.eval_corpus.as_ref().map(|_| trainer.evaluate()).transpose()?;
    write_json(
        &args.out.join("summary.json"),
        &json!({
            "steps": step,
            "ablation": cfg.train.ablations.label(),
            "final_eval": report,
            "config": cfg,
        }),
    )?;
    match report {
        Some(r) => say!(quiet, "trained {step} steps; held-out accuracy {:.4} over {} tasks", r.accuracy, r.n),
        None => say!(quiet, "trained {step} steps"),
    }
    Ok(())
}

fn describe(report: &EvalReport) -> String {
    let mut s = format!("accuracy {:.4} over {} tasks", report.accuracy, report.n);
    if let Some(b) = report.modal_bin() {
        let bin = &report.usage[b];
        let _ = write!(s, "; modal usage bin [{:.1}, {:.1}) with {:.1}%", bin.lo, bin.hi, bin.percent);
    }
    s
}

pub fn eval(cfg: &FileConfig, args: &EvalArgs, quiet: bool) -> Result<(), Failure> {
    let corpus = read_corpus(&args.corpus)?;
    let (policy, rollout) = policy_for(args.checkpoint.as_ref(), &corpus, cfg)?;
    let ecfg = EvalConfig {
        controller: cfg.eval.controller,
        reasoner: reasoner_choice(cfg),
        rollout,
        decoding: cfg.eval.decoding,
        seed: cfg.eval.seed,
        execution: execution(cfg),
    };
    let report = evaluate(&policy, &corpus.tasks, &ecfg)?;
    make_dir(&args.out)?;
    write_json(
        &args.out.join("summary.json"),
        &json!({
            "corpus": args.corpus,
            "checkpoint": args.checkpoint,
            "eval": ecfg,
            "report": report,
            "config": cfg,
        }),
    )?;
    let mut w = BufWriter::new(File::create(args.out.join("results.jsonl"))?);
    for r in &report.results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    say!(quiet, "{}", describe(&report));
    Ok(())
}

/// Reward decomposition of one trajectory and its final-round resamples.
pub fn reward_bundle(
    question: &segrl_core::types::Question,
    trajectory: &InteractionTrajectory,
    resamples: &[ReasonerStep],
    cfg: &FileConfig,
) -> Result<RewardBundle, Failure> {
    let w = &cfg.train.weights;
    let hits: Vec<f64> = resamples.iter().map(|r| correctness(question, &r.answer)).collect();
    let d = reliability(&hits)?;
    let steps: Vec<_> = trajectory.controller_steps().cloned().collect();
    let f_ctl = score_controller_trajectory(&steps)?;
    let f_rsn: Vec<f64> = resamples.iter().map(|r| r.format_score).collect();
    let r_rsn = hits.iter().zip(&f_rsn).map(|(c, f)| reasoner_reward(*c, *f, w)).collect();
    Ok(RewardBundle {
        c: correctness(question, &trajectory.final_answer),
        d,
        f_ctl,
        r_ctl: controller_reward(f_ctl, d, w),
        f_rsn,
        r_rsn,
        r_mu: d,
        r_sigma: population_variance(&hits),
    })
}

fn dump(trajectory: &InteractionTrajectory, rewards: &RewardBundle, lints: &[String], id: &str) -> String {
    let steps: Vec<_> = trajectory.controller_steps().cloned().collect();
    let fault = controller_fault(&steps);
    let mut s = String::new();
    let _ = writeln!(s, "task {id}");
    let _ = writeln!(s, "terminated by {:?} after {} rounds", trajectory.terminated_by, trajectory.len());
    for (i, round) in trajectory.rounds.iter().enumerate() {
        let c = &round.controller;
        let _ = writeln!(s, "\nround {}", i + 1);
        let _ = writeln!(s, "  controller think: {}", c.think);
        let decision = c.decision.map_or("none".to_string(), |d| format!("{d:?}").to_uppercase());
        let _ = writeln!(s, "  decision: {decision}");
        if let Some(seg) = c.proposed_segment {
            let (a, b) = seg.to_inclusive();
            let _ = writeln!(s, "  segment: [{a}, {b}]");
        }
        let _ = writeln!(s, "  format score: {:.6}", c.format_score);
        if !c.violations.is_empty() {
            let names: Vec<String> = c.violations.iter().map(ToString::to_string).collect();
            let _ = writeln!(s, "  violations: {}", names.join(", "));
        }
        if let Some((at, kind)) = fault {
            if at == i {
                let _ = writeln!(s, "  VIOLATION ({}): {kind:?}", if c.violation { "critical" } else { "structural" });
            }
        }
        if let Some(r) = &round.reasoner {
            let _ = writeln!(s, "  reasoner think: {}", r.think);
            let _ = writeln!(s, "  answer: {}", if r.answer.is_empty() { "<none>" } else { &r.answer });
            let _ = writeln!(s, "  reasoner format score: {:.6}", r.format_score);
        }
    }
    let _ = writeln!(s, "\nfinal answer: {}", trajectory.final_answer);
    let _ = writeln!(s, "\nrewards");
    let _ = writeln!(s, "  C = {:.6}", rewards.c);
    let _ = writeln!(s, "  D = {:.6}", rewards.d);
    let _ = writeln!(s, "  F_ctl = {:.6}", rewards.f_ctl);
    let _ = writeln!(s, "  R_ctl = {:.6}", rewards.r_ctl);
    let _ = writeln!(s, "  r_sigma = {:.6}", rewards.r_sigma);
    for (j, (f, r)) in rewards.f_rsn.iter().zip(&rewards.r_rsn).enumerate() {
        let _ = writeln!(s, "  resample {j}: F_rsn = {f:.6} R_rsn = {r:.6}");
    }
    let _ = writeln!(s, "\ntrace lints");
    if lints.is_empty() {
        let _ = writeln!(s, "  none");
    }
    for l in lints {
        let _ = writeln!(s, "  {l}");
    }
    s
}

pub fn trace(cfg: &FileConfig, args: &TraceArgs, quiet: bool) -> Result<(), Failure> {
    let corpus = read_corpus(&args.corpus)?;
    let index = corpus.tasks.iter().position(|t| t.id == args.task).ok_or_else(|| Failure::unknown_task(&args.task))?;
    let task = &corpus.tasks[index];
    let (policy, rollout) = policy_for(args.checkpoint.as_ref(), &corpus, cfg)?;
    let corruption = args.corruption.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&corruption) {
        return Err(Failure::config("corruption must lie in [0, 1]"));
    }
    let controller = policy.clone().with_corruption(corruption);
    let oracle;
    let reasoner: &dyn Policy = match cfg.eval.reasoner {
        ReasonerKind::Policy => &policy,
        ReasonerKind::Oracle => {
            oracle = OracleReasoner::new(cfg.eval.oracle, [task]);
            &oracle
        }
    };

    let mut rng = stream(cfg.eval.seed, &[index as u64]);
    let q = &task.question;
    let trajectory = run_trajectory(&controller, reasoner, q, &task.series, &rollout, &mut rng)?;
    let resamples = resample_final_reasoner(
        reasoner,
        q,
        &task.series,
        trajectory.final_segments.as_slice(),
        cfg.train.resamples,
        &rollout.reasoner_sampling,
        &mut rng,
    )?;
    let rewards = reward_bundle(q, &trajectory, &resamples, cfg)?;
    let sft = serialize_sft_trace(&trajectory);
    let lints: Vec<String> = match parse_sft_trace(&sft, Some(task.series.len())) {
        Ok(t) => t.lints.iter().map(ToString::to_string).collect(),
        Err(e) => vec![format!("unparseable: {e}")],
    };

    make_dir(&args.out)?;
    fs::write(args.out.join("dump.txt"), dump(&trajectory, &rewards, &lints, &task.id))?;
    fs::write(args.out.join("trace.txt"), &sft)?;
    write_json(
        &args.out.join("trajectory.json"),
        &json!({ "task": task.id, "trajectory": trajectory, "resamples": resamples, "rewards": rewards }),
    )?;
    fs::write(args.out.join("config.toml"), cfg.to_toml())?;
    say!(quiet, 
        "task {}: {} rounds, answer {:?}, R_ctl {:.6}, {} trace lints",
        task.id,
        trajectory.len(),
        trajectory.final_answer,
        rewards.r_ctl,
        lints.len()
    );
    Ok(())
}
