//! Synthetic planted-pattern question answering with a coverage-gated oracle
//! reasoner.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyState, ReasonerView, Sample, SamplingConfig};
use crate::protocol::{render_controller_accept, render_reasoner};
use crate::rng::{stream, Rng};
use crate::types::{merge_segments, Decision, Question, QuestionTag, Segment, TimeSeries, Token};

pub const CORPUS_FORMAT: &str = "segrl-corpus";
pub const CORPUS_VERSION: u32 = 1;

const SHORT_WIDTH: (usize, usize) = (6, 10);
const WIDE_WIDTH: (usize, usize) = (20, 28);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PatternKind {
    Spike,
    Dip,
    LevelShift,
    None,
}

impl PatternKind {
    fn width_range(self) -> (usize, usize) {
        match self {
            PatternKind::LevelShift => WIDE_WIDTH,
            _ => SHORT_WIDTH,
        }
    }

    fn sign(self) -> f64 {
        match self {
            PatternKind::Dip => -1.0,
            _ => 1.0,
        }
    }
}

/// Which question a task asks.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// One interval; options name the equal-width region holding it.
    Locate,
    /// One interval or none; options A spike, B dip, C level shift, D none.
    PatternKind,
    /// Two separated spike/dip intervals; options A ++, B +-, C -+, D --.
    EventSequence,
}

impl TaskFamily {
    pub fn tag(self) -> QuestionTag {
        match self {
            TaskFamily::Locate => QuestionTag::Locate,
            TaskFamily::PatternKind => QuestionTag::PatternKind,
            TaskFamily::EventSequence => QuestionTag::EventSequence,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub series_len: usize,
    pub options: usize,
    pub family: TaskFamily,
    /// Patterns drawn uniformly for `Locate` tasks.
    pub patterns: Vec<PatternKind>,
    pub noise: f64,
    pub amplitude: f64,
    /// Minimum number of steps between the two intervals of a two-interval task.
    pub min_gap: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            series_len: 128,
            options: 4,
            family: TaskFamily::Locate,
            patterns: vec![PatternKind::Spike],
            noise: 1.0,
            amplitude: 6.0,
            min_gap: 32,
        }
    }
}

impl EnvConfig {
    pub fn two_interval() -> Self {
        EnvConfig { family: TaskFamily::EventSequence, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        if self.series_len < 32 {
            return bad(format!("series_len {} below 32", self.series_len));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0 && self.amplitude.is_finite() && self.amplitude > 0.0) {
            return bad("noise must be >= 0 and amplitude > 0".into());
        }
        match self.family {
            TaskFamily::Locate => {
                if !(2..=26).contains(&self.options) {
                    return bad(format!("options {} outside 2..=26", self.options));
                }
                if self.patterns.is_empty() || self.patterns.contains(&PatternKind::None) {
                    return bad("locate tasks need a non-empty pattern list without NONE".into());
                }
                let widest = self.patterns.iter().map(|p| p.width_range().1).max().unwrap_or(0);
                if self.series_len / self.options < widest {
                    return bad(format!(
                        "regions of {} steps cannot hold a {widest}-step pattern",
                        self.series_len / self.options
                    ));
                }
            }
            TaskFamily::PatternKind | TaskFamily::EventSequence => {
                if self.options != 4 {
                    return bad(format!("{:?} tasks have exactly 4 options", self.family));
                }
                if self.family == TaskFamily::EventSequence
                    && self.series_len < 2 * SHORT_WIDTH.1 + self.min_gap
                {
                    return bad("series too short for two separated intervals".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTask {
    pub id: String,
    pub series: TimeSeries,
    pub question: Question,
    pub intervals: Vec<Segment>,
    pub patterns: Vec<PatternKind>,
    pub noise: f64,
}

fn width(range: (usize, usize), rng: &mut Rng) -> usize {
    rng.random_range(range.0..=range.1)
}

/// Task `index` of the stream identified by `seed`.
pub fn generate(cfg: &EnvConfig, seed: u64, index: u64) -> Result<PlantedTask> {
    cfg.validate()?;
    let mut rng = stream(seed, &[0x7A5C, index]);
    let h = cfg.series_len;
    let k = cfg.options;
    let (gold, intervals, patterns, prompt) = match cfg.family {
        TaskFamily::Locate => {
            let pattern = cfg.patterns[rng.random_range(0..cfg.patterns.len())];
            let region = rng.random_range(0..k);
            let (lo, hi) = (region * h / k, (region + 1) * h / k);
            let w = width(pattern.width_range(), &mut rng);
            let start = rng.random_range(lo..=hi - w);
            let prompt = format!("In which of {k} equal parts of the series does the anomaly occur?");
            (region, vec![Segment { start, end: start + w }], vec![pattern], prompt)
        }
        TaskFamily::PatternKind => {
            let gold = rng.random_range(0..4);
            let pattern = [PatternKind::Spike, PatternKind::Dip, PatternKind::LevelShift, PatternKind::None][gold];
            let prompt = "Which pattern does the series contain? A spike, B dip, C level shift, D none.".to_string();
            if pattern == PatternKind::None {
                (gold, Vec::new(), Vec::new(), prompt)
            } else {
                let w = width(pattern.width_range(), &mut rng);
                let start = rng.random_range(0..=h - w);
                (gold, vec![Segment { start, end: start + w }], vec![pattern], prompt)
            }
        }
        TaskFamily::EventSequence => {
            let gold = rng.random_range(0..4);
            let first = if gold < 2 { PatternKind::Spike } else { PatternKind::Dip };
            let second = if gold % 2 == 0 { PatternKind::Spike } else { PatternKind::Dip };
            let w1 = width(SHORT_WIDTH, &mut rng);
            let w2 = width(SHORT_WIDTH, &mut rng);
            let s1 = rng.random_range(0..=h - w1 - cfg.min_gap - w2);
            let s2 = rng.random_range(s1 + w1 + cfg.min_gap..=h - w2);
            let prompt =
                "Give the directions of the two events in time order: A up-up, B up-down, C down-up, D down-down."
                    .to_string();
            (
                gold,
                vec![Segment { start: s1, end: s1 + w1 }, Segment { start: s2, end: s2 + w2 }],
                vec![first, second],
                prompt,
            )
        }
    };
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::usage(e.to_string()))?;
    let mut values: Vec<f64> = (0..h).map(|_| noise.sample(&mut rng)).collect();
    for (iv, p) in intervals.iter().zip(&patterns) {
        for v in &mut values[iv.start..iv.end] {
            *v += p.sign() * cfg.amplitude;
        }
    }
    let id = format!("s{seed}-{index:05}");
    let options = Question::letter_options(k);
    let question = Question::new(id.clone(), prompt, options.clone(), options[gold], cfg.family.tag())?;
    Ok(PlantedTask {
        series: TimeSeries::new(id.clone(), values)?,
        id,
        question,
        intervals,
        patterns,
        noise: cfg.noise,
    })
}

pub fn generate_many(cfg: &EnvConfig, seed: u64, count: usize) -> Result<Vec<PlantedTask>> {
    (0..count as u64).map(|i| generate(cfg, seed, i)).collect()
}

// ---------------------------------------------------------------------------
// Oracle reasoner
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    /// Fraction of every planted interval that must be covered.
    pub theta: f64,
    /// Accuracy when covered.
    pub p_hi: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams { theta: 0.8, p_hi: 0.95 }
    }
}

/// Whether `segments` cover at least `theta` of every interval. Vacuously
/// true without intervals.
pub fn covers(theta: f64, intervals: &[Segment], segments: &[Segment]) -> bool {
    let cover = merge_segments(segments);
    intervals.iter().all(|iv| {
        let hit: usize = cover.iter().map(|c| c.overlap(iv)).sum();
        hit as f64 >= theta * iv.len() as f64
    })
}

/// Answer distribution over the option indices.
pub fn oracle_distribution(params: &OracleParams, k: usize, gold: usize, covered: bool) -> Vec<f64> {
    if !covered || k < 2 {
        return vec![1.0 / k as f64; k];
    }
    let rest = (1.0 - params.p_hi) / (k - 1) as f64;
    (0..k).map(|i| if i == gold { params.p_hi } else { rest }).collect()
}

/// Exact probability that the oracle answers `task` correctly given `segments`.
pub fn expected_correctness(params: &OracleParams, task: &PlantedTask, segments: &[Segment]) -> f64 {
    let k = task.question.options.len();
    if covers(params.theta, &task.intervals, segments) {
        params.p_hi
    } else {
        1.0 / k as f64
    }
}

fn draw(dist: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

pub fn oracle_answer(params: &OracleParams, task: &PlantedTask, segments: &[Segment], rng: &mut Rng) -> char {
    let q = &task.question;
    let gold = q.option_index(q.gold).expect("validated question");
    let dist = oracle_distribution(params, q.options.len(), gold, covers(params.theta, &task.intervals, segments));
    q.options[draw(&dist, rng)]
}

#[derive(Clone, Debug)]
struct OracleEntry {
    intervals: Vec<Segment>,
    gold: usize,
}

/// The oracle as a reasoner policy over a fixed task set.
#[derive(Clone, Debug)]
pub struct OracleReasoner {
    params: OracleParams,
    key: Arc<HashMap<String, OracleEntry>>,
}

impl OracleReasoner {
    pub fn new<'a>(params: OracleParams, tasks: impl IntoIterator<Item = &'a PlantedTask>) -> Self {
        let key = tasks
            .into_iter()
            .map(|t| {
                let gold = t.question.option_index(t.question.gold).expect("validated question");
                (t.question.id.clone(), OracleEntry { intervals: t.intervals.clone(), gold })
            })
            .collect();
        OracleReasoner { params, key: Arc::new(key) }
    }

    fn distribution(&self, view: &ReasonerView<'_>) -> Vec<f64> {
        let k = view.question.options.len();
        match self.key.get(view.question.id) {
            Some(entry) => {
                let segs: Vec<Segment> = view.segments.iter().map(|s| s.segment).collect();
                oracle_distribution(&self.params, k, entry.gold, covers(self.params.theta, &entry.intervals, &segs))
            }
            None => vec![1.0 / k as f64; k],
        }
    }
}

impl Policy for OracleReasoner {
    fn sample(&self, state: &PolicyState<'_>, _sampling: &SamplingConfig, rng: &mut Rng) -> Sample {
        match state {
            PolicyState::Reasoner(view) => {
                let dist = self.distribution(view);
                let k = draw(&dist, rng);
                let label = view.question.options[k].to_string();
                Sample {
                    message: render_reasoner("oracle", &label),
                    tokens: vec![Token::Answer(k)],
                    log_probs: vec![dist[k].ln()],
                }
            }
            PolicyState::Controller(_) => Sample {
                message: render_controller_accept("oracle reasoner cannot select"),
                tokens: vec![Token::Decision(Decision::Accept)],
                log_probs: vec![0.0],
            },
        }
    }

    fn log_prob(&self, state: &PolicyState<'_>, tokens: &[Token], _temperature: f64) -> Vec<f64> {
        match state {
            PolicyState::Reasoner(view) => {
                let dist = self.distribution(view);
                tokens
                    .iter()
                    .map(|t| match t {
                        Token::Answer(k) if *k < dist.len() => dist[*k].ln(),
                        _ => f64::NEG_INFINITY,
                    })
                    .collect()
            }
            PolicyState::Controller(_) => vec![0.0; tokens.len()],
        }
    }

    fn snapshot(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub config: EnvConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub tasks: Vec<PlantedTask>,
}

impl Corpus {
    pub fn generate(cfg: &EnvConfig, seed: u64, count: usize) -> Result<Self> {
        let tasks = generate_many(cfg, seed, count)?;
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            seed,
            count,
            config: cfg.clone(),
        };
        Ok(Corpus { header, tasks })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for t in &self.tasks {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::usage("empty corpus file"))??;
        let header: CorpusHeader = serde_json::from_str(&first)?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(Error::usage(format!(
                "unsupported corpus {} v{}",
                header.format, header.version
            )));
        }
        let mut tasks = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let task: PlantedTask = serde_json::from_str(&line)?;
            task.question.validate()?;
            tasks.push(task);
        }
        if tasks.len() != header.count {
            return Err(Error::usage(format!(
                "corpus header declares {} tasks, found {}",
                header.count,
                tasks.len()
            )));
        }
        Ok(Corpus { header, tasks })
    }

    pub fn find(&self, id: &str) -> Option<&PlantedTask> {
        self.tasks.iter().find(|t| t.id == id)
    }
}
