//! Correctness, reliability and the two role rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{normalize_answer, Question};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_d: f64,
    pub w_f: f64,
    pub w_c: f64,
    pub w_e: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { w_d: 0.9, w_f: 0.1, w_c: 0.9, w_e: 0.1 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_d, self.w_f, self.w_c, self.w_e];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!("reward weights must be nonnegative: {all:?}")));
        }
        Ok(())
    }
}

/// Reward decomposition for one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBundle {
    /// Correctness of the trajectory's own final answer.
    pub c: f64,
    /// Reliability of the final segment list.
    pub d: f64,
    pub f_ctl: f64,
    /// Per-resample reasoner format scores.
    pub f_rsn: Vec<f64>,
    pub r_ctl: f64,
    /// Per-resample reasoner rewards.
    pub r_rsn: Vec<f64>,
    pub r_mu: f64,
    pub r_sigma: f64,
}

/// 1 iff the normalized prediction equals the gold label.
pub fn correctness(question: &Question, predicted: &str) -> f64 {
    let p = normalize_answer(predicted);
    let mut gold = [0u8; 4];
    if !p.is_empty() && p == *question.gold.encode_utf8(&mut gold) {
        1.0
    } else {
        0.0
    }
}

pub fn reliability(indicators: &[f64]) -> Result<f64> {
    if indicators.is_empty() {
        return Err(Error::usage("reliability needs at least one indicator"));
    }
    Ok(indicators.iter().sum::<f64>() / indicators.len() as f64)
}

/// Population variance.
pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn controller_reward(f_ctl: f64, d: f64, weights: &RewardWeights) -> f64 {
    if f_ctl < 0.0 {
        -1.0
    } else {
        weights.w_d * d + weights.w_f * f_ctl
    }
}

pub fn reasoner_reward(c: f64, f_rsn: f64, weights: &RewardWeights) -> f64 {
    weights.w_c * c + weights.w_e * f_rsn
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::QuestionTag;

    fn q(gold: char) -> Question {
        Question::new("q", "p", Question::letter_options(4), gold, QuestionTag::Other).unwrap()
    }

    #[test]
    fn correctness_examples() {
        assert_eq!(correctness(&q('A'), "A"), 1.0);
        assert_eq!(correctness(&q('A'), "B"), 0.0);
        assert_eq!(correctness(&q('A'), " a\nextra"), 1.0);
        assert_eq!(correctness(&q('A'), ""), 0.0);
    }

    #[test]
    fn reliability_examples() {
        assert_eq!(reliability(&[1.0; 6]).unwrap(), 1.0);
        assert_eq!(reliability(&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(reliability(&[]).is_err());
    }

    #[test]
    fn role_reward_examples() {
        let w = RewardWeights::default();
        assert_eq!(controller_reward(-1.0, 0.7, &w), -1.0);
        assert!((controller_reward(1.0, 1.0, &w) - 1.0).abs() < 1e-12);
        assert!((controller_reward(0.5, 0.0, &w) - 0.05).abs() < 1e-12);
        assert!((reasoner_reward(1.0, 1.0, &w) - 1.0).abs() < 1e-12);
        assert!((reasoner_reward(0.0, 1.0, &w) - 0.1).abs() < 1e-12);
        assert!((reasoner_reward(1.0, -1.0, &w) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn variance_is_population() {
        let v = population_variance(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((v - 2.0 / 9.0).abs() < 1e-15);
    }
}
