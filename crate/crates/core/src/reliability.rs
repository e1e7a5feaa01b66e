//! Reliability scores, update rules, response judging and table validation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::NodeId;

/// A reliability estimate in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct Score(f64);

impl Score {
    pub const RELIABLE: Score = Score(1.0);
    pub const UNRELIABLE: Score = Score(0.0);

    /// `None` unless `0 <= v <= 1`.
    pub fn new(v: f64) -> Option<Score> {
        (0.0..=1.0).contains(&v).then_some(Score(v))
    }

    /// Clamps into range. NaN maps to 0.
    pub fn saturating(v: f64) -> Score {
        if v.is_nan() {
            Score(0.0)
        } else {
            Score(v.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Score::new(v).ok_or_else(|| serde::de::Error::custom(format!("score {v} outside [0, 1]")))
    }
}

/// One score per ring member, indexed by [`NodeId`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReliabilityTable {
    scores: Vec<Score>,
}

impl ReliabilityTable {
    /// Everyone starts fully reliable.
    pub fn new(n: usize) -> Self {
        ReliabilityTable {
            scores: vec![Score::RELIABLE; n],
        }
    }

    pub fn from_scores(scores: Vec<Score>) -> Self {
        ReliabilityTable { scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, node: NodeId) -> Score {
        self.scores[node.index()]
    }

    pub fn set(&mut self, node: NodeId, s: Score) {
        self.scores[node.index()] = s;
    }

    pub fn iter(&self) -> impl Iterator<Item = Score> + '_ {
        self.scores.iter().copied()
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.0).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormulaVariant {
    /// `min(1, s + d^(1/(1 - s/1.5)))` and `max(0, s - d^(1/(s/1.5)))`.
    #[default]
    ExponentialV1,
    /// `min(1, s + d^((1/(1-s))/1.5))` and `max(0, s - d^((1/s)/1.5))`.
    ExponentialV2,
    /// Fixed step of `delta` in either direction.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdatePolicy {
    pub delta: f64,
    pub threshold: f64,
    pub formula_variant: FormulaVariant,
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        UpdatePolicy {
            delta: 0.2,
            threshold: 0.30,
            formula_variant: FormulaVariant::ExponentialV1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("delta must lie strictly between 0 and 1, got {0}")]
    Delta(f64),
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    Threshold(f64),
}

impl UpdatePolicy {
    pub fn with_variant(formula_variant: FormulaVariant) -> Self {
        UpdatePolicy {
            formula_variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(PolicyError::Delta(self.delta));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(PolicyError::Threshold(self.threshold));
        }
        Ok(())
    }

    /// Amount added on agreement, before saturation.
    pub fn increase_step(&self, s: f64) -> f64 {
        let d = self.delta;
        match self.formula_variant {
            FormulaVariant::ExponentialV1 => d.powf(1.0 / (1.0 - s / 1.5)),
            FormulaVariant::ExponentialV2 => {
                if s >= 1.0 {
                    0.0
                } else {
                    d.powf((1.0 / (1.0 - s)) / 1.5)
                }
            }
            FormulaVariant::Linear => d,
        }
    }

    /// Amount removed on disagreement or silence, before saturation. Zero at
    /// `s = 0`, the limit of the exponential forms.
    pub fn decrease_step(&self, s: f64) -> f64 {
        let d = self.delta;
        match self.formula_variant {
            FormulaVariant::ExponentialV1 if s > 0.0 => d.powf(1.0 / (s / 1.5)),
            FormulaVariant::ExponentialV2 if s > 0.0 => d.powf((1.0 / s) / 1.5),
            FormulaVariant::ExponentialV1 | FormulaVariant::ExponentialV2 => 0.0,
            FormulaVariant::Linear => d,
        }
    }
}

pub fn increase_score(s: Score, p: &UpdatePolicy) -> Score {
    Score::saturating((s.0 + p.increase_step(s.0)).min(1.0))
}

pub fn decrease_score(s: Score, p: &UpdatePolicy) -> Score {
    Score::saturating((s.0 - p.decrease_step(s.0)).max(0.0))
}

/// Strictly below the threshold.
pub fn is_faulty(s: Score, p: &UpdatePolicy) -> bool {
    s.0 < p.threshold
}

/// A node's contribution to a challenge round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reply {
    Value(f64),
    TimedOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Agree,
    Disagree,
    TimedOut,
    NotParticipating,
}

pub const DEFAULT_MATCH_TOL: f64 = 1e-9;
pub const DEFAULT_EQ_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JudgeError {
    #[error("no usable responses to judge")]
    NoResponses,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Judgement {
    pub reference: f64,
    pub verdicts: BTreeMap<NodeId, Verdict>,
}

impl Judgement {
    /// Dense verdict vector for a ring of `n`; absent nodes do not participate.
    pub fn verdict_vec(&self, n: usize) -> Vec<Verdict> {
        (0..n as u32)
            .map(|i| {
                self.verdicts
                    .get(&NodeId(i))
                    .copied()
                    .unwrap_or(Verdict::NotParticipating)
            })
            .collect()
    }
}

/// Picks the lower median of the finite responses as the reference value.
/// Timeouts get [`Verdict::TimedOut`]; non-finite values always disagree.
pub fn judge_responses<I>(responses: I, match_tol: f64) -> Result<Judgement, JudgeError>
where
    I: IntoIterator<Item = (NodeId, Reply)>,
{
    let responses: BTreeMap<NodeId, Reply> = responses.into_iter().collect();
    let mut values: Vec<f64> = responses
        .values()
        .filter_map(|r| match r {
            Reply::Value(v) if v.is_finite() => Some(*v),
            _ => None,
        })
        .collect();
    if values.is_empty() {
        return Err(JudgeError::NoResponses);
    }
    values.sort_by(f64::total_cmp);
    let reference = values[(values.len() - 1) / 2];
    let bound = match_tol * reference.abs().max(1.0);

    let verdicts = responses
        .into_iter()
        .map(|(node, reply)| {
            let v = match reply {
                Reply::TimedOut => Verdict::TimedOut,
                Reply::Value(x) if x.is_finite() && (x - reference).abs() <= bound => {
                    Verdict::Agree
                }
                Reply::Value(_) => Verdict::Disagree,
            };
            (node, v)
        })
        .collect();
    Ok(Judgement {
        reference,
        verdicts,
    })
}

/// Returns the updated table; the input is untouched.
pub fn apply_round(
    table: &ReliabilityTable,
    verdicts: &[Verdict],
    p: &UpdatePolicy,
) -> ReliabilityTable {
    assert_eq!(table.len(), verdicts.len(), "one verdict per node");
    let scores = table
        .iter()
        .zip(verdicts)
        .map(|(s, v)| match v {
            Verdict::Agree => increase_score(s, p),
            Verdict::Disagree | Verdict::TimedOut => decrease_score(s, p),
            Verdict::NotParticipating => s,
        })
        .collect();
    ReliabilityTable::from_scores(scores)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TransitionCheck {
    Accept,
    Reject { reason: RejectReason },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    LengthMismatch { expected: usize, got: usize },
    IllegalChange { node: NodeId },
}

impl TransitionCheck {
    pub fn is_accept(&self) -> bool {
        matches!(self, TransitionCheck::Accept)
    }
}

/// Every changed entry must equal the deterministic successor of its old
/// value in the direction it moved. Unchanged entries always pass, since a
/// lieutenant cannot tell which nodes sat a round out.
pub fn validate_transition(
    old: &ReliabilityTable,
    new: &ReliabilityTable,
    p: &UpdatePolicy,
    eq_tol: f64,
) -> TransitionCheck {
    if old.len() != new.len() {
        return TransitionCheck::Reject {
            reason: RejectReason::LengthMismatch {
                expected: old.len(),
                got: new.len(),
            },
        };
    }
    for (i, (o, n)) in old.iter().zip(new.iter()).enumerate() {
        let legal = if n.0 > o.0 {
            (n.0 - increase_score(o, p).0).abs() <= eq_tol
        } else if n.0 < o.0 {
            (n.0 - decrease_score(o, p).0).abs() <= eq_tol
        } else {
            true
        };
        if !legal {
            return TransitionCheck::Reject {
                reason: RejectReason::IllegalChange {
                    node: NodeId(i as u32),
                },
            };
        }
    }
    TransitionCheck::Accept
}

/// Number of consecutive decreases from a fully reliable score until the
/// node is faulty, or `None` if it never gets there within `limit` steps.
pub fn steps_to_detection(p: &UpdatePolicy, limit: u64) -> Option<u64> {
    let mut s = Score::RELIABLE;
    for k in 1..=limit {
        s = decrease_score(s, p);
        if is_faulty(s, p) {
            return Some(k);
        }
    }
    None
}
