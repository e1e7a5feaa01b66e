//! JSON scenario files, run outputs and score queries over them.
//!
//! A run directory holds `trace.jsonl`, `metrics.json` and `scores.csv`.
//! The CSV has one `epoch,node,score` row per node per epoch from the
//! honest-majority table, starting with the all-reliable epoch 0. Scores are
//! written with 17 significant digits so they read back bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ProtocolConfig, Time};
use crate::reliability::{FormulaVariant, UpdatePolicy, DEFAULT_EQ_TOL, DEFAULT_MATCH_TOL};
use crate::simnet::{run_scenario, FaultSpec, LinkModel, Metrics, SimError, Trace};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const SCORES_FILE: &str = "scores.csv";

fn default_delta() -> f64 {
    UpdatePolicy::default().delta
}

fn default_threshold() -> f64 {
    UpdatePolicy::default().threshold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub n: u32,
    pub epoch_time: Time,
    pub response_timeout: Time,
    /// Defaults to `epoch_time + response_timeout`.
    #[serde(default)]
    pub head_timeout: Option<Time>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub formula_variant: FormulaVariant,
    #[serde(default)]
    pub run_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub links: LinkModel,
    pub duration_epochs: u64,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, message: impl ToString) -> Self {
        ScenarioError::Invalid {
            field: field.into(),
            message: message.to_string(),
        }
    }

    /// True for problems with the scenario itself rather than the system.
    pub fn is_validation(&self) -> bool {
        match self {
            ScenarioError::Io { source, .. } => source.kind() == io::ErrorKind::NotFound,
            _ => true,
        }
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
            line: e.line(),
            column: e.column(),
            // serde_json appends its own position suffix
            message: e
                .to_string()
                .split(" at line ")
                .next()
                .unwrap_or_default()
                .to_string(),
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        let p = &self.protocol;
        let mut cfg = ProtocolConfig::new(p.n, p.epoch_time, p.response_timeout);
        if let Some(h) = p.head_timeout {
            cfg.head_timeout = h;
        }
        cfg.policy = UpdatePolicy {
            delta: p.delta,
            threshold: p.threshold,
            formula_variant: p.formula_variant,
        };
        cfg.run_seed = p.run_seed;
        cfg.match_tol = DEFAULT_MATCH_TOL;
        cfg.eq_tol = DEFAULT_EQ_TOL;
        cfg
    }

    /// `duration_epochs * epoch_time` plus two head timeouts of slack.
    pub fn duration(&self) -> Time {
        let cfg = self.protocol_config();
        self.duration_epochs * cfg.epoch_time + 2 * cfg.head_timeout
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        use crate::protocol::ConfigError as C;
        use crate::reliability::PolicyError as P;
        if self.duration_epochs == 0 {
            return Err(ScenarioError::invalid(
                "duration_epochs",
                "must be positive",
            ));
        }
        let cfg = self.protocol_config();
        if let Err(e) = cfg.validate() {
            let field = match &e {
                C::RingTooSmall(_) => "protocol.n",
                C::ResponseTimeout => "protocol.response_timeout",
                C::HeadTimeout => "protocol.head_timeout",
                C::Policy(P::Delta(_)) => "protocol.delta",
                C::Policy(P::Threshold(_)) => "protocol.threshold",
            };
            return Err(ScenarioError::invalid(field, e));
        }
        match crate::simnet::Simulation::new(cfg, &self.faults, self.links.clone()) {
            Ok(_) => Ok(()),
            Err(e) => {
                let field = match &e {
                    SimError::Config(_) => "protocol".to_string(),
                    SimError::FaultNode(id)
                    | SimError::DuplicateFault(id)
                    | SimError::InvalidFault { node: id, .. } => {
                        let idx = self.faults.iter().rposition(|f| f.node == *id).unwrap_or(0);
                        format!("faults[{idx}]")
                    }
                    SimError::LinkNode(_) => "links".to_string(),
                    SimError::ZeroLatency => "links.base_latency".to_string(),
                };
                Err(ScenarioError::invalid(field, e))
            }
        }
    }

    pub fn run(&self) -> Result<(Trace, Metrics), ScenarioError> {
        run_scenario(
            self.protocol_config(),
            &self.faults,
            self.links.clone(),
            self.duration(),
        )
        .map_err(|e| ScenarioError::invalid("scenario", e))
    }
}

/// `epoch,node,score` rows from the honest-majority tables.
pub fn scores_csv(trace: &Trace, n: u32) -> String {
    let mut s = String::from("epoch,node,score\n");
    for node in 0..n {
        writeln!(s, "0,{node},{:.16e}", 1.0f64).expect("write to string");
    }
    for snap in &trace.snapshots {
        for (node, v) in snap.majority.iter().enumerate() {
            writeln!(s, "{},{node},{v:.16e}", snap.epoch).expect("write to string");
        }
    }
    s
}

pub fn metrics_json(metrics: &Metrics) -> String {
    let mut s = serde_json::to_string_pretty(metrics).expect("metrics serialize");
    s.push('\n');
    s
}

pub fn write_outputs(dir: &Path, trace: &Trace, metrics: &Metrics, n: u32) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRACE_FILE), trace.to_jsonl())?;
    fs::write(dir.join(METRICS_FILE), metrics_json(metrics))?;
    fs::write(dir.join(SCORES_FILE), scores_csv(trace, n))?;
    Ok(())
}

#[derive(Debug, Error)]
pub enum ScoreQueryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}, line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("node {node} is not in the ring (n = {n})")]
    UnknownNode { node: u32, n: u32 },
    #[error("epoch {0} was not recorded")]
    UnknownEpoch(u64),
}

/// Score history read back from a run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreHistory {
    pub n: u32,
    /// `(epoch, scores)` in file order.
    pub epochs: Vec<(u64, Vec<f64>)>,
}

impl ScoreHistory {
    pub fn parse(csv: &str, path: &Path) -> Result<Self, ScoreQueryError> {
        let bad = |line: usize, message: &str| ScoreQueryError::Malformed {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        };
        let mut epochs: Vec<(u64, Vec<f64>)> = Vec::new();
        let mut lines = csv.lines().enumerate();
        match lines.next() {
            Some((_, "epoch,node,score")) => {}
            _ => return Err(bad(1, "missing epoch,node,score header")),
        }
        for (i, line) in lines {
            let mut cols = line.split(',');
            let (Some(e), Some(node), Some(v), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad(i + 1, "expected three columns"));
            };
            let e: u64 = e.parse().map_err(|_| bad(i + 1, "bad epoch"))?;
            let node: usize = node.parse().map_err(|_| bad(i + 1, "bad node"))?;
            let v: f64 = v.parse().map_err(|_| bad(i + 1, "bad score"))?;
            if epochs.last().map(|l| l.0) != Some(e) {
                epochs.push((e, Vec::new()));
            }
            let row = &mut epochs.last_mut().expect("pushed").1;
            if row.len() != node {
                return Err(bad(i + 1, "nodes out of order"));
            }
            row.push(v);
        }
        let n = epochs.first().map_or(0, |e| e.1.len() as u32);
        if epochs.iter().any(|e| e.1.len() as u32 != n) {
            return Err(bad(0, "epochs have different ring sizes"));
        }
        Ok(ScoreHistory { n, epochs })
    }

    pub fn load(dir: &Path) -> Result<Self, ScoreQueryError> {
        let path = dir.join(SCORES_FILE);
        let text = fs::read_to_string(&path).map_err(|source| ScoreQueryError::Io {
            path: path.clone(),
            source,
        })?;
        Self::parse(&text, &path)
    }

    /// Score of `node` at `epoch`, or at the last recorded epoch.
    pub fn score(&self, node: u32, epoch: Option<u64>) -> Result<f64, ScoreQueryError> {
        if node >= self.n {
            return Err(ScoreQueryError::UnknownNode { node, n: self.n });
        }
        let row = match epoch {
            Some(e) => self
                .epochs
                .iter()
                .find(|r| r.0 == e)
                .ok_or(ScoreQueryError::UnknownEpoch(e))?,
            None => self.epochs.last().ok_or(ScoreQueryError::UnknownEpoch(0))?,
        };
        Ok(row.1[node as usize])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"{
        "protocol": {"n": 4, "epoch_time": 100, "response_timeout": 10, "run_seed": 3},
        "faults": [{"node": 2, "behavior": {"kind": "wrong_response", "perturbation": 0.25}, "rng_seed": 9}],
        "links": {"base_latency": 1},
        "duration_epochs": 8
    }"#;

    #[test]
    fn parses_with_defaults() {
        let s = ScenarioFile::parse(BASIC).unwrap();
        let cfg = s.protocol_config();
        assert_eq!(cfg.head_timeout, 110);
        assert_eq!(cfg.policy, UpdatePolicy::default());
        assert_eq!(s.duration(), 8 * 100 + 220);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = BASIC.replace("\"run_seed\": 3", "\"run_seed\": 3, \"colour\": 1");
        assert!(matches!(
            ScenarioFile::parse(&text),
            Err(ScenarioError::Parse { line: 2, .. })
        ));
        let text = BASIC.replace("\"perturbation\"", "\"amount\"");
        assert!(matches!(
            ScenarioFile::parse(&text),
            Err(ScenarioError::Parse { .. })
        ));
    }

    #[test]
    fn invalid_fields_are_named() {
        let field_of = |text: &str| match ScenarioFile::parse(text) {
            Err(ScenarioError::Invalid { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(
            field_of(&BASIC.replace("\"n\": 4", "\"n\": 1")),
            "protocol.n"
        );
        assert_eq!(
            field_of(&BASIC.replace("\"response_timeout\": 10", "\"response_timeout\": 100")),
            "protocol.response_timeout"
        );
        assert_eq!(
            field_of(&BASIC.replace("\"node\": 2", "\"node\": 4")),
            "faults[0]"
        );
        assert_eq!(
            field_of(&BASIC.replace("\"base_latency\": 1", "\"base_latency\": 0")),
            "links.base_latency"
        );
        assert_eq!(
            field_of(&BASIC.replace("\"duration_epochs\": 8", "\"duration_epochs\": 0")),
            "duration_epochs"
        );
    }

    #[test]
    fn csv_round_trips_scores() {
        let s = ScenarioFile::parse(BASIC).unwrap();
        let (trace, _) = s.run().unwrap();
        let csv = scores_csv(&trace, 4);
        let h = ScoreHistory::parse(&csv, Path::new("scores.csv")).unwrap();
        assert_eq!(h.n, 4);
        assert_eq!(h.epochs.len(), trace.snapshots.len() + 1);
        let last = trace.snapshots.last().unwrap();
        assert_eq!(
            h.score(2, None).unwrap().to_bits(),
            last.majority[2].to_bits()
        );
        assert_eq!(h.score(0, Some(0)).unwrap(), 1.0);
        assert!(matches!(
            h.score(4, None),
            Err(ScoreQueryError::UnknownNode { .. })
        ));
        assert!(matches!(
            h.score(0, Some(999)),
            Err(ScoreQueryError::UnknownEpoch(999))
        ));
    }
}
